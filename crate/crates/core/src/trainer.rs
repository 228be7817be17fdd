//! Mini-batch training with Adam, epoch-level warm-up and resumable
//! checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics;
use crate::model::checkpoint::format_values;
use crate::model::{
    backward_into, forward, parse_params, predict, write_params, Component, Gradient, Heads, ModelParams, Upstream,
    EPSILON,
};
use crate::objective::{compute, LossConfig, LossInputs, Phase, TeacherScore, Variant};

pub const DEFAULT_LEARNING_RATE: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, flat-indexed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Extends the moments with zeros for newly appended parameters.
    pub fn grow(&mut self, len: usize) {
        if len > self.m.len() {
            self.m.resize(len, 0.0);
            self.v.resize(len, 0.0);
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "adam shapes differ: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient[{i}] = {g} at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub exec: Exec,
}

impl TrainConfig {
    pub fn new(loss: LossConfig, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            loss,
            adam: AdamConfig::default(),
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Number of leading epochs trained with plain log-loss.
    pub fn warmup_epochs(&self) -> usize {
        warmup_epochs(self.epochs, self.loss.warmup_fraction)
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs() {
            Phase::Warmup
        } else {
            Phase::Distill
        }
    }
}

/// `ceil(fraction * epochs)`, tolerant of rounding in fractions like 1/3.
pub fn warmup_epochs(epochs: usize, fraction: f64) -> usize {
    let exact = fraction * epochs as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(epochs)
}

/// Independent seeds for the random consumers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedUse {
    Init = 1,
    Shuffle = 2,
    Heads = 3,
}

pub fn derive_seed(seed: u64, purpose: SeedUse) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean log-loss of the click prediction over the epoch's batches,
    /// measured before each batch's update.
    pub train_logloss: f64,
    pub test_auc: Option<f64>,
    pub test_logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "epoch,phase,train_logloss,test_auc,test_logloss";

    pub fn final_auc(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.test_auc)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{}",
                r.epoch,
                r.phase.as_str(),
                r.train_logloss,
                opt(r.test_auc),
                opt(r.test_logloss)
            );
        }
        out
    }
}

/// Instrumentation hooks. All methods default to no-ops.
pub trait TrainObserver {
    /// A teacher score pass is about to run on `params` for this batch.
    fn teacher_pass(&mut self, _epoch: usize, _batch: usize, _params: &ModelParams) {}
    /// `params` after this batch's update.
    fn after_update(&mut self, _epoch: usize, _batch: usize, _params: &ModelParams) {}
    fn epoch_end(&mut self, _row: &EpochRow) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParams) -> Self {
        let optimizer = OptimizerState::new(params.len());
        Self {
            params,
            optimizer,
            epoch: 0,
        }
    }
}

/// Trains `init` for all configured epochs.
pub fn train(
    train_set: &Corpus,
    test_set: Option<&Corpus>,
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<(TrainState, RunReport)> {
    train_until(
        train_set,
        test_set,
        TrainState::fresh(init),
        cfg,
        cfg.epochs,
        &mut NoObserver,
    )
}

/// Continues `state` up to (not including) epoch `stop`.
pub fn train_until(
    train_set: &Corpus,
    test_set: Option<&Corpus>,
    mut state: TrainState,
    cfg: &TrainConfig,
    stop: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, RunReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InsufficientData("training corpus is empty".into()));
    }
    let stop = stop.min(cfg.epochs);
    let shuffle_seed = derive_seed(cfg.seed, SeedUse::Shuffle);
    let head_seed = derive_seed(cfg.seed, SeedUse::Heads);
    let mut report = RunReport::default();
    let mut grad = Gradient::zeros(state.params.len());

    for epoch in state.epoch..stop {
        let phase = cfg.phase(epoch);
        let loss_cfg = match phase {
            Phase::Warmup => LossConfig {
                variant: Variant::Ori,
                ..cfg.loss.clone()
            },
            Phase::Distill => cfg.loss.clone(),
        };
        let variant = loss_cfg.variant;
        // Heads are created when first needed, so a run that never leaves
        // warm-up has exactly the plain backbone's parameters.
        if phase == Phase::Distill {
            if variant.uses_adgate() {
                state.params.enable_adgate(head_seed);
            }
            if variant.uses_aux() {
                state.params.enable_aux(head_seed);
            }
            state.optimizer.grow(state.params.len());
        }
        let heads = Heads {
            adgate: variant.uses_adgate(),
            aux: variant.uses_aux(),
        };

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in train_set
            .batches(cfg.batch_size, shuffle_seed, epoch as u64)
            .enumerate()
        {
            let trace = forward(&state.params, &batch, heads, cfg.exec)?;
            let teacher = if variant.uses_teacher() {
                observer.teacher_pass(epoch, b, &state.params);
                // Same parameters, same backbone logits: the student forward
                // already holds the detached teacher scores.
                Some(TeacherScore::from_logits(trace.backbone_logits()))
            } else {
                None
            };
            let labels: Vec<f64> = batch.iter().map(|r| r.label_f64()).collect();
            let dwell: Vec<f64> = batch.iter().map(|r| r.dwell_time).collect();
            let loss = compute(
                &loss_cfg,
                LossInputs {
                    logits: trace.backbone_logits(),
                    adgate_logits: trace.adgate_logits(),
                    aux_outputs: trace.aux_outputs(),
                    labels: &labels,
                    dwell: &dwell,
                    teacher: teacher.as_ref(),
                },
            )?;
            if !loss.value.is_finite() {
                let head: Vec<String> = trace
                    .backbone_logits()
                    .iter()
                    .take(8)
                    .map(|z| format!("{z:.4}"))
                    .collect();
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch} batch {b} ({} samples, first logits [{}])",
                    loss.value,
                    batch.len(),
                    head.join(", ")
                )));
            }
            loss_sum += click_logloss_sum(trace.backbone_logits(), trace.adgate_logits(), &labels);
            seen += batch.len();

            if grad.values.len() != state.params.len() {
                grad = Gradient::zeros(state.params.len());
            }
            backward_into(
                &state.params,
                &trace,
                Upstream {
                    backbone: &loss.d_logit,
                    adgate: loss.d_adgate.as_deref(),
                    aux: loss.d_aux.as_deref(),
                },
                Component::Both,
                cfg.exec,
                &mut grad,
            )?;
            adam_step(
                state.params.values_mut(),
                &grad.values,
                &mut state.optimizer,
                cfg.learning_rate,
                &cfg.adam,
            )?;
            observer.after_update(epoch, b, &state.params);
        }

        let eval = match test_set {
            Some(t) => Some(metrics::evaluate(&state.params, t, cfg.exec)?),
            None => None,
        };
        let row = EpochRow {
            epoch,
            phase,
            train_logloss: loss_sum / seen as f64,
            test_auc: eval.map(|e| e.auc),
            test_logloss: eval.map(|e| e.logloss),
        };
        observer.epoch_end(&row);
        report.rows.push(row);
        state.epoch = epoch + 1;
    }
    Ok((state, report))
}

fn click_logloss_sum(logits: &[f64], gate: Option<&[f64]>, labels: &[f64]) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(s, &z)| {
            let mut p = predict(z);
            if let Some(g) = gate {
                p = (p + predict(g[s])).clamp(EPSILON, 1.0 - EPSILON);
            }
            if labels[s] > 0.5 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Serializes parameters plus optimizer state and epoch counter.
pub fn checkpoint_text(state: &TrainState) -> String {
    let mut out = String::new();
    write_params(&state.params, &mut out);
    let _ = writeln!(out, "adam.step\n{}", state.optimizer.step);
    let _ = writeln!(out, "adam.m\n{}", format_values(&state.optimizer.m));
    let _ = writeln!(out, "adam.v\n{}", format_values(&state.optimizer.v));
    let _ = writeln!(out, "epoch\n{}", state.epoch);
    out
}

/// Parses [`checkpoint_text`] output. A file with parameters only loads with
/// a fresh optimizer at epoch 0.
pub fn parse_checkpoint(text: &str) -> Result<TrainState> {
    let (params, extras) = parse_params(text)?;
    let mut state = TrainState::fresh(params);
    let floats = |name: &str, raw: &str| -> Result<Vec<f64>> {
        raw.split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Checkpoint(format!("section `{name}`: `{v}`: {e}")))
            })
            .collect()
    };
    for (name, raw) in &extras {
        match name.as_str() {
            "adam.step" => {
                state.optimizer.step = raw
                    .trim()
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("adam.step: {e}")))?
            }
            "adam.m" => state.optimizer.m = floats(name, raw)?,
            "adam.v" => state.optimizer.v = floats(name, raw)?,
            "epoch" => {
                state.epoch = raw
                    .trim()
                    .parse()
                    .map_err(|e| Error::Checkpoint(format!("epoch: {e}")))?
            }
            other => return Err(Error::Checkpoint(format!("unknown section `{other}`"))),
        }
    }
    let n = state.params.len();
    if state.optimizer.m.len() != n || state.optimizer.v.len() != n {
        return Err(Error::Checkpoint(format!(
            "optimizer moments have {}/{} values for {n} parameters",
            state.optimizer.m.len(),
            state.optimizer.v.len()
        )));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_text(state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GenConfig};
    use crate::model::{Backbone, ModelSpec};

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![0.5, -0.25];
        let mut st = OptimizerState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.003, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -0.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        for g in [1.0, -3.0, 1e-3, 250.0] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(1);
            adam_step(&mut p, &[g], &mut st, 0.003, &AdamConfig::default()).unwrap();
            let d = p[0].abs();
            assert!((0.99 * 0.003..=0.003).contains(&d), "g={g}: {d}");
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_three_steps_match_recurrence() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let grads = [0.4, -1.3, 0.7];
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(1);
        for g in grads {
            adam_step(&mut p, &[g], &mut st, lr, &AdamConfig::default()).unwrap();
        }
        assert!((p[0] - x).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimizerState::new(2);
        let err = adam_step(&mut p, &[0.1, f64::NAN], &mut st, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn warmup_boundary() {
        assert_eq!(warmup_epochs(9, 1.0 / 3.0), 3);
        assert_eq!(warmup_epochs(10, 1.0 / 3.0), 4);
        assert_eq!(warmup_epochs(5, 0.0), 0);
        assert_eq!(warmup_epochs(5, 1.0), 5);
        let cfg = TrainConfig::new(LossConfig::new(Variant::Clsd), 9, 0);
        let phases: Vec<Phase> = (0..9).map(|e| cfg.phase(e)).collect();
        assert!(phases[..3].iter().all(|&p| p == Phase::Warmup));
        assert!(phases[3..].iter().all(|&p| p == Phase::Distill));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(LossConfig::new(Variant::Ori), 0, 0);
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    pub(crate) fn small_data() -> (Corpus, Corpus) {
        let g = generate(&GenConfig {
            users: 50,
            items: 40,
            groups: 3,
            records: 1500,
            test_records: 500,
            seed: 3,
            ..GenConfig::default()
        })
        .unwrap();
        (g.train, g.test)
    }

    fn init(train: &Corpus, backbone: Backbone, seed: u64) -> ModelParams {
        ModelParams::init(
            ModelSpec::new(backbone, &train.schema),
            derive_seed(seed, SeedUse::Init),
        )
        .unwrap()
    }

    #[derive(Default)]
    struct Recorder {
        teacher: Vec<(usize, usize, u64)>,
        updates: Vec<u64>,
    }

    impl TrainObserver for Recorder {
        fn teacher_pass(&mut self, epoch: usize, batch: usize, params: &ModelParams) {
            self.teacher.push((epoch, batch, params.fingerprint()));
        }
        fn after_update(&mut self, _: usize, _: usize, params: &ModelParams) {
            self.updates.push(params.fingerprint());
        }
    }

    #[test]
    fn no_teacher_in_warmup_and_teacher_is_previous_state() {
        let (tr, te) = small_data();
        let mut cfg = TrainConfig::new(LossConfig::new(Variant::Clsd), 3, 11);
        cfg.batch_size = 128;
        let mut rec = Recorder::default();
        let state = TrainState::fresh(init(&tr, Backbone::Fm, 11));
        train_until(&tr, Some(&te), state, &cfg, 3, &mut rec).unwrap();
        let per_epoch = tr.len().div_ceil(128);
        assert!(rec.teacher.iter().all(|&(e, _, _)| e >= 1));
        assert_eq!(rec.teacher.len(), 2 * per_epoch);
        for &(e, b, fp) in &rec.teacher {
            let global = e * per_epoch + b;
            if b > 0 {
                assert_eq!(fp, rec.updates[global - 1]);
            }
        }
    }

    #[test]
    fn report_shape_and_determinism() {
        let (tr, te) = small_data();
        let cfg = TrainConfig::new(LossConfig::new(Variant::Clsd), 3, 5);
        let a = train(&tr, Some(&te), init(&tr, Backbone::Lr, 5), &cfg).unwrap();
        let b = train(&tr, Some(&te), init(&tr, Backbone::Lr, 5), &cfg).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(checkpoint_text(&a.0), checkpoint_text(&b.0));
        let csv = a.1.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RunReport::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,warmup,"));
        assert!(lines[2].starts_with("1,clsd,"));
        assert!(a.0.params.has_adgate());
    }

    #[test]
    fn full_warmup_matches_ori_bytes() {
        let (tr, te) = small_data();
        let mut clsd = LossConfig::new(Variant::Clsd);
        clsd.warmup_fraction = 1.0;
        let a = train(
            &tr,
            Some(&te),
            init(&tr, Backbone::DeepFm, 2),
            &TrainConfig::new(clsd, 2, 2),
        )
        .unwrap();
        let ori = LossConfig::new(Variant::Ori);
        let b = train(
            &tr,
            Some(&te),
            init(&tr, Backbone::DeepFm, 2),
            &TrainConfig::new(ori, 2, 2),
        )
        .unwrap();
        assert_eq!(checkpoint_text(&a.0), checkpoint_text(&b.0));
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (tr, te) = small_data();
        for variant in [Variant::Clsd, Variant::Mtl] {
            let cfg = TrainConfig::new(LossConfig::new(variant), 4, 8);
            let full = train(&tr, Some(&te), init(&tr, Backbone::DeepFm, 8), &cfg).unwrap();

            let fresh = TrainState::fresh(init(&tr, Backbone::DeepFm, 8));
            let (mid, first) = train_until(&tr, Some(&te), fresh, &cfg, 2, &mut NoObserver).unwrap();
            let text = checkpoint_text(&mid);
            let loaded = parse_checkpoint(&text).unwrap();
            assert_eq!(checkpoint_text(&loaded), text);
            let (end, second) = train_until(&tr, Some(&te), loaded, &cfg, 4, &mut NoObserver).unwrap();

            assert_eq!(checkpoint_text(&end), checkpoint_text(&full.0));
            let mut rows = first.rows;
            rows.extend(second.rows);
            assert_eq!(rows, full.1.rows);
        }
    }

    #[test]
    fn truncated_checkpoint_is_refused() {
        let (tr, _) = small_data();
        let text = checkpoint_text(&TrainState::fresh(init(&tr, Backbone::Lr, 1)));
        for cut in [text.len() / 3, text.len() - 5, text.len() - 1] {
            assert!(parse_checkpoint(&text[..cut]).is_err());
        }
    }
}
