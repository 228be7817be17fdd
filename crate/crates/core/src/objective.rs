//! Click losses: plain log-loss, confidence-weighted self-distillation
//! (global and with the group gate), and the focal, dwell-time reweighting
//! and multi-task baselines.
//!
//! Every loss is a sum over the batch and takes *logits*, so it can return
//! exact derivatives with respect to each logit. Probabilities are clamped to
//! `[EPSILON, 1 - EPSILON]`; derivatives through an active clamp are zero.

use std::fmt;
use std::str::FromStr;

use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, predict, predict_with_slope, Heads, ModelParams, EPSILON};

/// Seconds of dwell that add `ln 2` to a positive's weight.
pub const DWELL_SCALE_SECONDS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Ori,
    Global,
    Clsd,
    Focal,
    DtReweight,
    Mtl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ori,
        Variant::Global,
        Variant::Clsd,
        Variant::Focal,
        Variant::DtReweight,
        Variant::Mtl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ori => "ori",
            Variant::Global => "global",
            Variant::Clsd => "clsd",
            Variant::Focal => "focal",
            Variant::DtReweight => "dt-reweight",
            Variant::Mtl => "mtl",
        }
    }

    /// Whether the variant reads teacher scores.
    pub fn uses_teacher(self) -> bool {
        matches!(self, Variant::Global | Variant::Clsd)
    }

    pub fn uses_adgate(self) -> bool {
        self == Variant::Clsd
    }

    pub fn uses_aux(self) -> bool {
        self == Variant::Mtl
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ori" => Variant::Ori,
            "global" => Variant::Global,
            "clsd" => Variant::Clsd,
            "focal" => Variant::Focal,
            "dt-reweight" | "dt_reweight" => Variant::DtReweight,
            "mtl" => Variant::Mtl,
            other => return Err(Error::Config(format!("unknown loss `{other}`"))),
        })
    }
}

/// Where teacher scores come from. Only the previous-batch state exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TeacherPolicy {
    #[default]
    LastBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    /// Strength of the confidence weight, `1 + alpha * t`.
    pub alpha: f64,
    /// Leading share of epochs trained with plain log-loss.
    pub warmup_fraction: f64,
    pub epsilon: f64,
    pub focal_gamma: f64,
    pub dt_weight_cap: f64,
    pub mtl_weight: f64,
    pub teacher: TeacherPolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ori,
            alpha: 1.0,
            warmup_fraction: 1.0 / 3.0,
            epsilon: EPSILON,
            focal_gamma: 2.0,
            dt_weight_cap: 3.0,
            mtl_weight: 0.1,
            teacher: TeacherPolicy::LastBatch,
        }
    }
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warm-up fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.epsilon != EPSILON {
            return Err(Error::Config(format!("probability clamp is fixed at {EPSILON}")));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if !(self.dt_weight_cap.is_finite() && self.dt_weight_cap > 0.0) {
            return Err(Error::Config("dwell-time weight cap must be > 0".into()));
        }
        if !(self.mtl_weight.is_finite() && self.mtl_weight >= 0.0) {
            return Err(Error::Config("multi-task weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training phase: plain log-loss warm-up, then the configured objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Distill,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Distill => "clsd",
        }
    }
}

/// Detached confidence scores from the teacher's backbone. No gradient ever
/// flows into these values.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScore(Vec<f64>);

impl TeacherScore {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("teacher score {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    /// Scores from backbone logits computed with the pre-update parameters.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(logits.iter().map(|&z| predict(z)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Teacher forward pass: backbone only, gate excluded. `params` must be the
/// state before the current batch's update.
pub fn teacher_scores(params: &ModelParams, batch: &[&SampleRecord], phase: Phase, exec: Exec) -> Result<TeacherScore> {
    if phase == Phase::Warmup {
        return Err(Error::Contract("no teacher exists during warm-up".into()));
    }
    let trace = forward(params, batch, Heads::BACKBONE, exec)?;
    Ok(TeacherScore::from_logits(trace.backbone_logits()))
}

/// Loss value and per-sample derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// d(loss)/d(backbone logit).
    pub d_logit: Vec<f64>,
    /// d(loss)/d(gate logit), for the gated objective.
    pub d_adgate: Option<Vec<f64>>,
    /// d(loss)/d(dwell head output), for the multi-task objective.
    pub d_aux: Option<Vec<f64>>,
    /// Effective weight multiplying each sample's log term.
    pub weights: Vec<f64>,
}

impl LossValue {
    fn plain(value: f64, d_logit: Vec<f64>, weights: Vec<f64>) -> Self {
        Self {
            value,
            d_logit,
            d_adgate: None,
            d_aux: None,
            weights,
        }
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Contract(format!("{name} has {got} entries, expected {want}")));
    }
    Ok(())
}

/// Log-loss with a per-positive weight. `positive_weight(s)` is the weight on
/// sample `s` when it is a positive; negatives always weigh 1.
fn weighted_logloss(logits: &[f64], labels: &[f64], positive_weight: impl Fn(usize) -> f64) -> LossValue {
    let n = logits.len();
    let mut value = 0.0;
    let mut d = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in 0..n {
        let (p, slope) = predict_with_slope(logits[s]);
        let live = slope != 0.0;
        if labels[s] > 0.5 {
            let w = positive_weight(s);
            value -= w * p.ln();
            d.push(if live { -w * (1.0 - p) } else { 0.0 });
            weights.push(w);
        } else {
            value -= (1.0 - p).ln();
            d.push(if live { p } else { 0.0 });
            weights.push(1.0);
        }
    }
    LossValue::plain(value, d, weights)
}

/// `-sum[y ln p + (1 - y) ln(1 - p)]`; derivative `p - y`.
pub fn loss_ori(logits: &[f64], labels: &[f64]) -> Result<LossValue> {
    check_len("labels", labels.len(), logits.len())?;
    Ok(weighted_logloss(logits, labels, |_| 1.0))
}

/// `-sum[(1 + t) y ln p + (1 - y) ln(1 - p)]` with `t` held constant.
pub fn loss_global(logits: &[f64], labels: &[f64], teacher: &TeacherScore) -> Result<LossValue> {
    check_len("labels", labels.len(), logits.len())?;
    check_len("teacher scores", teacher.len(), logits.len())?;
    let t = teacher.values();
    Ok(weighted_logloss(logits, labels, |s| 1.0 + t[s]))
}

/// `-sum[(1 + alpha t) y ln q + (1 - y) ln(1 - q)]` with
/// `q = clamp(p + p_local)`. Without gate logits `p_local` is zero.
pub fn loss_clsd(
    logits: &[f64],
    adgate_logits: Option<&[f64]>,
    labels: &[f64],
    teacher: &TeacherScore,
    alpha: f64,
) -> Result<LossValue> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let n = logits.len();
    check_len("labels", labels.len(), n)?;
    check_len("teacher scores", teacher.len(), n)?;
    if let Some(g) = adgate_logits {
        check_len("gate logits", g.len(), n)?;
    }
    let t = teacher.values();
    let mut value = 0.0;
    let mut d_logit = Vec::with_capacity(n);
    let mut d_gate = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in 0..n {
        let (p, p_slope) = predict_with_slope(logits[s]);
        let (pl, pl_slope) = match adgate_logits {
            Some(g) => predict_with_slope(g[s]),
            None => (0.0, 0.0),
        };
        let raw = p + pl;
        let q = raw.clamp(EPSILON, 1.0 - EPSILON);
        let live = raw == q;
        let dq = if labels[s] > 0.5 {
            let w = 1.0 + alpha * t[s];
            weights.push(w);
            value -= w * q.ln();
            -w / q
        } else {
            weights.push(1.0);
            value -= (1.0 - q).ln();
            1.0 / (1.0 - q)
        };
        let dq = if live { dq } else { 0.0 };
        d_logit.push(dq * p_slope);
        d_gate.push(dq * pl_slope);
    }
    Ok(LossValue {
        value,
        d_logit,
        d_adgate: adgate_logits.map(|_| d_gate),
        d_aux: None,
        weights,
    })
}

/// `-sum[y (1 - p)^g ln p + (1 - y) p^g ln(1 - p)]`.
pub fn loss_focal(logits: &[f64], labels: &[f64], gamma: f64) -> Result<LossValue> {
    check_len("labels", labels.len(), logits.len())?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Config("focal gamma must be >= 0".into()));
    }
    let n = logits.len();
    let mut value = 0.0;
    let mut d = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in 0..n {
        let (p, slope) = predict_with_slope(logits[s]);
        let live = slope != 0.0;
        if labels[s] > 0.5 {
            let w = (1.0 - p).powf(gamma);
            value -= w * p.ln();
            // d/dz of -(1-p)^g ln p
            d.push(if live {
                gamma * p * w * p.ln() - w * (1.0 - p)
            } else {
                0.0
            });
            weights.push(w);
        } else {
            let w = p.powf(gamma);
            value -= w * (1.0 - p).ln();
            d.push(if live {
                -gamma * w * (1.0 - p) * (1.0 - p).ln() + w * p
            } else {
                0.0
            });
            weights.push(w);
        }
    }
    Ok(LossValue::plain(value, d, weights))
}

/// Positive weight `min(1 + ln(1 + dwell / 30), cap)`.
pub fn dwell_weight(dwell_time: f64, cap: f64) -> f64 {
    (1.0 + (dwell_time / DWELL_SCALE_SECONDS).ln_1p()).min(cap)
}

pub fn loss_dt_reweight(logits: &[f64], labels: &[f64], dwell: &[f64], cap: f64) -> Result<LossValue> {
    check_len("labels", labels.len(), logits.len())?;
    check_len("dwell times", dwell.len(), logits.len())?;
    if let Some(v) = dwell.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(Error::Contract(format!("negative dwell time {v}")));
    }
    Ok(weighted_logloss(logits, labels, |s| dwell_weight(dwell[s], cap)))
}

/// Log-loss plus `weight * mean over positives of (pred - ln(1 + dwell))^2`.
pub fn loss_mtl(
    logits: &[f64],
    labels: &[f64],
    dwell: &[f64],
    predicted_dwell: &[f64],
    weight: f64,
) -> Result<LossValue> {
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(Error::Config("multi-task weight must be >= 0".into()));
    }
    let n = logits.len();
    check_len("labels", labels.len(), n)?;
    check_len("dwell times", dwell.len(), n)?;
    check_len("dwell predictions", predicted_dwell.len(), n)?;
    let mut out = weighted_logloss(logits, labels, |_| 1.0);
    let positives = labels.iter().filter(|&&y| y > 0.5).count();
    let mut d_aux = vec![0.0; n];
    if positives > 0 {
        let scale = weight / positives as f64;
        let mut sq = 0.0;
        for s in 0..n {
            if labels[s] > 0.5 {
                let r = predicted_dwell[s] - dwell[s].ln_1p();
                sq += r * r;
                d_aux[s] = 2.0 * scale * r;
            }
        }
        out.value += scale * sq;
    }
    out.d_aux = Some(d_aux);
    Ok(out)
}

/// Model outputs and targets for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub logits: &'a [f64],
    pub adgate_logits: Option<&'a [f64]>,
    pub aux_outputs: Option<&'a [f64]>,
    pub labels: &'a [f64],
    pub dwell: &'a [f64],
    pub teacher: Option<&'a TeacherScore>,
}

/// Evaluates the configured objective.
pub fn compute(cfg: &LossConfig, x: LossInputs<'_>) -> Result<LossValue> {
    let teacher = || {
        x.teacher
            .ok_or_else(|| Error::Contract(format!("`{}` needs teacher scores", cfg.variant)))
    };
    match cfg.variant {
        Variant::Ori => loss_ori(x.logits, x.labels),
        Variant::Global => loss_global(x.logits, x.labels, teacher()?),
        Variant::Clsd => loss_clsd(x.logits, x.adgate_logits, x.labels, teacher()?, cfg.alpha),
        Variant::Focal => loss_focal(x.logits, x.labels, cfg.focal_gamma),
        Variant::DtReweight => loss_dt_reweight(x.logits, x.labels, x.dwell, cfg.dt_weight_cap),
        Variant::Mtl => {
            let aux = x
                .aux_outputs
                .ok_or_else(|| Error::Contract("`mtl` needs dwell-head outputs".into()))?;
            loss_mtl(x.logits, x.labels, x.dwell, aux, cfg.mtl_weight)
        }
    }
}
