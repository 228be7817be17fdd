//! Central finite-difference verification of the analytic gradients on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{FieldRole, FieldSchema, SampleRecord};
use crate::error::Result;
use crate::exec::Exec;
use crate::model::{backward, forward, Backbone, Component, Gradient, Heads, ModelParams, ModelSpec, Upstream};
use crate::objective::{compute, LossConfig, LossInputs, TeacherScore, Variant};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f64,
    /// Allowed relative error.
    pub relative: f64,
    /// Denominator floor, so that coordinates with near-zero gradient are
    /// compared absolutely.
    pub floor: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            relative: 1e-4,
            floor: 1e-7,
        }
    }
}

/// A random problem: parameters, batch, loss and a fixed teacher.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams,
    pub batch: Vec<SampleRecord>,
    pub loss: LossConfig,
    pub teacher: TeacherScore,
}

const PARAM_SCALE: f64 = 0.5;

impl Instance {
    /// Four fields, 3-dim embeddings, a `[5, 4]` MLP for DeepFM, weights
    /// large enough that every term contributes.
    pub fn random(backbone: Backbone, variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = FieldSchema::new(
            vec![4, 3, 3, 2],
            vec![
                FieldRole::UserId,
                FieldRole::ItemId,
                FieldRole::UserGroup,
                FieldRole::ItemAttr,
            ],
        )?;
        let spec = ModelSpec {
            dim: 3,
            mlp_hidden: vec![5, 4],
            adgate_hidden: 3,
            ..ModelSpec::new(backbone, &schema)
        };
        let mut params = ModelParams::init(spec, rng.random())?;
        if variant.uses_adgate() {
            params.enable_adgate(rng.random());
        }
        if variant.uses_aux() {
            params.enable_aux(rng.random());
        }
        for v in params.values_mut() {
            *v = rng.random_range(-PARAM_SCALE..PARAM_SCALE);
        }
        if let Some(gate) = params.layout().adgate_range() {
            // Keep p + p_local mostly below the clamp.
            params.values_mut()[gate.end - 1] = -2.0;
        }

        let n = rng.random_range(4..=12);
        let batch = (0..n)
            .map(|_| {
                let ids: Vec<u32> = schema.cardinalities().iter().map(|&c| rng.random_range(0..c)).collect();
                let label = rng.random::<bool>();
                SampleRecord {
                    group_id: ids[2],
                    feature_ids: ids,
                    label,
                    dwell_time: if label { rng.random_range(0.0..200.0) } else { 0.0 },
                    latent_confidence: None,
                }
            })
            .collect();
        let teacher = TeacherScore::new((0..n).map(|_| rng.random_range(0.01..0.99)).collect())?;
        let loss = LossConfig {
            alpha: rng.random_range(0.0..1.5),
            ..LossConfig::new(variant)
        };
        Ok(Self {
            params,
            batch,
            loss,
            teacher,
        })
    }

    fn heads(&self) -> Heads {
        Heads {
            adgate: self.loss.variant.uses_adgate(),
            aux: self.loss.variant.uses_aux(),
        }
    }

    /// Loss value and, when asked, the analytic gradient.
    fn evaluate(&self, params: &ModelParams, with_grad: bool) -> Result<(f64, Option<Gradient>)> {
        let refs: Vec<&SampleRecord> = self.batch.iter().collect();
        let trace = forward(params, &refs, self.heads(), Exec::Sequential)?;
        let labels: Vec<f64> = self.batch.iter().map(|r| r.label_f64()).collect();
        let dwell: Vec<f64> = self.batch.iter().map(|r| r.dwell_time).collect();
        let loss = compute(
            &self.loss,
            LossInputs {
                logits: trace.backbone_logits(),
                adgate_logits: trace.adgate_logits(),
                aux_outputs: trace.aux_outputs(),
                labels: &labels,
                dwell: &dwell,
                teacher: Some(&self.teacher),
            },
        )?;
        if !with_grad {
            return Ok((loss.value, None));
        }
        let grad = backward(
            params,
            &trace,
            Upstream {
                backbone: &loss.d_logit,
                adgate: loss.d_adgate.as_deref(),
                aux: loss.d_aux.as_deref(),
            },
            Component::Both,
            Exec::Sequential,
        )?;
        Ok((loss.value, Some(grad)))
    }

    pub fn loss_value(&self, params: &ModelParams) -> Result<f64> {
        self.evaluate(params, false).map(|(v, _)| v)
    }

    pub fn gradient(&self) -> Result<Gradient> {
        let (_, g) = self.evaluate(&self.params, true)?;
        Ok(g.expect("gradient requested"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub coordinates: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_error: f64,
    pub worst_index: usize,
}

impl Report {
    pub fn passes(&self, tol: &Tolerance) -> bool {
        self.max_error <= tol.relative
    }
}

/// Compares the analytic gradient with central differences on every
/// parameter.
pub fn check(instance: &Instance, tol: &Tolerance) -> Result<Report> {
    let grad = instance.gradient()?;
    let mut probe = instance.params.clone();
    let mut report = Report {
        coordinates: probe.len(),
        max_error: 0.0,
        worst_index: 0,
    };
    for i in 0..probe.len() {
        let x = probe.values()[i];
        probe.values_mut()[i] = x + tol.step;
        let up = instance.loss_value(&probe)?;
        probe.values_mut()[i] = x - tol.step;
        let down = instance.loss_value(&probe)?;
        probe.values_mut()[i] = x;
        let numeric = (up - down) / (2.0 * tol.step);
        let analytic = grad.values[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(tol.floor);
        if err > report.max_error {
            report.max_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_backbone_and_variant() {
        let tol = Tolerance::default();
        for b in Backbone::ALL {
            for v in Variant::ALL {
                for seed in 0..3 {
                    let inst = Instance::random(b, v, seed).unwrap();
                    let r = check(&inst, &tol).unwrap();
                    assert!(r.passes(&tol), "{b} {v} seed {seed}: {r:?}");
                }
            }
        }
    }

    #[test]
    fn teacher_change_moves_loss_not_exactness() {
        let mut inst = Instance::random(Backbone::DeepFm, Variant::Clsd, 1).unwrap();
        inst.loss.alpha = 1.0;
        let before = inst.loss_value(&inst.params).unwrap();
        inst.teacher = TeacherScore::new(vec![0.9; inst.batch.len()]).unwrap();
        assert_ne!(inst.loss_value(&inst.params).unwrap(), before);
        assert!(check(&inst, &Tolerance::default())
            .unwrap()
            .passes(&Tolerance::default()));
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let inst = Instance::random(Backbone::Fm, Variant::Ori, 2).unwrap();
        let grad = inst.gradient().unwrap();
        let i = grad.values.iter().position(|g| g.abs() > 1e-3).unwrap();
        let mut probe = inst.params.clone();
        let h = 1e-4;
        probe.values_mut()[i] += h;
        let up = inst.loss_value(&probe).unwrap();
        probe.values_mut()[i] -= 2.0 * h;
        let down = inst.loss_value(&probe).unwrap();
        let numeric = (up - down) / (2.0 * h);
        assert!((grad.values[i] - numeric).abs() < 1e-6);
        assert!((1.01 * grad.values[i] - numeric).abs() / numeric.abs() > 1e-4);
    }
}
