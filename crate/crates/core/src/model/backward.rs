use super::forward::ChunkTrace;
use super::{Backbone, Layout, ModelParams};
use crate::error::{Error, Result};
use crate::exec::{Exec, CHUNK};

/// Which parameter group receives gradient. The dwell-time head counts as
/// part of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Backbone,
    AdGate,
    Both,
}

impl Component {
    fn backbone(self) -> bool {
        matches!(self, Component::Backbone | Component::Both)
    }

    fn adgate(self) -> bool {
        matches!(self, Component::AdGate | Component::Both)
    }
}

/// Per-sample derivatives of the loss with respect to each model output.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub backbone: &'a [f64],
    pub adgate: Option<&'a [f64]>,
    pub aux: Option<&'a [f64]>,
}

/// Gradient with the same flat indexing as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

struct ChunkGrad {
    /// Gradient of everything past the sparse prefix.
    dense: Vec<f64>,
    features: Vec<usize>,
    /// Stride `dim + 1`: first-order gradient, then the embedding gradient.
    rows: Vec<f64>,
}

/// Exact gradient of `sum_s upstream[s] * output[s]` over the traced batch.
pub fn backward(
    params: &ModelParams,
    trace: &super::ForwardTrace,
    upstream: Upstream<'_>,
    which: Component,
    exec: Exec,
) -> Result<Gradient> {
    let mut grad = Gradient::zeros(params.len());
    backward_into(params, trace, upstream, which, exec, &mut grad)?;
    Ok(grad)
}

/// As [`backward`], overwriting `grad`.
pub fn backward_into(
    params: &ModelParams,
    trace: &super::ForwardTrace,
    upstream: Upstream<'_>,
    which: Component,
    exec: Exec,
    grad: &mut Gradient,
) -> Result<()> {
    let n = trace.len();
    if upstream.backbone.len() != n {
        return Err(Error::Contract(format!(
            "{} backbone upstream values for a batch of {n}",
            upstream.backbone.len()
        )));
    }
    for (name, up, present) in [
        ("adgate", upstream.adgate, trace.adgate_logits().is_some()),
        ("aux", upstream.aux, trace.aux_outputs().is_some()),
    ] {
        if let Some(up) = up {
            if !present {
                return Err(Error::Contract(format!(
                    "{name} upstream given but the trace has no {name} output"
                )));
            }
            if up.len() != n {
                return Err(Error::Contract(format!(
                    "{} {name} upstream values for a batch of {n}",
                    up.len()
                )));
            }
        }
    }
    if grad.values.len() != params.len() {
        return Err(Error::Contract("gradient buffer has the wrong length".into()));
    }

    let layout = params.layout();
    let indexed: Vec<(usize, &ChunkTrace)> = trace.chunks.iter().enumerate().collect();
    let parts = exec.map(&indexed, |&(index, chunk)| {
        // Every chunk except possibly the last holds exactly CHUNK samples.
        let start = index * CHUNK;
        let slice = |u: &[f64]| u[start..start + chunk.n].to_vec();
        let up_b = slice(upstream.backbone);
        let up_a = upstream.adgate.map(slice);
        let up_x = upstream.aux.map(slice);
        backward_chunk(params, layout, chunk, &up_b, up_a.as_deref(), up_x.as_deref(), which)
    });

    grad.values.iter_mut().for_each(|v| *v = 0.0);
    let sparse_end = layout.sparse_end();
    let d = layout.spec.dim;
    for part in parts {
        for (g, p) in grad.values[sparse_end..].iter_mut().zip(&part.dense) {
            *g += p;
        }
        for (f, row) in part.features.iter().zip(part.rows.chunks_exact(d + 1)) {
            grad.values[layout.first_order.start + f] += row[0];
            let emb = layout.embedding(*f);
            for (g, p) in grad.values[emb].iter_mut().zip(&row[1..]) {
                *g += p;
            }
        }
    }
    Ok(())
}

fn backward_chunk(
    params: &ModelParams,
    layout: &Layout,
    chunk: &ChunkTrace,
    up_backbone: &[f64],
    up_gate: Option<&[f64]>,
    up_aux: Option<&[f64]>,
    which: Component,
) -> ChunkGrad {
    let w = params.values();
    let spec = &layout.spec;
    let k = spec.fields();
    let d = spec.dim;
    let se = layout.sparse_end();
    let mut out = ChunkGrad {
        dense: vec![0.0; layout.len() - se],
        features: Vec::with_capacity(chunk.n * k),
        rows: Vec::with_capacity(chunk.n * k * (d + 1)),
    };
    let dense = &mut out.dense;

    let depth = layout.mlp.len();
    let widest = layout
        .mlp
        .iter()
        .map(|l| l.fan_in.max(l.fan_out))
        .max()
        .unwrap_or(0)
        .max(k * d);
    let mut delta = vec![0.0; widest];
    let mut back = vec![0.0; widest];
    let mut d_input = vec![0.0; k * d];
    let mut x = vec![0.0; widest];

    for s in 0..chunk.n {
        if which.backbone() {
            let g = up_backbone[s];
            let gx = up_aux.map_or(0.0, |u| u[s]);
            dense[layout.bias - se] += g;
            d_input.iter_mut().for_each(|v| *v = 0.0);
            let input = if chunk.input.is_empty() {
                &[][..]
            } else {
                &chunk.input[s * k * d..(s + 1) * k * d]
            };

            if spec.backbone != Backbone::Lr {
                let sum = &chunk.emb_sum[s * d..(s + 1) * d];
                for j in 0..k {
                    for t in 0..d {
                        d_input[j * d + t] += g * (sum[t] - input[j * d + t]);
                    }
                }
            }

            // Dwell head reading the raw input.
            let aux_on_input = layout.aux.is_some() && up_aux.is_some() && depth <= 1;
            if aux_on_input {
                let aux = layout.aux.as_ref().unwrap();
                for (i, xi) in input.iter().enumerate() {
                    dense[aux.w.start - se + i] += gx * xi;
                    d_input[i] += gx * w[aux.w.start + i];
                }
                dense[aux.b.start - se] += gx;
            }

            if depth > 0 {
                delta[0] = g;
                for l in (0..depth).rev() {
                    let layer = &layout.mlp[l];
                    // Layer input: raw embeddings or the previous ReLU output.
                    if l == 0 {
                        x[..layer.fan_in].copy_from_slice(input);
                    } else {
                        let z = &chunk.mlp_z[l - 1][s * layer.fan_in..(s + 1) * layer.fan_in];
                        for (xi, zi) in x[..layer.fan_in].iter_mut().zip(z) {
                            *xi = zi.max(0.0);
                        }
                    }
                    back[..layer.fan_in].iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..layer.fan_out {
                        let dz = delta[o];
                        if dz == 0.0 {
                            continue;
                        }
                        let row = layer.w.start + o * layer.fan_in;
                        for i in 0..layer.fan_in {
                            dense[row - se + i] += dz * x[i];
                            back[i] += dz * w[row + i];
                        }
                        dense[layer.b.start - se + o] += dz;
                    }
                    if l == 0 {
                        for (di, bi) in d_input.iter_mut().zip(&back[..layer.fan_in]) {
                            *di += bi;
                        }
                    } else {
                        // Dwell head reading the last hidden layer.
                        if l == depth - 1 {
                            if let (Some(aux), Some(_)) = (layout.aux.as_ref(), up_aux) {
                                for i in 0..layer.fan_in {
                                    dense[aux.w.start - se + i] += gx * x[i];
                                    back[i] += gx * w[aux.w.start + i];
                                }
                                dense[aux.b.start - se] += gx;
                            }
                        }
                        let z = &chunk.mlp_z[l - 1][s * layer.fan_in..(s + 1) * layer.fan_in];
                        for i in 0..layer.fan_in {
                            delta[i] = if z[i] > 0.0 { back[i] } else { 0.0 };
                        }
                    }
                }
            }

            for j in 0..k {
                out.features.push(chunk.features[s * k + j]);
                out.rows.push(g);
                out.rows.extend_from_slice(&d_input[j * d..(j + 1) * d]);
            }
        }

        if which.adgate() {
            if let (Some(up), Some(gate), Some(gz)) = (up_gate, layout.adgate.as_ref(), chunk.gate_z.as_ref()) {
                let ga = up[s];
                let [hidden, out_layer] = gate;
                let h = hidden.fan_out;
                let group = chunk.groups[s];
                let z = &gz[s * h..(s + 1) * h];
                dense[out_layer.b.start - se] += ga;
                for u in 0..h {
                    dense[out_layer.w.start - se + u] += ga * z[u].max(0.0);
                    if z[u] > 0.0 {
                        let dz = ga * w[out_layer.w.start + u];
                        dense[hidden.w.start - se + u * hidden.fan_in + group] += dz;
                        dense[hidden.b.start - se + u] += dz;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SampleRecord;
    use crate::model::tests::small_spec;
    use crate::model::{forward, Heads};

    fn recs() -> Vec<SampleRecord> {
        (0..70)
            .map(|i: u32| SampleRecord {
                feature_ids: vec![i % 5, (i / 5) % 4, i % 3],
                label: i.is_multiple_of(4),
                dwell_time: if i.is_multiple_of(4) { i as f64 } else { 0.0 },
                group_id: i % 3,
                latent_confidence: None,
            })
            .collect()
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut p = ModelParams::init(small_spec(Backbone::DeepFm), 1).unwrap();
        p.enable_adgate(1);
        let rs = recs();
        let batch: Vec<&SampleRecord> = rs.iter().collect();
        let t = forward(&p, &batch, Heads::ALL, Exec::Sequential).unwrap();
        let zeros = vec![0.0; batch.len()];
        let up = Upstream {
            backbone: &zeros,
            adgate: Some(&zeros),
            aux: None,
        };
        let g = backward(&p, &t, up, Component::Both, Exec::Sequential).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lr_bias_gradient_is_upstream() {
        let p = ModelParams::init(small_spec(Backbone::Lr), 1).unwrap();
        let rs = recs();
        let t = forward(&p, &[&rs[0]], Heads::ALL, Exec::Sequential).unwrap();
        let up = Upstream {
            backbone: &[0.37],
            adgate: None,
            aux: None,
        };
        let g = backward(&p, &t, up, Component::Backbone, Exec::Sequential).unwrap();
        assert_eq!(g.values[p.layout().bias], 0.37);
    }

    #[test]
    fn unselected_component_is_zero() {
        let mut p = ModelParams::init(small_spec(Backbone::Fm), 2).unwrap();
        p.enable_adgate(2);
        let rs = recs();
        let batch: Vec<&SampleRecord> = rs.iter().collect();
        let t = forward(&p, &batch, Heads::ALL, Exec::Sequential).unwrap();
        let ones = vec![1.0; batch.len()];
        let up = Upstream {
            backbone: &ones,
            adgate: Some(&ones),
            aux: None,
        };
        let gate = p.layout().adgate_range().unwrap();
        let gb = backward(&p, &t, up, Component::Backbone, Exec::Sequential).unwrap();
        assert!(gb.values[gate.clone()].iter().all(|&v| v == 0.0));
        let ga = backward(&p, &t, up, Component::AdGate, Exec::Sequential).unwrap();
        assert!(ga.values[..gate.start].iter().all(|&v| v == 0.0));
        assert!(ga.values[gate].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let p = ModelParams::init(small_spec(Backbone::Lr), 1).unwrap();
        let rs = recs();
        let t = forward(&p, &[&rs[0], &rs[1]], Heads::ALL, Exec::Sequential).unwrap();
        let up = Upstream {
            backbone: &[1.0],
            adgate: None,
            aux: None,
        };
        assert!(matches!(
            backward(&p, &t, up, Component::Backbone, Exec::Sequential),
            Err(Error::Contract(_))
        ));
        let up = Upstream {
            backbone: &[1.0, 1.0],
            adgate: Some(&[1.0, 1.0]),
            aux: None,
        };
        assert!(matches!(
            backward(&p, &t, up, Component::Both, Exec::Sequential),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sequential_and_parallel_bitwise_equal() {
        let mut p = ModelParams::init(small_spec(Backbone::DeepFm), 3).unwrap();
        p.enable_adgate(3);
        p.enable_aux(3);
        let rs = recs();
        let batch: Vec<&SampleRecord> = rs.iter().collect();
        let t = forward(&p, &batch, Heads::ALL, Exec::Sequential).unwrap();
        let up: Vec<f64> = (0..batch.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let u = Upstream {
            backbone: &up,
            adgate: Some(&up),
            aux: Some(&up),
        };
        let a = backward(&p, &t, u, Component::Both, Exec::Sequential).unwrap();
        let b = backward(&p, &t, u, Component::Both, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
