use super::{Backbone, Dense, Layout, ModelParams};
use crate::corpus::SampleRecord;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Which optional heads a forward pass evaluates. Heads that are not
/// allocated in the parameters are skipped regardless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub adgate: bool,
    pub aux: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        adgate: true,
        aux: true,
    };
    pub const BACKBONE: Heads = Heads {
        adgate: false,
        aux: false,
    };
}

/// Activations of one chunk of samples.
#[derive(Debug, Clone)]
pub(crate) struct ChunkTrace {
    pub n: usize,
    /// `n x fields` global feature indices.
    pub features: Vec<usize>,
    pub groups: Vec<usize>,
    /// `n x dim` sum of field embeddings (FM term).
    pub emb_sum: Vec<f64>,
    /// `n x (fields * dim)` concatenated field embeddings.
    pub input: Vec<f64>,
    /// Pre-activations per MLP layer, `n x fan_out` each.
    pub mlp_z: Vec<Vec<f64>>,
    pub backbone_logit: Vec<f64>,
    pub aux: Option<Vec<f64>>,
    /// Gate hidden pre-activations, `n x hidden`.
    pub gate_z: Option<Vec<f64>>,
    pub gate_logit: Option<Vec<f64>>,
}

/// Everything [`super::backward`] needs, plus the per-sample outputs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) chunks: Vec<ChunkTrace>,
    backbone_logits: Vec<f64>,
    adgate_logits: Option<Vec<f64>>,
    aux_outputs: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.backbone_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backbone_logits.is_empty()
    }

    pub fn backbone_logits(&self) -> &[f64] {
        &self.backbone_logits
    }

    pub fn adgate_logits(&self) -> Option<&[f64]> {
        self.adgate_logits.as_deref()
    }

    /// Dwell-time head predictions (targets are `ln(1 + dwell)`).
    pub fn aux_outputs(&self) -> Option<&[f64]> {
        self.aux_outputs.as_deref()
    }
}

/// Runs the backbone and the requested heads over a batch.
pub fn forward(params: &ModelParams, batch: &[&SampleRecord], heads: Heads, exec: Exec) -> Result<ForwardTrace> {
    let layout = params.layout();
    let heads = Heads {
        adgate: heads.adgate && params.has_adgate(),
        aux: heads.aux && params.has_aux(),
    };
    let chunks = exec
        .map_chunks(batch, |_, chunk| forward_chunk(params, layout, chunk, heads))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let backbone_logits = chunks.iter().flat_map(|c| c.backbone_logit.iter().copied()).collect();
    let adgate_logits = heads.adgate.then(|| {
        chunks
            .iter()
            .flat_map(|c| c.gate_logit.as_ref().unwrap().iter().copied())
            .collect()
    });
    let aux_outputs = heads.aux.then(|| {
        chunks
            .iter()
            .flat_map(|c| c.aux.as_ref().unwrap().iter().copied())
            .collect()
    });
    Ok(ForwardTrace {
        chunks,
        backbone_logits,
        adgate_logits,
        aux_outputs,
    })
}

/// Gate activations for a batch; depend only on each record's group.
#[derive(Debug, Clone)]
pub struct AdGateTrace {
    pub logits: Vec<f64>,
    pub hidden_pre: Vec<f64>,
}

/// `p_local = sigmoid(AdGate(one_hot(group)))`, clamped like every other
/// probability.
pub fn adgate_forward(params: &ModelParams, batch: &[&SampleRecord]) -> Result<(Vec<f64>, AdGateTrace)> {
    let layout = params.layout();
    let gate = layout
        .adgate
        .as_ref()
        .ok_or_else(|| Error::Config("model has no adaptive gate".into()))?;
    let w = params.values();
    let hidden = gate[0].fan_out;
    let mut logits = Vec::with_capacity(batch.len());
    let mut hidden_pre = vec![0.0; batch.len() * hidden];
    for (s, r) in batch.iter().enumerate() {
        let g = r.group_id as usize;
        if g >= layout.spec.groups {
            return Err(Error::Index(format!(
                "group id {g} out of range ({} groups)",
                layout.spec.groups
            )));
        }
        logits.push(gate_sample(w, gate, g, &mut hidden_pre[s * hidden..(s + 1) * hidden]));
    }
    let p = logits.iter().map(|&z| super::predict(z)).collect();
    Ok((p, AdGateTrace { logits, hidden_pre }))
}

fn gate_sample(w: &[f64], gate: &[Dense; 2], group: usize, z: &mut [f64]) -> f64 {
    let [hidden, out] = gate;
    let mut logit = w[out.b.start];
    for (h, zh) in z.iter_mut().enumerate() {
        *zh = w[hidden.w.start + h * hidden.fan_in + group] + w[hidden.b.start + h];
        logit += w[out.w.start + h] * zh.max(0.0);
    }
    logit
}

fn forward_chunk(params: &ModelParams, layout: &Layout, chunk: &[&SampleRecord], heads: Heads) -> Result<ChunkTrace> {
    let w = params.values();
    let spec = &layout.spec;
    let k = spec.fields();
    let d = spec.dim;
    let n = chunk.len();
    let uses_embeddings = spec.backbone != Backbone::Lr || heads.aux;

    let mut trace = ChunkTrace {
        n,
        features: Vec::with_capacity(n * k),
        groups: Vec::with_capacity(n),
        emb_sum: vec![0.0; n * d],
        input: if uses_embeddings {
            vec![0.0; n * k * d]
        } else {
            Vec::new()
        },
        mlp_z: layout.mlp.iter().map(|l| vec![0.0; n * l.fan_out]).collect(),
        backbone_logit: Vec::with_capacity(n),
        aux: heads.aux.then(|| Vec::with_capacity(n)),
        gate_z: heads.adgate.then(|| vec![0.0; n * spec.adgate_hidden]),
        gate_logit: heads.adgate.then(|| Vec::with_capacity(n)),
    };

    let widest = layout.mlp.iter().map(|l| l.fan_out).max().unwrap_or(0);
    let mut act = vec![0.0; widest.max(k * d)];
    let mut next = vec![0.0; widest];

    for (s, record) in chunk.iter().enumerate() {
        if record.feature_ids.len() != k {
            return Err(Error::Index(format!(
                "record has {} fields, model expects {k}",
                record.feature_ids.len()
            )));
        }
        let mut logit = w[layout.bias];
        for (j, &id) in record.feature_ids.iter().enumerate() {
            if id >= spec.cardinalities[j] {
                return Err(Error::Index(format!(
                    "feature id {id} out of range for field {j} (cardinality {})",
                    spec.cardinalities[j]
                )));
            }
            let f = layout.feature(j, id);
            trace.features.push(f);
            logit += w[layout.first_order.start + f];
        }
        let group = record.group_id as usize;
        if group >= spec.groups {
            return Err(Error::Index(format!(
                "group id {group} out of range ({} groups)",
                spec.groups
            )));
        }
        trace.groups.push(group);

        if uses_embeddings {
            let input = &mut trace.input[s * k * d..(s + 1) * k * d];
            for j in 0..k {
                let e = &w[layout.embedding(trace.features[s * k + j])];
                input[j * d..(j + 1) * d].copy_from_slice(e);
            }
        }

        if spec.backbone != Backbone::Lr {
            let input = &trace.input[s * k * d..(s + 1) * k * d];
            let sum = &mut trace.emb_sum[s * d..(s + 1) * d];
            let mut pairwise = 0.0;
            for t in 0..d {
                let mut total = 0.0;
                let mut squares = 0.0;
                for j in 0..k {
                    let v = input[j * d + t];
                    total += v;
                    squares += v * v;
                }
                sum[t] = total;
                pairwise += total * total - squares;
            }
            logit += 0.5 * pairwise;
        }

        // `act` holds the representation the aux head reads once the loop
        // below finishes: the last hidden layer, or the raw input.
        let mut act_len = 0;
        if uses_embeddings {
            act_len = k * d;
            act[..act_len].copy_from_slice(&trace.input[s * k * d..(s + 1) * k * d]);
        }
        let depth = layout.mlp.len();
        for (l, layer) in layout.mlp.iter().enumerate() {
            let z = &mut trace.mlp_z[l][s * layer.fan_out..(s + 1) * layer.fan_out];
            for o in 0..layer.fan_out {
                let row = &w[layer.w.start + o * layer.fan_in..layer.w.start + (o + 1) * layer.fan_in];
                let mut acc = w[layer.b.start + o];
                for (wi, xi) in row.iter().zip(&act[..layer.fan_in]) {
                    acc += wi * xi;
                }
                z[o] = acc;
            }
            if l + 1 == depth {
                logit += z[0];
            } else {
                for (dst, &zv) in next[..layer.fan_out].iter_mut().zip(z.iter()) {
                    *dst = zv.max(0.0);
                }
                act[..layer.fan_out].copy_from_slice(&next[..layer.fan_out]);
                act_len = layer.fan_out;
            }
        }
        trace.backbone_logit.push(logit);

        if let (Some(aux_out), Some(aux)) = (trace.aux.as_mut(), layout.aux.as_ref()) {
            debug_assert_eq!(act_len, aux.fan_in);
            let mut y = w[aux.b.start];
            for (wi, xi) in w[aux.w.clone()].iter().zip(&act[..aux.fan_in]) {
                y += wi * xi;
            }
            aux_out.push(y);
        }

        if let (Some(gz), Some(gate)) = (trace.gate_z.as_mut(), layout.adgate.as_ref()) {
            let h = spec.adgate_hidden;
            let z = gate_sample(w, gate, group, &mut gz[s * h..(s + 1) * h]);
            trace.gate_logit.as_mut().unwrap().push(z);
        }
    }
    Ok(trace)
}
