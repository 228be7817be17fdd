//! CTR backbones (LR, FM, DeepFM-lite), the adaptive gate, and an optional
//! dwell-time head, all stored in one flat parameter vector.
//!
//! Layout of the flat vector, in order:
//!
//! * `embeddings` – one `dim`-vector per feature,
//! * `first_order` – one weight per feature,
//! * `bias`,
//! * `mlp.{l}.w` / `mlp.{l}.b` – DeepFM only, weights row-major `out x in`,
//! * optional heads appended on demand: `aux.*` (dwell-time regression) and
//!   `adgate.*` (group gate), in the order they were enabled.
//!
//! The embedding and first-order blocks form the *sparse* prefix: a sample
//! touches only the rows of its own features.

pub(crate) mod backward;
pub(crate) mod checkpoint;
mod forward;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::FieldSchema;
use crate::error::{Error, Result};

pub use backward::{backward, backward_into, Component, Gradient, Upstream};
pub use checkpoint::{parse_params, write_params, CHECKPOINT_HEADER};
pub use forward::{adgate_forward, forward, AdGateTrace, ForwardTrace, Heads};

/// Lower/upper clamp applied to every predicted probability.
pub const EPSILON: f64 = 1e-7;

const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Lr,
    Fm,
    DeepFm,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Lr, Backbone::Fm, Backbone::DeepFm];

    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Lr => "lr",
            Backbone::Fm => "fm",
            Backbone::DeepFm => "deepfm",
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Backbone::Lr),
            "fm" => Ok(Backbone::Fm),
            "deepfm" => Ok(Backbone::DeepFm),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Architecture of a model: everything needed to size the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub backbone: Backbone,
    pub cardinalities: Vec<u32>,
    pub groups: usize,
    pub dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub adgate_hidden: usize,
}

impl ModelSpec {
    /// Default sizes: 8-dimensional embeddings, a `[32, 16]` MLP, and a gate
    /// with one hidden layer of width 8.
    pub fn new(backbone: Backbone, schema: &FieldSchema) -> Self {
        Self {
            backbone,
            cardinalities: schema.cardinalities().to_vec(),
            groups: schema.group_count(),
            dim: 8,
            mlp_hidden: vec![32, 16],
            adgate_hidden: 8,
        }
    }

    pub fn fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn total_features(&self) -> usize {
        self.cardinalities.iter().map(|&c| c as usize).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.cardinalities.is_empty() || self.cardinalities.contains(&0) {
            return Err(Error::Config("cardinalities must be non-empty and positive".into()));
        }
        if self.dim == 0 || self.groups == 0 || self.adgate_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("MLP layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// A dense layer's position in the flat vector. Weights are row-major
/// `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    fn new(start: usize, fan_in: usize, fan_out: usize) -> Self {
        let w = start..start + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        Self { w, b, fan_in, fan_out }
    }

    pub fn end(&self) -> usize {
        self.b.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub spec: ModelSpec,
    offsets: Vec<usize>,
    pub embeddings: Range<usize>,
    pub first_order: Range<usize>,
    pub bias: usize,
    pub mlp: Vec<Dense>,
    /// Dwell-time regression head; input is the last MLP hidden layer for
    /// DeepFM, the concatenated field embeddings otherwise.
    pub aux: Option<Dense>,
    /// Gate layers: one-hot group -> hidden (ReLU) -> scalar logit.
    pub adgate: Option<[Dense; 2]>,
    len: usize,
}

impl Layout {
    fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.total_features();
        let mut offsets = Vec::with_capacity(spec.fields());
        let mut acc = 0;
        for &c in &spec.cardinalities {
            offsets.push(acc);
            acc += c as usize;
        }
        let embeddings = 0..n * spec.dim;
        let first_order = embeddings.end..embeddings.end + n;
        let bias = first_order.end;
        let mut end = bias + 1;
        let mut mlp = Vec::new();
        if spec.backbone == Backbone::DeepFm {
            let mut fan_in = spec.fields() * spec.dim;
            for &width in spec.mlp_hidden.iter().chain(std::iter::once(&1)) {
                let layer = Dense::new(end, fan_in, width);
                end = layer.end();
                fan_in = width;
                mlp.push(layer);
            }
        }
        Ok(Self {
            spec,
            offsets,
            embeddings,
            first_order,
            bias,
            mlp,
            aux: None,
            adgate: None,
            len: end,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn backbone(&self) -> Backbone {
        self.spec.backbone
    }

    /// End of the per-feature (sparse) prefix.
    pub fn sparse_end(&self) -> usize {
        self.first_order.end
    }

    /// Global feature index of `id` in `field`.
    pub fn feature(&self, field: usize, id: u32) -> usize {
        self.offsets[field] + id as usize
    }

    pub fn embedding(&self, feature: usize) -> Range<usize> {
        let start = self.embeddings.start + feature * self.spec.dim;
        start..start + self.spec.dim
    }

    /// Width of the representation the dwell-time head reads.
    pub fn aux_input_width(&self) -> usize {
        match self.mlp.len() {
            0 | 1 => self.spec.fields() * self.spec.dim,
            k => self.mlp[k - 2].fan_out,
        }
    }

    fn push_aux(&mut self) -> Dense {
        let layer = Dense::new(self.len, self.aux_input_width(), 1);
        self.len = layer.end();
        self.aux = Some(layer.clone());
        layer
    }

    fn push_adgate(&mut self) -> [Dense; 2] {
        let hidden = Dense::new(self.len, self.spec.groups, self.spec.adgate_hidden);
        let out = Dense::new(hidden.end(), self.spec.adgate_hidden, 1);
        self.len = out.end();
        let layers = [hidden, out];
        self.adgate = Some(layers.clone());
        layers
    }

    /// Named sections in flat order, as written to checkpoints.
    pub fn sections(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("embeddings".to_string(), self.embeddings.clone()),
            ("first_order".to_string(), self.first_order.clone()),
            ("bias".to_string(), self.bias..self.bias + 1),
        ];
        for (l, layer) in self.mlp.iter().enumerate() {
            out.push((format!("mlp.{l}.w"), layer.w.clone()));
            out.push((format!("mlp.{l}.b"), layer.b.clone()));
        }
        let mut extra: Vec<(String, Range<usize>)> = Vec::new();
        if let Some(aux) = &self.aux {
            extra.push(("aux.w".into(), aux.w.clone()));
            extra.push(("aux.b".into(), aux.b.clone()));
        }
        if let Some(gate) = &self.adgate {
            for (l, layer) in gate.iter().enumerate() {
                extra.push((format!("adgate.{l}.w"), layer.w.clone()));
                extra.push((format!("adgate.{l}.b"), layer.b.clone()));
            }
        }
        extra.sort_by_key(|(_, r)| r.start);
        out.extend(extra);
        out
    }

    /// Flat range of the gate parameters, if the gate is enabled.
    pub fn adgate_range(&self) -> Option<Range<usize>> {
        self.adgate.as_ref().map(|g| g[0].w.start..g[1].end())
    }

    pub fn aux_range(&self) -> Option<Range<usize>> {
        self.aux.as_ref().map(|a| a.w.start..a.end())
    }
}

/// All trainable parameters, flat-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let values = vec![0.0; layout.len()];
        Ok(Self { layout, values })
    }

    /// Uniform `[-0.01, 0.01]` initialization from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut params.values {
            *v = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
        Ok(params)
    }

    pub(crate) fn from_parts(layout: Layout, values: Vec<f64>) -> Self {
        debug_assert_eq!(layout.len(), values.len());
        Self { layout, values }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.layout.spec
    }

    pub fn backbone(&self) -> Backbone {
        self.layout.backbone()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn has_adgate(&self) -> bool {
        self.layout.adgate.is_some()
    }

    pub fn has_aux(&self) -> bool {
        self.layout.aux.is_some()
    }

    /// Appends gate parameters drawn like [`ModelParams::init`], so `p_local`
    /// starts near 0.5. No-op if the gate already exists.
    pub fn enable_adgate(&mut self, seed: u64) {
        if self.has_adgate() {
            return;
        }
        let [hidden, out] = self.layout.push_adgate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.values.resize(self.layout.len(), 0.0);
        for i in hidden.w.start..out.b.end {
            self.values[i] = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
    }

    /// Appends zero-initialized gate parameters (p_local = 0.5 everywhere).
    pub fn enable_adgate_zeroed(&mut self) {
        if !self.has_adgate() {
            self.layout.push_adgate();
            self.values.resize(self.layout.len(), 0.0);
        }
    }

    /// Appends the dwell-time head. No-op if it already exists.
    pub fn enable_aux(&mut self, seed: u64) {
        if self.has_aux() {
            return;
        }
        let layer = self.layout.push_aux();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        self.values.resize(self.layout.len(), 0.0);
        for i in layer.w.clone() {
            self.values[i] = rng.random_range(-INIT_SCALE..=INIT_SCALE);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the bit patterns; used to compare parameter snapshots.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// `sigmoid(logit)` clamped to `[EPSILON, 1 - EPSILON]`.
pub fn predict(logit: f64) -> f64 {
    sigmoid(logit).clamp(EPSILON, 1.0 - EPSILON)
}

/// Clamped probability and its derivative with respect to the logit; the
/// derivative is zero where the clamp is active.
pub fn predict_with_slope(logit: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    if s <= EPSILON {
        (EPSILON, 0.0)
    } else if s >= 1.0 - EPSILON {
        (1.0 - EPSILON, 0.0)
    } else {
        (s, s * (1.0 - s))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
