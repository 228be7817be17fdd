//! Multi-field click corpora: schema, records, batching, and the text file
//! format. Synthetic corpora come from [`generate`].

mod format;
mod gen;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use format::{read, read_from, write, write_to, HEADER};
pub use gen::{generate, GenConfig, Generated};

/// Default mini-batch size.
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldRole {
    UserId,
    ItemId,
    UserGroup,
    ItemAttr,
    Context,
}

impl FieldRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldRole::UserId => "user_id",
            FieldRole::ItemId => "item_id",
            FieldRole::UserGroup => "user_group",
            FieldRole::ItemAttr => "item_attr",
            FieldRole::Context => "context",
        }
    }
}

impl fmt::Display for FieldRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "user_id" => FieldRole::UserId,
            "item_id" => FieldRole::ItemId,
            "user_group" => FieldRole::UserGroup,
            "item_attr" => FieldRole::ItemAttr,
            "context" => FieldRole::Context,
            other => return Err(Error::Schema(format!("unknown field role `{other}`"))),
        })
    }
}

/// Layout of the categorical input: one cardinality and one role per field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    cardinalities: Vec<u32>,
    roles: Vec<FieldRole>,
    offsets: Vec<usize>,
}

impl FieldSchema {
    pub fn new(cardinalities: Vec<u32>, roles: Vec<FieldRole>) -> Result<Self> {
        if cardinalities.is_empty() {
            return Err(Error::Schema("schema needs at least one field".into()));
        }
        if cardinalities.len() != roles.len() {
            return Err(Error::Schema(format!(
                "{} cardinalities but {} roles",
                cardinalities.len(),
                roles.len()
            )));
        }
        if let Some(pos) = cardinalities.iter().position(|&c| c == 0) {
            return Err(Error::Schema(format!("field {pos} has zero cardinality")));
        }
        let count = |r: FieldRole| roles.iter().filter(|&&x| x == r).count();
        if count(FieldRole::UserId) != 1 || count(FieldRole::ItemId) != 1 {
            return Err(Error::Schema(
                "exactly one user_id and one item_id field required".into(),
            ));
        }
        if count(FieldRole::UserGroup) == 0 {
            return Err(Error::Schema("at least one user_group field required".into()));
        }
        let mut offsets = Vec::with_capacity(cardinalities.len());
        let mut acc = 0usize;
        for &c in &cardinalities {
            offsets.push(acc);
            acc += c as usize;
        }
        Ok(Self {
            cardinalities,
            roles,
            offsets,
        })
    }

    pub fn field_count(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn cardinalities(&self) -> &[u32] {
        &self.cardinalities
    }

    pub fn roles(&self) -> &[FieldRole] {
        &self.roles
    }

    /// Total number of distinct features across all fields.
    pub fn total_features(&self) -> usize {
        self.cardinalities.iter().map(|&c| c as usize).sum()
    }

    /// Position of a field's first feature in the global feature index.
    pub fn offset(&self, field: usize) -> usize {
        self.offsets[field]
    }

    /// Cardinality of the first `user_group` field; this is the group count.
    pub fn group_count(&self) -> usize {
        let pos = self
            .roles
            .iter()
            .position(|&r| r == FieldRole::UserGroup)
            .expect("validated schema has a user_group field");
        self.cardinalities[pos] as usize
    }

    pub fn check(&self, record: &SampleRecord) -> Result<()> {
        if record.feature_ids.len() != self.field_count() {
            return Err(Error::Schema(format!(
                "record has {} features, schema has {} fields",
                record.feature_ids.len(),
                self.field_count()
            )));
        }
        for (j, (&id, &card)) in record.feature_ids.iter().zip(&self.cardinalities).enumerate() {
            if id >= card {
                return Err(Error::Schema(format!(
                    "feature id {id} out of range for field {j} (cardinality {card})"
                )));
            }
        }
        if record.group_id as usize >= self.group_count() {
            return Err(Error::Schema(format!(
                "group id {} out of range ({} groups)",
                record.group_id,
                self.group_count()
            )));
        }
        if !(record.dwell_time >= 0.0 && record.dwell_time.is_finite()) {
            return Err(Error::Schema(format!("bad dwell time {}", record.dwell_time)));
        }
        if !record.label && record.dwell_time != 0.0 {
            return Err(Error::Schema("unclicked record with nonzero dwell time".into()));
        }
        if let Some(c) = record.latent_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Schema(format!("latent confidence {c} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// One user-item impression.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// One categorical index per field.
    pub feature_ids: Vec<u32>,
    pub label: bool,
    /// Seconds; zero for unclicked records.
    pub dwell_time: f64,
    /// The prior user feature fed to the adaptive gate (an age bucket).
    pub group_id: u32,
    /// Ground-truth interest behind the impression. Only synthetic corpora
    /// carry it.
    pub latent_confidence: Option<f64>,
}

impl SampleRecord {
    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: FieldSchema,
    pub records: Vec<SampleRecord>,
    pub split: SplitTag,
}

impl Corpus {
    pub fn new(schema: FieldSchema, records: Vec<SampleRecord>, split: SplitTag) -> Result<Self> {
        for r in &records {
            schema.check(r)?;
        }
        Ok(Self { schema, records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn all(&self) -> Vec<&SampleRecord> {
        self.records.iter().collect()
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label).count()
    }

    /// Shuffled mini-batches for one epoch. The order is a deterministic
    /// function of `(shuffle_seed, epoch)`.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be positive");
        Batches {
            corpus: self,
            order: epoch_order(self.len(), shuffle_seed, epoch),
            batch_size,
            pos: 0,
        }
    }
}

pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct Batches<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.corpus.records[i])
            .collect();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}
