//! Synthetic click corpora with known click confidence.
//!
//! Every user and item gets a hidden factor vector; the sigmoid of their dot
//! product (plus per-user and per-item offsets) is the *affinity*, which is
//! also the record's ground-truth confidence. The click probability is the
//! affinity scaled into a CTR range plus an additive bias that grows with the
//! user's group. Clickbait items receive an extra click boost while their
//! confidence is capped, and clicked records get a dwell time proportional to
//! content length times confidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Corpus, FieldRole, FieldSchema, SampleRecord, SplitTag};
use crate::error::{Error, Result};

const FACTOR_DIM: usize = 8;
/// Confidence ceiling for clicks on clickbait items.
pub const CLICKBAIT_CONFIDENCE_CAP: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub users: u32,
    pub items: u32,
    pub groups: u32,
    /// Number of train records.
    pub records: usize,
    /// Number of test records, generated after the train records.
    pub test_records: usize,
    pub clickbait_rate: f64,
    pub group_ctr_slope: f64,
    pub seed: u64,
    pub categories: u32,
    pub contexts: u32,
    /// Maps affinity to click probability: `p = click_scale * (affinity + bias)`.
    pub click_scale: f64,
    /// Extra click probability on clickbait items.
    pub clickbait_boost: f64,
    /// Standard deviation of the log-normal dwell noise.
    pub dwell_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            groups: 6,
            records: 100_000,
            test_records: 20_000,
            clickbait_rate: 0.2,
            group_ctr_slope: 0.3,
            seed: 42,
            categories: 16,
            contexts: 4,
            click_scale: 0.5,
            clickbait_boost: 0.1,
            dwell_noise: 0.3,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("users", self.users),
            ("items", self.items),
            ("groups", self.groups),
            ("categories", self.categories),
            ("contexts", self.contexts),
        ] {
            if v == 0 {
                return Err(Error::Schema(format!("`{name}` must be positive")));
            }
        }
        if self.records == 0 {
            return Err(Error::Config("`records` must be positive".into()));
        }
        if self.records < self.users as usize {
            return Err(Error::Config(format!(
                "{} records cannot cover {} users",
                self.records, self.users
            )));
        }
        if !(0.0..=1.0).contains(&self.clickbait_rate) {
            return Err(Error::Config("clickbait rate must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("group_ctr_slope", self.group_ctr_slope),
            ("click_scale", self.click_scale),
            ("clickbait_boost", self.clickbait_boost),
            ("dwell_noise", self.dwell_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("`{name}` must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::new(
            vec![self.users, self.items, self.groups, self.categories, self.contexts],
            vec![
                FieldRole::UserId,
                FieldRole::ItemId,
                FieldRole::UserGroup,
                FieldRole::ItemAttr,
                FieldRole::Context,
            ],
        )
    }
}

/// Train and test corpora from one generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub train: Corpus,
    pub test: Corpus,
    /// Which items were drawn as clickbait.
    pub clickbait: Vec<bool>,
    /// True click probability of every test record.
    pub test_click_probability: Vec<f64>,
}

struct World {
    user_factors: Vec<[f64; FACTOR_DIM]>,
    user_bias: Vec<f64>,
    user_group: Vec<u32>,
    item_factors: Vec<[f64; FACTOR_DIM]>,
    item_bias: Vec<f64>,
    item_category: Vec<u32>,
    item_length: Vec<f64>,
    clickbait: Vec<bool>,
    context_lift: Vec<f64>,
}

impl World {
    fn draw(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let factor = Normal::new(0.0, 0.75f64.sqrt()).unwrap();
        let offset = Normal::new(0.0, 0.5).unwrap();
        let vector = |rng: &mut ChaCha8Rng| {
            let mut v = [0.0; FACTOR_DIM];
            for x in &mut v {
                *x = factor.sample(rng);
            }
            v
        };
        let categories: Vec<_> = (0..cfg.categories).map(|_| vector(rng)).collect();

        let mut user_factors = Vec::with_capacity(cfg.users as usize);
        let mut user_bias = Vec::with_capacity(cfg.users as usize);
        let mut user_group = Vec::with_capacity(cfg.users as usize);
        for _ in 0..cfg.users {
            user_factors.push(vector(rng));
            user_bias.push(offset.sample(rng));
            user_group.push(rng.random_range(0..cfg.groups));
        }

        let mut item_factors = Vec::with_capacity(cfg.items as usize);
        let mut item_bias = Vec::with_capacity(cfg.items as usize);
        let mut item_category = Vec::with_capacity(cfg.items as usize);
        let mut item_length = Vec::with_capacity(cfg.items as usize);
        let mut clickbait = Vec::with_capacity(cfg.items as usize);
        for _ in 0..cfg.items {
            let cat = rng.random_range(0..cfg.categories);
            let own = vector(rng);
            let shared = &categories[cat as usize];
            let mut v = [0.0; FACTOR_DIM];
            for d in 0..FACTOR_DIM {
                v[d] = (0.5f64).sqrt() * (shared[d] + own[d]);
            }
            item_factors.push(v);
            item_bias.push(offset.sample(rng));
            item_category.push(cat);
            item_length.push(rng.random_range(60.0..240.0));
            clickbait.push(rng.random::<f64>() < cfg.clickbait_rate);
        }
        let context_lift = (0..cfg.contexts)
            .map(|c| {
                if cfg.contexts == 1 {
                    1.0
                } else {
                    0.85 + 0.3 * c as f64 / (cfg.contexts - 1) as f64
                }
            })
            .collect();
        Self {
            user_factors,
            user_bias,
            user_group,
            item_factors,
            item_bias,
            item_category,
            item_length,
            clickbait,
            context_lift,
        }
    }

    fn affinity(&self, u: usize, i: usize) -> f64 {
        let dot: f64 = self.user_factors[u]
            .iter()
            .zip(&self.item_factors[i])
            .map(|(a, b)| a * b)
            .sum();
        sigmoid(dot + self.user_bias[u] + self.item_bias[i])
    }

    fn record(&self, cfg: &GenConfig, u: usize, rng: &mut ChaCha8Rng) -> (SampleRecord, f64) {
        let i = rng.random_range(0..cfg.items) as usize;
        let ctx = rng.random_range(0..cfg.contexts) as usize;
        let group = self.user_group[u];
        let affinity = self.affinity(u, i);
        let group_level = if cfg.groups > 1 {
            group as f64 / (cfg.groups - 1) as f64
        } else {
            0.0
        };
        let mut p_click = cfg.click_scale * (affinity + cfg.group_ctr_slope * group_level);
        p_click *= self.context_lift[ctx];
        let mut confidence = affinity;
        if self.clickbait[i] {
            p_click += cfg.clickbait_boost;
            confidence = confidence.min(CLICKBAIT_CONFIDENCE_CAP);
        }
        let p_click = p_click.clamp(0.0, 1.0);
        let confidence = round_to(confidence, 1e6);
        let label = rng.random::<f64>() < p_click;
        let dwell_time = if label {
            let noise = Normal::new(0.0, cfg.dwell_noise).unwrap().sample(rng).exp();
            round_to(self.item_length[i] * confidence * noise, 1e3)
        } else {
            0.0
        };
        let record = SampleRecord {
            feature_ids: vec![u as u32, i as u32, group, self.item_category[i], ctx as u32],
            label,
            dwell_time,
            group_id: group,
            latent_confidence: Some(confidence),
        };
        (record, p_click)
    }
}

/// Generates a train corpus followed in time by a test corpus.
///
/// The first `users` train records visit every user once, so each user has
/// at least one training impression.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let schema = cfg.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = World::draw(cfg, &mut rng);

    rng.set_stream(1);
    let train = (0..cfg.records)
        .map(|n| {
            let u = if n < cfg.users as usize {
                n
            } else {
                rng.random_range(0..cfg.users) as usize
            };
            world.record(cfg, u, &mut rng).0
        })
        .collect();
    rng.set_stream(2);
    let (test, test_click_probability) = (0..cfg.test_records)
        .map(|_| {
            let u = rng.random_range(0..cfg.users) as usize;
            world.record(cfg, u, &mut rng)
        })
        .unzip();

    Ok(Generated {
        train: Corpus {
            schema: schema.clone(),
            records: train,
            split: SplitTag::Train,
        },
        test: Corpus {
            schema,
            records: test,
            split: SplitTag::Test,
        },
        clickbait: world.clickbait,
        test_click_probability,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rounds to the decimal grid `1/scale` so the text format reproduces the
/// value exactly.
fn round_to(x: f64, scale: f64) -> f64 {
    (x * scale).round() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_to;
    use crate::stats::spearman;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            users: 200,
            items: 100,
            records: 5_000,
            test_records: 1_000,
            seed,
            ..GenConfig::default()
        }
    }

    fn bytes(c: &Corpus) -> Vec<u8> {
        let mut b = Vec::new();
        write_to(c, &mut b).unwrap();
        b
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate(&small(7)).unwrap();
        let b = generate(&small(7)).unwrap();
        assert_eq!(bytes(&a.train), bytes(&b.train));
        assert_eq!(bytes(&a.test), bytes(&b.test));
        let c = generate(&small(8)).unwrap();
        assert_ne!(bytes(&a.train), bytes(&c.train));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small(1);
        cfg.records = 100;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = small(1);
        cfg.items = 0;
        assert!(matches!(generate(&cfg), Err(Error::Schema(_))));
        let mut cfg = small(1);
        cfg.clickbait_rate = 1.5;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn records_conform_and_cover_users() {
        let cfg = small(3);
        let g = generate(&cfg).unwrap();
        let mut seen = vec![false; cfg.users as usize];
        for r in &g.train.records {
            g.train.schema.check(r).unwrap();
            assert_eq!(r.group_id, r.feature_ids[2]);
            assert!(r.latent_confidence.is_some());
            seen[r.feature_ids[0] as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn clickbait_clicks_have_capped_confidence() {
        let g = generate(&small(4)).unwrap();
        for r in &g.train.records {
            if g.clickbait[r.feature_ids[1] as usize] {
                assert!(r.latent_confidence.unwrap() <= CLICKBAIT_CONFIDENCE_CAP);
            }
        }
    }

    #[test]
    fn no_clickbait_means_higher_positive_confidence() {
        let mean_pos_conf = |rate: f64| {
            let cfg = GenConfig {
                clickbait_rate: rate,
                ..small(11)
            };
            let g = generate(&cfg).unwrap();
            let pos: Vec<f64> = g
                .train
                .records
                .iter()
                .filter(|r| r.label)
                .map(|r| r.latent_confidence.unwrap())
                .collect();
            assert!(g.clickbait.iter().all(|&b| !b) || rate > 0.0);
            pos.iter().sum::<f64>() / pos.len() as f64
        };
        assert!(mean_pos_conf(0.0) > mean_pos_conf(0.5));
    }

    #[test]
    fn zero_slope_gives_flat_group_ctr() {
        let cfg = GenConfig {
            users: 50_000,
            items: 500,
            records: 100_000,
            group_ctr_slope: 0.0,
            ..GenConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let groups = cfg.groups as usize;
        let mut n = vec![0f64; groups];
        let mut k = vec![0f64; groups];
        for r in &g.train.records {
            n[r.group_id as usize] += 1.0;
            k[r.group_id as usize] += r.label_f64();
        }
        let total: f64 = k.iter().sum::<f64>() / n.iter().sum::<f64>();
        // Two impressions per user keeps per-user clustering negligible.
        for g in 0..groups {
            let ctr = k[g] / n[g];
            let sigma = (total * (1.0 - total) / n[g]).sqrt();
            assert!((ctr - total).abs() < 3.0 * sigma, "group {g}: ctr {ctr} vs {total}");
        }
    }

    #[test]
    fn dwell_tracks_confidence() {
        let g = generate(&small(5)).unwrap();
        let (conf, dwell): (Vec<f64>, Vec<f64>) = g
            .train
            .records
            .iter()
            .filter(|r| r.label)
            .map(|r| (r.latent_confidence.unwrap(), r.dwell_time))
            .unzip();
        assert!(spearman(&conf, &dwell) > 0.5);
        assert!(g.train.records.iter().all(|r| r.label || r.dwell_time == 0.0));
    }
}
