//! Offline evaluation: AUC, log-loss, per-group statistics, and recovery of
//! the synthetic ground-truth confidence.

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, predict, Heads, ModelParams, EPSILON};
use crate::stats::{average_ranks, spearman};

/// Minimum positives for a confidence-recovery estimate.
pub const MIN_RECOVERY_POSITIVES: usize = 10;

/// Area under the ROC curve via the Mann-Whitney rank statistic. Tied scores
/// share their average rank, so a tie counts as half a correct pair.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Mean negative log-likelihood; probabilities are clamped first.
pub fn logloss(probs: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPSILON, 1.0 - EPSILON);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// Model outputs over a whole corpus.
#[derive(Debug, Clone)]
pub struct Scored {
    /// Backbone probability `p`; this is also the teacher score.
    pub backbone: Vec<f64>,
    /// Gate output `p_local`, when the model has a gate.
    pub p_local: Option<Vec<f64>>,
    /// The click prediction used for evaluation: `clamp(p + p_local)` with a
    /// gate, `p` without.
    pub click: Vec<f64>,
}

pub fn score(params: &ModelParams, corpus: &Corpus, exec: Exec) -> Result<Scored> {
    let batch = corpus.all();
    let trace = forward(
        params,
        &batch,
        Heads {
            adgate: true,
            aux: false,
        },
        exec,
    )?;
    let backbone: Vec<f64> = trace.backbone_logits().iter().map(|&z| predict(z)).collect();
    let p_local: Option<Vec<f64>> = trace.adgate_logits().map(|g| g.iter().map(|&z| predict(z)).collect());
    let click = match &p_local {
        Some(pl) => backbone
            .iter()
            .zip(pl)
            .map(|(p, l)| (p + l).clamp(EPSILON, 1.0 - EPSILON))
            .collect(),
        None => backbone.clone(),
    };
    Ok(Scored {
        backbone,
        p_local,
        click,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub auc: f64,
    pub logloss: f64,
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus, exec: Exec) -> Result<Evaluation> {
    let scored = score(params, corpus, exec)?;
    let labels: Vec<bool> = corpus.records.iter().map(|r| r.label).collect();
    Ok(Evaluation {
        auc: auc(&scored.click, &labels)?,
        logloss: logloss(&scored.click, &labels),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub group_id: usize,
    pub count: usize,
    /// `None` for empty groups.
    pub ctr: Option<f64>,
    /// CTR divided by the largest group CTR.
    pub ctr_normalized: Option<f64>,
    /// Mean backbone (teacher) prediction.
    pub mean_teacher_score: Option<f64>,
    pub mean_p_local: Option<f64>,
    /// Mean of the evaluated click prediction.
    pub mean_click: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub rows: Vec<GroupRow>,
}

impl GroupStats {
    /// `max - min` of the mean teacher score over non-empty groups.
    pub fn teacher_spread(&self) -> f64 {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.mean_teacher_score).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Number of adjacent non-empty groups whose mean teacher score decreases.
    pub fn teacher_inversions(&self) -> usize {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.mean_teacher_score).collect();
        vals.windows(2).filter(|w| w[1] < w[0]).count()
    }

    /// CSV with columns `group_id,count,ctr,ctr_normalized,
    /// mean_teacher_score,mean_p_local`; absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("group_id,count,ctr,ctr_normalized,mean_teacher_score,mean_p_local\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.group_id,
                r.count,
                opt(r.ctr),
                opt(r.ctr_normalized),
                opt(r.mean_teacher_score),
                opt(r.mean_p_local)
            ));
        }
        out
    }
}

/// Per-group CTR and mean predictions, ordered by group id.
pub fn group_stats(corpus: &Corpus, params: &ModelParams, exec: Exec) -> Result<GroupStats> {
    let scored = score(params, corpus, exec)?;
    group_stats_from(corpus, &scored)
}

pub fn group_stats_from(corpus: &Corpus, scored: &Scored) -> Result<GroupStats> {
    let groups = corpus.schema.group_count();
    let mut count = vec![0usize; groups];
    let mut clicks = vec![0usize; groups];
    let mut teacher = vec![0.0; groups];
    let mut local = vec![0.0; groups];
    let mut click = vec![0.0; groups];
    for (s, r) in corpus.records.iter().enumerate() {
        let g = r.group_id as usize;
        count[g] += 1;
        clicks[g] += usize::from(r.label);
        teacher[g] += scored.backbone[s];
        click[g] += scored.click[s];
        if let Some(pl) = &scored.p_local {
            local[g] += pl[s];
        }
    }
    let ctr: Vec<Option<f64>> = (0..groups)
        .map(|g| (count[g] > 0).then(|| clicks[g] as f64 / count[g] as f64))
        .collect();
    let max_ctr = ctr.iter().flatten().copied().fold(0.0, f64::max);
    let rows = (0..groups)
        .map(|g| {
            let n = count[g] as f64;
            let present = count[g] > 0;
            GroupRow {
                group_id: g,
                count: count[g],
                ctr: ctr[g],
                ctr_normalized: ctr[g].filter(|_| max_ctr > 0.0).map(|c| c / max_ctr),
                mean_teacher_score: present.then(|| teacher[g] / n),
                mean_p_local: (present && scored.p_local.is_some()).then(|| local[g] / n),
                mean_click: present.then(|| click[g] / n),
            }
        })
        .collect();
    Ok(GroupStats { rows })
}

/// Spearman correlation between teacher scores and ground-truth confidence
/// over the corpus positives. `positive_scores[i]` belongs to the i-th
/// clicked record in corpus order.
pub fn confidence_recovery(corpus: &Corpus, positive_scores: &[f64]) -> Result<f64> {
    let latents: Vec<f64> = corpus
        .records
        .iter()
        .filter(|r| r.label)
        .map(|r| {
            r.latent_confidence
                .ok_or_else(|| Error::Contract("corpus records carry no latent confidence".into()))
        })
        .collect::<Result<_>>()?;
    if latents.len() != positive_scores.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} positives",
            positive_scores.len(),
            latents.len()
        )));
    }
    if latents.len() < MIN_RECOVERY_POSITIVES {
        return Err(Error::InsufficientData(format!(
            "{} positives, need at least {MIN_RECOVERY_POSITIVES}",
            latents.len()
        )));
    }
    Ok(spearman(positive_scores, &latents))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FieldRole, FieldSchema, SampleRecord, SplitTag};
    use crate::objective::loss_ori;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(P * N) pair count; ties count one half.
    fn auc_brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi && !yj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_matches_pair_count_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..100).map(|_| rng.random::<f64>() < 0.3).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), auc_brute(&scores, &labels));
    }

    fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(-5.0f64..5.0, n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, y)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps((s, y) in scored_labels()) {
            let base = auc(&s, &y).unwrap();
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let affine: Vec<f64> = s.iter().map(|v| 3.0 * v + 7.0).collect();
            prop_assert!((auc(&exp, &y).unwrap() - base).abs() < 1e-12);
            prop_assert!((auc(&affine, &y).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn auc_complement_without_ties((s, y) in scored_labels()) {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&neg, &y).unwrap() - (1.0 - auc(&s, &y).unwrap())).abs() < 1e-12);
        }

        #[test]
        fn logloss_matches_objective((s, y) in scored_labels()) {
            let p: Vec<f64> = s.iter().map(|&z| predict(z)).collect();
            let yf: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let ori = loss_ori(&s, &yf).unwrap().value / s.len() as f64;
            prop_assert!((logloss(&p, &y) - ori).abs() < 1e-12);
        }
    }

    fn corpus_with(latents: &[f64], labels: &[bool]) -> Corpus {
        let schema = FieldSchema::new(
            vec![2, 2, 3],
            vec![FieldRole::UserId, FieldRole::ItemId, FieldRole::UserGroup],
        )
        .unwrap();
        let records = latents
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&c, &y))| SampleRecord {
                feature_ids: vec![0, 1, (i % 2) as u32],
                label: y,
                dwell_time: if y { 1.0 } else { 0.0 },
                group_id: (i % 2) as u32,
                latent_confidence: Some(c),
            })
            .collect();
        Corpus::new(schema, records, SplitTag::Test).unwrap()
    }

    #[test]
    fn recovery_identity_and_errors() {
        let lat: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let c = corpus_with(&lat, &[true; 20]);
        assert!((confidence_recovery(&c, &lat).unwrap() - 1.0).abs() < 1e-12);
        let few = corpus_with(&lat[..9], &[true; 9]);
        assert!(matches!(
            confidence_recovery(&few, &lat[..9]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn recovery_of_random_scores_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let lat: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let c = corpus_with(&lat, &vec![true; n]);
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        assert!(confidence_recovery(&c, &scores).unwrap().abs() < 0.1);
    }

    #[test]
    fn group_stats_counts_and_empty_groups() {
        let lat = [0.5; 6];
        let c = corpus_with(&lat, &[true, false, true, true, false, false]);
        let scored = Scored {
            backbone: vec![0.2; 6],
            p_local: None,
            click: vec![0.2; 6],
        };
        let gs = group_stats_from(&c, &scored).unwrap();
        assert_eq!(gs.rows.len(), 3);
        assert_eq!(gs.rows.iter().map(|r| r.count).sum::<usize>(), 6);
        // group 0: records 0,2,4 -> 2 clicks; group 1: records 1,3,5 -> 1 click
        assert_eq!(gs.rows[0].ctr, Some(2.0 / 3.0));
        assert_eq!(gs.rows[1].ctr_normalized, Some(0.5));
        assert_eq!(gs.rows[2].count, 0);
        assert_eq!(gs.rows[2].ctr, None);
        let csv = gs.to_csv();
        assert!(csv.starts_with("group_id,count,ctr,ctr_normalized,mean_teacher_score,mean_p_local\n"));
        assert!(csv.ends_with("2,0,,,,\n"));
    }
}
