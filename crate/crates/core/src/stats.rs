//! Small statistics helpers shared by the metrics and the grid runner.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Two-sided paired t-test on `a - b`. Returns `(t, p)`; `None` for fewer
/// than two pairs. Identical samples give `p = 1`; a constant nonzero
/// difference gives `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Option<(f64, f64)> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&diffs);
    let sd = std_dev(&diffs);
    let n = diffs.len() as f64;
    if sd == 0.0 {
        return Some(if m == 0.0 {
            (0.0, 1.0)
        } else {
            (m.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = m / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).ok()?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Some((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.7];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert_relative_eq!(spearman(&x, &y), 1.0);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(spearman(&x, &z), -1.0);
    }

    #[test]
    fn paired_t_matches_reference() {
        // scipy.stats.ttest_rel([1,2,3,4,5],[1.1,2.3,2.9,4.5,5.2])
        // -> t = -2.0, p = 0.1161165235168155
        let (t, p) = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.1, 2.3, 2.9, 4.5, 5.2]).unwrap();
        assert_relative_eq!(t, -2.0, max_relative = 1e-9);
        assert_relative_eq!(p, 0.1161165235168155, max_relative = 1e-6);
    }
}
