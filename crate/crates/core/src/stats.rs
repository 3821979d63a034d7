//! Correlation, percentile bootstrap and the Wilcoxon signed-rank test.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest sample size for which the signed-rank p-value is exact.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub n: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Pearson and Spearman correlation over the ids present in both maps.
pub fn correlate(scores: &BTreeMap<String, f64>, values: &BTreeMap<String, f64>) -> Result<Correlation> {
    let (x, y): (Vec<f64>, Vec<f64>) =
        scores.iter().filter_map(|(id, &s)| values.get(id).map(|&v| (s, v))).unzip();
    correlate_slices(&x, &y)
}

pub fn correlate_slices(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Join(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!("{} paired values, need at least 3", x.len())));
    }
    let degenerate = || Error::Degenerate("one side has zero variance".into());
    Ok(Correlation {
        pearson: pearson(x, y).ok_or_else(degenerate)?,
        spearman: spearman(x, y).ok_or_else(degenerate)?,
        n: x.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    /// Sample mean.
    pub point: f64,
    pub resamples: usize,
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile bootstrap interval of the mean. The interval is widened
/// to include the point estimate when resampling noise would leave it
/// outside.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<BootstrapCi> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!("{} values, need at least 2", values.len())));
    }
    if resamples < 100 {
        return Err(Error::config("bootstrap_resamples", "must be at least 100"));
    }
    let n = values.len();
    let point = mean(values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let low = percentile(&means, 0.025).min(point);
    let high = percentile(&means, 0.975).max(point);
    Ok(BootstrapCi { low, high, point, resamples })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignedRankTest {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test of `a − b` over shared ids.
pub fn paired_test(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<SignedRankTest> {
    let diffs: Vec<f64> = a.iter().filter_map(|(id, &x)| b.get(id).map(|&y| x - y)).collect();
    if diffs.len() < 5 {
        return Err(Error::InsufficientData(format!("{} shared ids, need at least 5", diffs.len())));
    }
    signed_rank(&diffs)
}

/// Signed-rank test on raw differences. Zero differences are dropped;
/// tied magnitudes share their average rank. Exact for up to
/// [`WILCOXON_EXACT_MAX_N`] non-zero differences, otherwise a normal
/// approximation with tie and continuity corrections.
pub fn signed_rank(diffs: &[f64]) -> Result<SignedRankTest> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = nz.len();
    let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX_N {
        let p_value = exact_p(&ranks, w_plus);
        return Ok(SignedRankTest { n, w_plus, p_value, exact: true });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        var -= (t * t * t - t) / 48.0;
    }
    if var <= 0.0 {
        return Err(Error::Degenerate("signed-rank variance is zero".into()));
    }
    let dev = (w_plus - mean).abs();
    let z = (dev - 0.5).max(0.0) / var.sqrt();
    let p_value = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(SignedRankTest { n, w_plus, p_value, exact: false })
}

/// Exact two-sided p-value from the null distribution of W+ with the given
/// (possibly tied) ranks. Ranks are doubled so every sum is an integer.
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let lower: f64 = counts[..=w].iter().sum::<f64>() / total;
    let upper: f64 = counts[w..].iter().sum::<f64>() / total;
    (2.0 * lower.min(upper)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(vals: &[f64]) -> BTreeMap<String, f64> {
        vals.iter().enumerate().map(|(i, &v)| (format!("q{i:03}"), v)).collect()
    }

    #[test]
    fn correlation_examples() {
        let r = [0.1, 0.5, 0.9, 0.3, 0.7];
        let c = correlate(&map(&r), &map(&r)).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-12 && (c.spearman - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = r.iter().map(|v| 1.0 - v).collect();
        let c = correlate(&map(&neg), &map(&r)).unwrap();
        assert!((c.pearson + 1.0).abs() < 1e-12 && (c.spearman + 1.0).abs() < 1e-12);
        // (1,2),(2,1),(3,3): ranks identical to values, Pearson of ranks = 0.5.
        let c = correlate_slices(&[1.0, 2.0, 3.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((c.spearman - 0.5).abs() < 1e-12);
        assert!(matches!(correlate_slices(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::InsufficientData(_))));
        assert!(matches!(correlate_slices(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bootstrap_examples() {
        let c = bootstrap_ci(&[0.4; 10], 1000, 1).unwrap();
        for v in [c.low, c.high, c.point] {
            assert!((v - 0.4).abs() < 1e-15);
        }
        assert!(c.low <= c.point && c.point <= c.high);
        assert_eq!(bootstrap_ci(&[0.1, 0.9, 0.3], 500, 9).unwrap(), bootstrap_ci(&[0.1, 0.9, 0.3], 500, 9).unwrap());
        assert!(bootstrap_ci(&[1.0], 1000, 1).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], 50, 1).is_err());
    }

    #[test]
    fn bootstrap_two_point_sample() {
        // Resample means of {0, 1} are 0, 0.5, 1 with probabilities 1/4, 1/2, 1/4,
        // so the 2.5th and 97.5th percentiles land on 0 and 1.
        let c = bootstrap_ci(&[0.0, 1.0], 1000, 3).unwrap();
        assert_eq!(c.point, 0.5);
        assert!(c.low <= 0.5 && c.high >= 0.5);
        assert_eq!((c.low, c.high), (0.0, 1.0));
    }

    #[test]
    fn wilcoxon_examples() {
        let a = map(&[1.0; 8]);
        assert!(matches!(paired_test(&a, &a), Err(Error::Degenerate(_))));
        assert!(matches!(paired_test(&map(&[1.0; 3]), &map(&[0.0; 3])), Err(Error::InsufficientData(_))));

        let base: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.25).collect();
        let t = paired_test(&map(&shifted), &map(&base)).unwrap();
        assert!(t.exact);
        assert!((t.p_value - 2.0 / 1024.0).abs() < 1e-15);
        assert!(t.p_value < 0.01);

        let sym = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0, 4.0, -4.0];
        let t = signed_rank(&sym).unwrap();
        assert!((t.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let diffs: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let t = signed_rank(&diffs).unwrap();
        assert!(!t.exact);
        assert!(t.p_value < 1e-5);
        let sym: Vec<f64> = (1..=15).flat_map(|i| [i as f64, -(i as f64)]).collect();
        let t = signed_rank(&sym).unwrap();
        assert!(t.p_value > 0.9);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_transform(
            pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..40)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let (Some(s1), Some(s2)) = (spearman(&x, &y), spearman(&x.iter().map(|v| v.exp()).collect::<Vec<_>>(), &y)) {
                prop_assert!((s1 - s2).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&s1));
            }
        }
    }
}
