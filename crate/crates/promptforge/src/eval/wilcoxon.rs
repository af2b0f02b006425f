//! Wilcoxon signed-rank test for paired scores.
//!
//! Zero differences are discarded and ties share average ranks. The
//! two-sided p-value is exact (subset-sum counting over sign patterns) for
//! n ≤ 25 and a normal approximation with tie correction and continuity
//! correction above that.

use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// W = min(W+, W−), the smaller of the signed rank sums.
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Pairs remaining after discarding zero differences.
    pub n: usize,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum WilcoxonError {
    #[error("paired inputs have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("only {n} nonzero differences; need at least 5")]
    TooFewPairs { n: usize },
}

/// Ranks scaled by 2 (so average ranks stay integral) and the rank sum of
/// the positive differences, likewise scaled.
struct Prepared {
    ranks2: Vec<u64>,
    w2_plus: u64,
    /// Sizes of tie groups, for the variance correction.
    tie_sizes: Vec<usize>,
}

fn prepare(a: &[f64], b: &[f64]) -> Result<Prepared, WilcoxonError> {
    if a.len() != b.len() {
        return Err(WilcoxonError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(WilcoxonError::TooFewPairs { n });
    }
    // Sort indices by |d| to assign ranks; ties share the average rank.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        diffs[i]
            .abs()
            .partial_cmp(&diffs[j].abs())
            .expect("scores are finite")
    });
    let mut ranks2 = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..j (0-based) share ranks i+1..=j, average (i+j+1)/2.
        let avg2 = (i + j + 1) as u64; // 2 * average rank
        for &idx in &order[i..j] {
            ranks2[idx] = avg2;
        }
        if j - i > 1 {
            tie_sizes.push(j - i);
        }
        i = j;
    }
    let w2_plus: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    diffs.clear();
    Ok(Prepared {
        ranks2,
        w2_plus,
        tie_sizes,
    })
}

/// Exact two-sided p: the fraction of the 2^n sign patterns whose
/// min(rank-sum, total − rank-sum) is at most the observed statistic.
/// Computed by subset-sum counting, so it is practical well past n = 25.
fn exact_p(ranks2: &[u64], w2_obs: u64) -> f64 {
    let total2: u64 = ranks2.iter().sum();
    // counts[s] = number of subsets of ranks2 with doubled-sum s.
    let mut counts = vec![0.0f64; total2 as usize + 1];
    counts[0] = 1.0;
    for &r in ranks2 {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    let favorable: f64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| {
            let s = *s as u64;
            s.min(total2 - s) <= w2_obs
        })
        .map(|(_, c)| *c)
        .sum();
    favorable / 2f64.powi(ranks2.len() as i32)
}

/// Normal approximation with tie correction and continuity correction.
fn normal_p(n: usize, w: f64, tie_sizes: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    for &t in tie_sizes {
        let t = t as f64;
        var -= (t * t * t - t) / 48.0;
    }
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * normal.cdf(z)).clamp(0.0, 1.0)
}

/// Two-sided Wilcoxon signed-rank test on paired scores.
pub fn wilcoxon_signed_rank(
    paired_a: &[f64],
    paired_b: &[f64],
) -> Result<WilcoxonResult, WilcoxonError> {
    let prepared = prepare(paired_a, paired_b)?;
    let n = prepared.ranks2.len();
    let total2: u64 = prepared.ranks2.iter().sum();
    let w2 = prepared.w2_plus.min(total2 - prepared.w2_plus);
    let statistic = w2 as f64 / 2.0;
    let p_two_sided = if n <= 25 {
        exact_p(&prepared.ranks2, w2)
    } else {
        normal_p(n, statistic, &prepared.tie_sizes)
    };
    Ok(WilcoxonResult {
        statistic,
        p_two_sided,
        n,
    })
}

/// Exact p-value regardless of n (for validating the approximation).
pub fn wilcoxon_exact_p(paired_a: &[f64], paired_b: &[f64]) -> Result<f64, WilcoxonError> {
    let prepared = prepare(paired_a, paired_b)?;
    let total2: u64 = prepared.ranks2.iter().sum();
    let w2 = prepared.w2_plus.min(total2 - prepared.w2_plus);
    Ok(exact_p(&prepared.ranks2, w2))
}

/// Normal-approximation p-value regardless of n.
pub fn wilcoxon_normal_p(paired_a: &[f64], paired_b: &[f64]) -> Result<f64, WilcoxonError> {
    let prepared = prepare(paired_a, paired_b)?;
    let n = prepared.ranks2.len();
    let total2: u64 = prepared.ranks2.iter().sum();
    let w2 = prepared.w2_plus.min(total2 - prepared.w2_plus);
    Ok(normal_p(n, w2 as f64 / 2.0, &prepared.tie_sizes))
}
