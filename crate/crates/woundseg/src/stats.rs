//! Paired nonparametric comparison of two models' per-image scores.
//!
//! Two-sided Wilcoxon signed-rank test: zero differences are dropped,
//! absolute differences are ranked with average ranks under ties, and
//! the statistic is the smaller signed-rank sum. The p-value is exact
//! (full enumeration of sign assignments) up to 20 effective pairs and
//! a tie- and continuity-corrected normal approximation beyond.

use crate::{Error, Result};

/// Outcome of a paired two-sided test.
#[derive(Clone, Debug)]
pub struct PairedTestResult {
    /// Smaller of the positive- and negative-rank sums.
    pub statistic_w: f64,
    pub p_value: f64,
    /// `|Z| / sqrt(n_pairs)`, with `Z` from the normal approximation
    /// regardless of which p-value branch applied.
    pub effect_size_r: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_pairs: usize,
}

/// Largest pair count for which the p-value enumerates all `2^m` sign
/// assignments exactly.
pub const EXACT_ENUMERATION_LIMIT: usize = 20;

/// Ranks `values` ascending, assigning tied entries the mean of the
/// positions they occupy (1-based).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Exact tail probability `P(T <= w)` where `T` is the positive-rank
/// sum under random signs. Ranks arrive doubled so ties' half-ranks
/// become integers; counting is a subset-sum table over them.
fn exact_tail(scaled_ranks: &[u64], w_scaled: u64) -> f64 {
    let total: u64 = scaled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in scaled_ranks {
        for s in (r..=total).rev() {
            counts[s as usize] += counts[(s - r) as usize];
        }
    }
    let hits: u64 = counts[..=(w_scaled.min(total)) as usize].iter().sum();
    hits as f64 / (1u64 << scaled_ranks.len()) as f64
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Two-sided Wilcoxon signed-rank test between paired score lists.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(Error::argument(
            "wilcoxon",
            format!("length mismatch: {} vs {}", a.len(), b.len()),
        ));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::argument("wilcoxon", "non-finite difference"));
    }
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("every paired difference is zero".into()));
    }
    let m = diffs.len();
    if m < 5 {
        return Err(Error::argument(
            "wilcoxon",
            format!("only {m} nonzero differences; need at least 5"),
        ));
    }

    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_pos: f64 =
        ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w_neg: f64 =
        ranks.iter().zip(&diffs).filter(|(_, d)| **d < 0.0).map(|(r, _)| r).sum();
    let w = w_pos.min(w_neg);

    // Tie-corrected variance: group sizes t over equal |d| values.
    let mut tie_term = 0.0;
    {
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let mf = m as f64;
    let mean = mf * (mf + 1.0) / 4.0;
    let var = mf * (mf + 1.0) * (2.0 * mf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w - mean + 0.5) / var.sqrt();
    let effect_size_r = (z.abs() / mf.sqrt()).min(1.0);

    let p_value = if m <= EXACT_ENUMERATION_LIMIT {
        // Average ranks are multiples of 1/2, so doubling makes every
        // rank integral and the subset-sum exact.
        let scaled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
        let w_scaled = (w * 2.0).round() as u64;
        (2.0 * exact_tail(&scaled, w_scaled)).min(1.0)
    } else {
        (2.0 * phi(z)).min(1.0)
    };

    Ok(PairedTestResult { statistic_w: w, p_value, effect_size_r, n_pairs: m })
}
