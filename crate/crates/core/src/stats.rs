//! Hypothesis tests and small descriptive helpers.
//!
//! All tests are two-sided.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the Wilcoxon null
/// distribution is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    WelchT,
    WilcoxonExact,
    WilcoxonNormal,
    /// No variability in the input; p is fixed by convention.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Sample sizes; a single entry for paired tests (nonzero differences).
    pub n: Vec<usize>,
    pub method: TestMethod,
    /// Degrees of freedom for t-tests.
    pub df: Option<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean; zero for fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation of two slices. Returns `(0, true)` when either side
/// has zero variance.
pub fn pearson_r(x: &[f64], y: &[f64]) -> (f64, bool) {
    debug_assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (a, b) = (a - mx, b - my);
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    if sxx <= f64::MIN_POSITIVE || syy <= f64::MIN_POSITIVE {
        return (0.0, true);
    }
    ((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false)
}

/// Two-sample t-test with unequal variances (Welch–Satterthwaite df).
///
/// When both samples have zero variance the result is degenerate: p = 1 if
/// the means are equal and p = 0 otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract(format!(
            "welch t-test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (sa, sb) = (variance(a) / na, variance(b) / nb);
    let n = vec![a.len(), b.len()];
    let se2 = sa + sb;
    if se2 <= 0.0 {
        let equal = ma == mb;
        return Ok(TestResult {
            statistic: if equal { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            p_value: if equal { 1.0 } else { 0.0 },
            n,
            method: TestMethod::Degenerate,
            df: None,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestResult {
        statistic: t,
        p_value: students_t_two_sided(t, df),
        n,
        method: TestMethod::WelchT,
        df: Some(df),
    })
}

fn students_t_two_sided(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Average ranks of `values` (1-based), doubled so ties stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled: (i+1 + j+1).
        let doubled = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            ranks[k] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Exact null distribution of the doubled positive-rank sum: entry `s` is
/// `P(2 W+ = s)` when each rank's sign is an independent fair coin.
pub fn signed_rank_null_distribution(doubled_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let scale = 0.5f64.powi(doubled_ranks.len() as i32);
    counts.iter_mut().for_each(|c| *c *= scale);
    counts
}

/// Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped. With at most [`WILCOXON_EXACT_MAX_N`]
/// remaining the p-value comes from the exact permutation distribution
/// (ties handled through average ranks); above that a normal approximation
/// with continuity and tie corrections is used. The statistic is `W+`, the
/// sum of ranks of positive differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::contract("wilcoxon: non-finite difference"));
    }
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            n: vec![0],
            method: TestMethod::Degenerate,
            df: None,
        });
    }
    if n < 5 {
        return Err(Error::contract(format!(
            "wilcoxon: need at least 5 nonzero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w2: u64 = ranks
        .iter()
        .zip(&nonzero)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| *r)
        .sum();
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX_N {
        let dist = signed_rank_null_distribution(&ranks);
        let lower: f64 = dist[..=w2 as usize].iter().sum();
        let upper: f64 = dist[w2 as usize..].iter().sum();
        return Ok(TestResult {
            statistic,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            n: vec![n],
            method: TestMethod::WilcoxonExact,
            df: None,
        });
    }

    let nf = n as f64;
    let expected = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - expected).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(TestResult {
        statistic,
        p_value: erfc(z / std::f64::consts::SQRT_2).min(1.0),
        n: vec![n],
        method: TestMethod::WilcoxonNormal,
        df: None,
    })
}

/// Holm–Bonferroni step-down procedure. Flags are returned in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut reject = vec![false; m];
    for (rank, &idx) in order.iter().enumerate() {
        if p_values[idx] <= alpha / (m - rank) as f64 {
            reject[idx] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}

/// One-sided binomial upper tail `P(X >= k)` for `X ~ Bin(n, p)`.
pub fn binomial_upper_tail(k: usize, n: usize, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    // Sum the pmf in log space; n stays in the low thousands here.
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    let ln_fact = |m: usize| statrs::function::factorial::ln_factorial(m as u64);
    (k..=n)
        .map(|i| (ln_fact(n) - ln_fact(i) - ln_fact(n - i) + i as f64 * ln_p + (n - i) as f64 * ln_q).exp())
        .sum::<f64>()
        .min(1.0)
}
