//! Two-sample Kolmogorov-Smirnov machinery.
//!
//! A [`Sample`] is a sorted list of finite values. The statistic is the
//! largest gap between the two right-continuous empirical CDFs, found by a
//! single merge walk over the sorted samples. Critical values use the
//! closed form `c(alpha) = sqrt(ln(2/alpha) / 2)` scaled by
//! `sqrt((n + m) / (n m))`; p-values come from the Kolmogorov limiting
//! distribution, with an optional Stephens small-sample correction and a
//! seeded permutation estimate as an independent cross-check.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Terms of the Kolmogorov series below this magnitude are dropped.
const SERIES_EPS: f64 = 1e-12;
const SERIES_MAX_TERMS: usize = 100;
const BISECTION_TOL: f64 = 1e-9;
const BISECTION_MAX_ITERS: usize = 200;

/// Slack used when counting permutation splits at least as extreme as the
/// observed statistic. Equal rationals reached through different counts can
/// differ in the last bit.
const PERMUTATION_TIE_EPS: f64 = 1e-12;

/// A non-empty sample of finite values, kept sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    values: Vec<f64>,
}

impl Sample {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "sample".into(),
                value: bad,
            });
        }
        values.sort_by(f64::total_cmp);
        Ok(Sample { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Right-continuous empirical CDF: the fraction of values `<= x`.
    pub fn ecdf(&self, x: f64) -> f64 {
        let at_or_below = self.values.partition_point(|&v| v <= x);
        at_or_below as f64 / self.values.len() as f64
    }
}

/// Outcome of a two-sample test at a given significance level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub alpha: f64,
    pub reject: bool,
}

/// Empirical CDF of `sample` at `x`. Errors on non-finite `x`.
pub fn empirical_cdf_at(sample: &Sample, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "evaluation point".into(),
            value: x,
        });
    }
    Ok(sample.ecdf(x))
}

/// `sup_x |F_a(x) - F_b(x)|` over both empirical CDFs.
pub fn ks_statistic(a: &Sample, b: &Sample) -> f64 {
    statistic_sorted(a.values(), b.values())
}

/// Merge walk over two ascending slices. The CDFs only change at sample
/// values, so evaluating after consuming every copy of each distinct merged
/// value visits every point where the supremum can be attained.
pub(crate) fn statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        let gap = (i as f64 / n - j as f64 / m).abs();
        if gap > best {
            best = gap;
        }
    }
    // Once one side is exhausted its CDF is 1 and the other only climbs
    // towards 1, so the gap can only shrink from here.
    best
}

/// `c(alpha)` of the asymptotic two-sample test.
pub fn c_alpha(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(((2.0 / alpha).ln() / 2.0).sqrt())
}

/// Rejection threshold on the statistic: `c(alpha) * sqrt((n + m) / (n m))`.
///
/// For `n == m == d` this is `c(alpha) * sqrt(2 / d)`.
pub fn ks_critical_value(alpha: f64, n: usize, m: usize) -> Result<f64> {
    let c = c_alpha(alpha)?;
    check_sizes(n, m)?;
    let (n, m) = (n as f64, m as f64);
    Ok(c * ((n + m) / (n * m)).sqrt())
}

/// Like [`ks_critical_value`] but also accepts `alpha == 1`, which maps to a
/// threshold of zero so that every changed row counts as rejected.
pub fn rejection_threshold(alpha: f64, n: usize, m: usize) -> Result<f64> {
    if alpha == 1.0 {
        check_sizes(n, m)?;
        return Ok(0.0);
    }
    ks_critical_value(alpha, n, m)
}

fn check_sizes(n: usize, m: usize) -> Result<()> {
    if n == 0 || m == 0 {
        return Err(Error::EmptySample);
    }
    Ok(())
}

/// Survival function of the Kolmogorov distribution,
/// `Q(lambda) = 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2)`, clamped to
/// `[0, 1]`.
///
/// Below `lambda = 1` the alternating series converges slowly, so the Jacobi
/// theta identity `Q = 1 - sqrt(2 pi)/lambda * sum exp(-(2k-1)^2 pi^2 / (8 lambda^2))`
/// is summed instead. Both forms use the same truncation rule.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda.is_nan() || lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.0 {
        let scale = (2.0 * PI).sqrt() / lambda;
        let denom = 8.0 * lambda * lambda;
        let mut sum = 0.0;
        for k in 1..=SERIES_MAX_TERMS {
            let odd = (2 * k - 1) as f64;
            let term = (-(odd * odd) * PI * PI / denom).exp();
            sum += term;
            if scale * term < SERIES_EPS {
                break;
            }
        }
        1.0 - scale * sum
    } else {
        let mut sum = 0.0;
        for k in 1..=SERIES_MAX_TERMS {
            let kf = k as f64;
            let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
            if k % 2 == 1 {
                sum += term;
            } else {
                sum -= term;
            }
            if term < SERIES_EPS {
                break;
            }
        }
        sum
    };
    q.clamp(0.0, 1.0)
}

/// Asymptotic two-sided p-value of a two-sample statistic.
pub fn ks_pvalue_asymptotic(statistic: f64, n: usize, m: usize, stephens_correction: bool) -> f64 {
    debug_assert!(n > 0 && m > 0);
    let effective = (n as f64 * m as f64) / (n as f64 + m as f64);
    let root = effective.sqrt();
    let lambda = if stephens_correction {
        statistic * (root + 0.12 + 0.11 / root)
    } else {
        statistic * root
    };
    kolmogorov_survival(lambda)
}

/// Permutation p-value: the fraction of `trials` seeded random re-splits of
/// the pooled data whose statistic is at least the observed one, with the
/// `(1 + hits) / (1 + trials)` estimator.
///
/// Each split is scored by walking the pooled sorted values once with shuffled
/// group labels, which is independent of [`ks_statistic`]'s merge walk.
pub fn ks_pvalue_permutation(a: &Sample, b: &Sample, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("permutation trials must be at least 1"));
    }
    let observed = ks_statistic(a, b);
    let (n, m) = (a.len(), b.len());

    let mut pooled: Vec<f64> = a.values().iter().chain(b.values()).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut labels: Vec<bool> = std::iter::repeat_n(true, n)
        .chain(std::iter::repeat_n(false, m))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        labels.shuffle(&mut rng);
        if labelled_statistic(&pooled, &labels, n, m) >= observed - PERMUTATION_TIE_EPS {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + trials) as f64)
}

fn labelled_statistic(pooled: &[f64], first_group: &[bool], n: usize, m: usize) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let (mut ca, mut cb) = (0usize, 0usize);
    let mut best = 0.0f64;
    for (idx, (&value, &in_a)) in pooled.iter().zip(first_group).enumerate() {
        if in_a {
            ca += 1;
        } else {
            cb += 1;
        }
        let group_ends = pooled.get(idx + 1).is_none_or(|&next| next != value);
        if group_ends {
            best = best.max((ca as f64 / nf - cb as f64 / mf).abs());
        }
    }
    best
}

/// Statistic, asymptotic p-value and threshold decision in one call.
/// `alpha` may be 1, in which case the threshold is zero.
pub fn ks_two_sample_test(a: &Sample, b: &Sample, alpha: f64) -> Result<KsResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let (n, m) = (a.len(), b.len());
    let statistic = ks_statistic(a, b);
    let tau = rejection_threshold(alpha, n, m)?;
    Ok(KsResult {
        statistic,
        p_value: ks_pvalue_asymptotic(statistic, n, m, false),
        n,
        m,
        tau,
        alpha,
        reject: statistic > tau,
    })
}

/// Threshold recovered numerically: the smallest statistic whose asymptotic
/// p-value is at most `alpha`, found by bisection on `[0, 1]`.
pub fn tau_from_pvalue_inversion(alpha: f64, n: usize, m: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    check_sizes(n, m)?;
    let p = |d: f64| ks_pvalue_asymptotic(d, n, m, false);
    if p(1.0) > alpha {
        return Err(Error::invalid(format!(
            "no statistic in [0, 1] reaches p <= {alpha} with n={n}, m={m}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_TOL {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if p(mid) <= alpha {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::NoConvergence(BISECTION_MAX_ITERS))
}
