//! Per-row diff scoring and winning-ticket selection.
//!
//! Works on any pair of same-shape 2-D tensors: each row of the base tensor
//! is compared with the same row of the tuned tensor. The Kolmogorov-Smirnov
//! statistic treats the `d` entries of a row as a sample; the remaining
//! scores (cosine, L2 distance, relative, ratio, histogram KL) are the usual
//! baselines for deciding which parameters moved.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::EmbeddingView;
use crate::error::{Error, Result};
use crate::ks::{self, Sample};

const KL_BINS: usize = 64;
const KL_MASS_FLOOR: f64 = 1e-9;
const DIVISION_FLOOR: f64 = 1e-8;

/// Diff scores for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    pub token_id: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub cos: f64,
    pub abs_l2: f64,
    pub relative: f64,
    pub ratio: f64,
    pub kl: f64,
    pub frequency: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ks,
    Cos,
    Abs,
    Relative,
    Ratio,
    Kl,
    Frequency,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ks,
        Method::Cos,
        Method::Abs,
        Method::Relative,
        Method::Ratio,
        Method::Kl,
        Method::Frequency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ks => "ks",
            Method::Cos => "cos",
            Method::Abs => "abs",
            Method::Relative => "relative",
            Method::Ratio => "ratio",
            Method::Kl => "kl",
            Method::Frequency => "frequency",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Rows selected for tuning or transfer, plus how they were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinningTicketSet {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
    pub vocab_size: usize,
    pub token_ids: Vec<usize>,
}

impl WinningTicketSet {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.token_ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "token ids must be strictly ascending ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&last) = self.token_ids.last() {
            if last >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: last as u64,
                    position: self.token_ids.len() - 1,
                    vocab_size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.token_ids.binary_search(&id).is_ok()
    }

    /// Per-row membership flags, length `vocab_size`.
    pub fn membership(&self) -> Vec<bool> {
        let mut flags = vec![false; self.vocab_size];
        for &id in &self.token_ids {
            flags[id] = true;
        }
        flags
    }
}

fn guard_divisor(x: f64) -> f64 {
    if x.abs() >= DIVISION_FLOOR {
        x
    } else if x.is_sign_negative() {
        -DIVISION_FLOOR
    } else {
        DIVISION_FLOOR
    }
}

/// Scores one row pair. `token_id` is left at 0 and `frequency` unset.
pub fn score_row(base_row: &[f32], tuned_row: &[f32]) -> Result<TokenScore> {
    if base_row.len() != tuned_row.len() {
        return Err(Error::LengthMismatch {
            left: base_row.len(),
            right: tuned_row.len(),
        });
    }
    let d = base_row.len();
    if d < 2 {
        return Err(Error::invalid(format!(
            "row length {d} is below the minimum of 2"
        )));
    }
    let base = Sample::from_f32(base_row)?;
    let tuned = Sample::from_f32(tuned_row)?;
    let ks_statistic = ks::ks_statistic(&base, &tuned);
    let p_value = ks::ks_pvalue_asymptotic(ks_statistic, d, d, false);

    let b: Vec<f64> = base_row.iter().map(|&v| f64::from(v)).collect();
    let t: Vec<f64> = tuned_row.iter().map(|&v| f64::from(v)).collect();

    let dot: f64 = b.iter().zip(&t).map(|(x, y)| x * y).sum();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = match (nb == 0.0, nt == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => (dot / (nb * nt)).clamp(-1.0, 1.0),
    };
    let abs_l2 = b
        .iter()
        .zip(&t)
        .map(|(x, y)| (y - x).powi(2))
        .sum::<f64>()
        .sqrt();
    let df = d as f64;
    let relative = b
        .iter()
        .zip(&t)
        .map(|(x, y)| (y / guard_divisor(*x)).abs())
        .sum::<f64>()
        / df;
    let ratio = b
        .iter()
        .zip(&t)
        .map(|(x, y)| ((y - x) / guard_divisor(*x)).abs())
        .sum::<f64>()
        / df;

    Ok(TokenScore {
        token_id: 0,
        ks_statistic,
        p_value,
        cos,
        abs_l2,
        relative,
        ratio,
        kl: histogram_kl(&t, &b),
        frequency: None,
    })
}

/// `KL(P || Q)` between 64-bin histograms over the shared range of both rows.
fn histogram_kl(p_values: &[f64], q_values: &[f64]) -> f64 {
    let (lo, hi) = p_values
        .iter()
        .chain(q_values)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let width = (hi - lo) / KL_BINS as f64;
    let histogram = |values: &[f64]| {
        let mut mass = [0.0f64; KL_BINS];
        for &v in values {
            let bin = if width > 0.0 {
                (((v - lo) / width) as usize).min(KL_BINS - 1)
            } else {
                0
            };
            mass[bin] += 1.0;
        }
        let n = values.len() as f64;
        for m in &mut mass {
            *m = (*m / n).max(KL_MASS_FLOOR);
        }
        let total: f64 = mass.iter().sum();
        mass.map(|m| m / total)
    };
    let (p, q) = (histogram(p_values), histogram(q_values));
    let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
    kl.max(0.0)
}

/// Scores every row of a base/tuned pair, ordered by row index.
pub fn analyze_pair(
    base: &EmbeddingView<'_>,
    tuned: &EmbeddingView<'_>,
) -> Result<Vec<TokenScore>> {
    if (base.vocab_size(), base.dim()) != (tuned.vocab_size(), tuned.dim()) {
        return Err(Error::ShapeMismatch {
            name: base.name().to_string(),
            left: vec![base.vocab_size(), base.dim()],
            right: vec![tuned.vocab_size(), tuned.dim()],
        });
    }
    (0..base.vocab_size())
        .into_par_iter()
        .map(|i| {
            let mut score = score_row(base.row(i), tuned.row(i))?;
            score.token_id = i;
            Ok(score)
        })
        .collect()
}

/// Attaches corpus counts to the scores. `counts[i]` belongs to row `i`.
pub fn attach_frequencies(scores: &mut [TokenScore], counts: &[u64]) -> Result<()> {
    if scores.len() != counts.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: counts.len(),
        });
    }
    for s in scores {
        s.frequency = Some(counts[s.token_id]);
    }
    Ok(())
}

fn check_alpha_closed(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn vocab_of(scores: &[TokenScore]) -> Result<usize> {
    let vocab_size = scores.len();
    if let Some(bad) = scores.iter().find(|s| s.token_id >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad.token_id as u64,
            position: 0,
            vocab_size,
        });
    }
    Ok(vocab_size)
}

/// Rows whose asymptotic p-value falls below `alpha`.
///
/// `alpha == 1` is treated as a threshold of zero: every row with a non-zero
/// statistic is selected, including rows whose p-value rounds to 1.
pub fn select_by_alpha(scores: &[TokenScore], alpha: f64, d: usize) -> Result<WinningTicketSet> {
    check_alpha_closed(alpha)?;
    if d < 2 {
        return Err(Error::invalid(format!(
            "dimension {d} is below the minimum of 2"
        )));
    }
    let vocab_size = vocab_of(scores)?;
    let tau = ks::rejection_threshold(alpha, d, d)?;
    let mut token_ids: Vec<usize> = scores
        .iter()
        .filter(|s| {
            if alpha == 1.0 {
                s.ks_statistic > 0.0
            } else {
                s.p_value < alpha
            }
        })
        .map(|s| s.token_id)
        .collect();
    token_ids.sort_unstable();
    Ok(WinningTicketSet {
        method: Method::Ks,
        alpha: Some(alpha),
        tau: Some(tau),
        vocab_size,
        token_ids,
    })
}

/// "Most changed first" comparison for `metric`, ties by ascending id.
fn changed_order(metric: Method) -> impl Fn(&TokenScore, &TokenScore) -> Result<Ordering> {
    move |a, b| {
        let key = |s: &TokenScore| -> Result<f64> {
            Ok(match metric {
                Method::Ks => s.ks_statistic,
                Method::Cos => -s.cos,
                Method::Abs => s.abs_l2,
                Method::Relative => s.relative,
                Method::Ratio => s.ratio,
                Method::Kl => s.kl,
                Method::Frequency => s
                    .frequency
                    .ok_or_else(|| Error::invalid("scores carry no frequency column"))?
                    as f64,
            })
        };
        Ok(key(b)?
            .total_cmp(&key(a)?)
            .then(a.token_id.cmp(&b.token_id)))
    }
}

/// Row ids ordered most-changed first under `metric`.
pub fn rank_rows(scores: &[TokenScore], metric: Method) -> Result<Vec<usize>> {
    let cmp = changed_order(metric);
    // Surface a missing frequency column before sorting.
    if let (Some(first), Method::Frequency) = (scores.first(), metric) {
        cmp(first, first)?;
        if scores.iter().any(|s| s.frequency.is_none()) {
            return Err(Error::invalid("scores carry no frequency column"));
        }
    }
    let mut order: Vec<&TokenScore> = scores.iter().collect();
    order.sort_by(|a, b| cmp(a, b).expect("keys checked above"));
    Ok(order.into_iter().map(|s| s.token_id).collect())
}

/// The `k` most-changed rows under `metric`, returned in ascending id order.
pub fn select_top_k(scores: &[TokenScore], metric: Method, k: usize) -> Result<WinningTicketSet> {
    let vocab_size = vocab_of(scores)?;
    if k > vocab_size {
        return Err(Error::invalid(format!(
            "k = {k} exceeds vocabulary size {vocab_size}"
        )));
    }
    let mut token_ids: Vec<usize> = rank_rows(scores, metric)?.into_iter().take(k).collect();
    token_ids.sort_unstable();
    Ok(WinningTicketSet {
        method: metric,
        alpha: None,
        tau: None,
        vocab_size,
        token_ids,
    })
}

/// 1-based rank of `token_id` under `metric`, divided by the row count.
pub fn normalized_rank(scores: &[TokenScore], metric: Method, token_id: usize) -> Result<f64> {
    let vocab_size = vocab_of(scores)?;
    let order = rank_rows(scores, metric)?;
    let pos = order
        .iter()
        .position(|&id| id == token_id)
        .ok_or(Error::TokenOutOfRange {
            id: token_id as u64,
            position: 0,
            vocab_size,
        })?;
    Ok((pos + 1) as f64 / vocab_size as f64)
}

/// Occurrence count of every id in `0..vocab_size`.
pub fn count_frequencies<I>(corpus: I, vocab_size: usize) -> Result<Vec<u64>>
where
    I: IntoIterator<Item = u64>,
{
    let mut counts = vec![0u64; vocab_size];
    for (position, id) in corpus.into_iter().enumerate() {
        let slot = usize::try_from(id)
            .ok()
            .and_then(|i| counts.get_mut(i))
            .ok_or(Error::TokenOutOfRange {
                id,
                position,
                vocab_size,
            })?;
        *slot += 1;
    }
    Ok(counts)
}

/// Top-`k` ids by count, ties by ascending id.
pub fn select_by_frequency(counts: &[u64], k: usize) -> Result<WinningTicketSet> {
    let vocab_size = counts.len();
    if k > vocab_size {
        return Err(Error::invalid(format!(
            "k = {k} exceeds vocabulary size {vocab_size}"
        )));
    }
    let mut order: Vec<usize> = (0..vocab_size).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut token_ids: Vec<usize> = order.into_iter().take(k).collect();
    token_ids.sort_unstable();
    Ok(WinningTicketSet {
        method: Method::Frequency,
        alpha: None,
        tau: None,
        vocab_size,
        token_ids,
    })
}

/// Fraction of ticket rows whose distribution is the same in two tuned
/// matrices: `1 - rejected / tickets`, or 1 for an empty ticket set.
pub fn compare_ticket_distributions(
    tuned_a: &EmbeddingView<'_>,
    tuned_b: &EmbeddingView<'_>,
    tickets: &WinningTicketSet,
    alpha: f64,
) -> Result<f64> {
    if (tuned_a.vocab_size(), tuned_a.dim()) != (tuned_b.vocab_size(), tuned_b.dim()) {
        return Err(Error::ShapeMismatch {
            name: tuned_a.name().to_string(),
            left: vec![tuned_a.vocab_size(), tuned_a.dim()],
            right: vec![tuned_b.vocab_size(), tuned_b.dim()],
        });
    }
    tickets.validate()?;
    if tickets.vocab_size != tuned_a.vocab_size() {
        return Err(Error::invalid(format!(
            "ticket set is for {} rows, tensor has {}",
            tickets.vocab_size,
            tuned_a.vocab_size()
        )));
    }
    if tickets.is_empty() {
        return Ok(1.0);
    }
    let mut rejected = 0usize;
    for &id in &tickets.token_ids {
        let a = Sample::from_f32(tuned_a.row(id))?;
        let b = Sample::from_f32(tuned_b.row(id))?;
        if ks::ks_two_sample_test(&a, &b, alpha)?.reject {
            rejected += 1;
        }
    }
    Ok(1.0 - rejected as f64 / tickets.len() as f64)
}
