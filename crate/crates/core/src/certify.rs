//! Next-token certification and certified-accuracy reports.
//!
//! A prediction is certified at level `alpha` when the tuned model predicts
//! the reference token and half the gap between its top-2 probabilities
//! exceeds `tau(alpha)`: any change to the non-ticket rows whose per-row KS
//! distance stays below `tau` cannot then move the argmax.

use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ks;

/// One next-token event from a prediction log.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub example_id: u64,
    pub position: u64,
    pub reference_token: u64,
    pub tuned_prediction: u64,
    pub p1: f64,
    pub p2: f64,
    pub partial_prediction: Option<u64>,
    pub base_p1: Option<f64>,
    pub base_p2: Option<f64>,
}

impl PredictionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Error::invalid(format!(
                "record (example {}, position {}): {what}",
                self.example_id, self.position
            ))
        };
        if !(self.p1 <= 1.0 && self.p1 >= self.p2 && self.p2 >= 0.0) {
            return Err(bad("probabilities must satisfy 1 >= p1 >= p2 >= 0"));
        }
        match (self.base_p1, self.base_p2) {
            (Some(b1), Some(b2)) if !(b1 <= 1.0 && b1 >= b2 && b2 >= 0.0) => {
                Err(bad("base probabilities must satisfy 1 >= p1 >= p2 >= 0"))
            }
            (Some(_), None) | (None, Some(_)) => {
                Err(bad("base probabilities must be given together"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_correct(&self) -> bool {
        self.tuned_prediction == self.reference_token
    }
}

/// Which model's top-2 probabilities feed the gap test.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbSource {
    #[default]
    Tuned,
    Base,
}

impl FromStr for ProbSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tuned" => Ok(ProbSource::Tuned),
            "base" => Ok(ProbSource::Base),
            other => Err(Error::invalid(format!(
                "unknown probability source {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub alpha: f64,
    pub tau: f64,
    pub d: usize,
    pub n_records: usize,
    pub certified_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction_accuracy: Option<f64>,
    pub tuned_accuracy: f64,
    pub verified_percentage: f64,
}

fn top2(r: &PredictionRecord, source: ProbSource) -> Result<(f64, f64)> {
    match source {
        ProbSource::Tuned => Ok((r.p1, r.p2)),
        ProbSource::Base => match (r.base_p1, r.base_p2) {
            (Some(p1), Some(p2)) => Ok((p1, p2)),
            _ => Err(Error::invalid(format!(
                "record (example {}, position {}) has no base probabilities",
                r.example_id, r.position
            ))),
        },
    }
}

fn passes_gap(r: &PredictionRecord, tau: f64, source: ProbSource) -> Result<bool> {
    let (p1, p2) = top2(r, source)?;
    Ok((p1 - p2) / 2.0 > tau)
}

/// True iff the tuned prediction is correct and `(p1 - p2) / 2 > tau`.
pub fn certify_record(r: &PredictionRecord, tau: f64, source: ProbSource) -> Result<bool> {
    let gap = passes_gap(r, tau, source)?;
    Ok(r.is_correct() && gap)
}

/// Keeps the records at positions `< k` of each example.
pub fn filter_first_k(records: &[PredictionRecord], k: usize) -> Vec<PredictionRecord> {
    records
        .iter()
        .filter(|r| r.position < k as u64)
        .cloned()
        .collect()
}

pub fn certification_report(
    records: &[PredictionRecord],
    alpha: f64,
    d: usize,
    source: ProbSource,
    first_k: Option<usize>,
) -> Result<CertificationReport> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if d < 2 {
        return Err(Error::invalid(format!(
            "dimension {d} is below the minimum of 2"
        )));
    }
    if first_k == Some(0) {
        return Err(Error::invalid("first-k must be at least 1"));
    }
    let filtered;
    let records = match first_k {
        Some(k) => {
            filtered = filter_first_k(records, k);
            &filtered[..]
        }
        None => records,
    };
    if records.is_empty() {
        return Err(Error::invalid("no prediction records to certify"));
    }
    let tau = ks::rejection_threshold(alpha, d, d)?;

    let mut certified = 0usize;
    let mut correct = 0usize;
    let mut verified = 0usize;
    let mut partial_correct = 0usize;
    let with_partial = records
        .iter()
        .filter(|r| r.partial_prediction.is_some())
        .count();
    if with_partial != 0 && with_partial != records.len() {
        return Err(Error::invalid(format!(
            "partial predictions present on {with_partial} of {} records",
            records.len()
        )));
    }
    for r in records {
        r.validate()?;
        let gap = passes_gap(r, tau, source)?;
        verified += usize::from(gap);
        correct += usize::from(r.is_correct());
        certified += usize::from(gap && r.is_correct());
        if r.partial_prediction == Some(r.reference_token) {
            partial_correct += 1;
        }
    }
    let n = records.len() as f64;
    Ok(CertificationReport {
        alpha,
        tau,
        d,
        n_records: records.len(),
        certified_accuracy: certified as f64 / n,
        prediction_accuracy: (with_partial > 0).then(|| partial_correct as f64 / n),
        tuned_accuracy: correct as f64 / n,
        verified_percentage: verified as f64 / n,
    })
}

/// One report per entry of `alphas`, in input order.
pub fn alpha_sweep(
    records: &[PredictionRecord],
    alphas: &[f64],
    d: usize,
    source: ProbSource,
    first_k: Option<usize>,
) -> Result<Vec<CertificationReport>> {
    alphas
        .iter()
        .map(|&alpha| certification_report(records, alpha, d, source, first_k))
        .collect()
}
