//! Text file formats exchanged between pipeline stages.
//!
//! Renderers return `String`s so that callers decide where bytes go; every
//! renderer is deterministic, and floats in CSV output use nine significant
//! digits (`%.9g` style) so files are byte-stable across platforms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::certify::{CertificationReport, PredictionRecord};
use crate::error::{Error, Result};
use crate::selection::{TokenScore, WinningTicketSet};
use crate::transfer::RowMask;

pub const SCORES_HEADER: &str =
    "token_id,ks_statistic,p_value,cos,abs_l2,relative,ratio,kl,frequency";
pub const PREDICTION_LOG_HEADER: &str =
    "example_id,position,reference_id,tuned_pred_id,tuned_p1,tuned_p2,partial_pred_id,base_p1,base_p2";
pub const COUNTS_HEADER: &str = "token_id,count";
pub const TASK_HEADER: &str = "source,target";
pub const LOSS_HEADER: &str = "epoch,loss";

/// Formats like C's `%.{sig}g`.
pub fn format_sig(x: f64, sig: usize) -> String {
    let sig = sig.max(1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exponent) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exponent.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn fmt9(x: f64) -> String {
    format_sig(x, 9)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

/// Reads a CSV document after checking its header line. Yields
/// `(line_number, record)`; blank lines are skipped.
fn csv_rows(text: &str, header: &str, source: &str) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let expected: Vec<&str> = header.split(',').collect();
    let found = reader
        .headers()
        .map_err(|e| csv_err(text, source, &e))?
        .clone();
    if found.is_empty() {
        return Err(parse_err(source, 1, "missing header"));
    }
    if found.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            source,
            1,
            format!(
                "expected header {header:?}, found {:?}",
                found.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    reader
        .into_records()
        .map(|record| {
            let record = record.map_err(|e| csv_err(text, source, &e))?;
            let line = line_of(text, record.position());
            Ok((line, record))
        })
        .collect()
}

/// 1-based line of a record. Computed from the byte offset because the
/// reader's own line counter skips blank lines.
pub(crate) fn line_of(text: &str, position: Option<&csv::Position>) -> usize {
    position.map_or(0, |p| {
        let bytes = text.as_bytes();
        let mut start = (p.byte() as usize).min(bytes.len());
        // A record's offset can sit on the blank lines skipped before it.
        while start < bytes.len() && matches!(bytes[start], b'\n' | b'\r') {
            start += 1;
        }
        1 + bytes[..start].iter().filter(|&&b| b == b'\n').count()
    })
}

fn csv_err(text: &str, source: &str, e: &csv::Error) -> Error {
    let line = line_of(text, e.position());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => {
            format!("expected {expected_len} fields, found {len}")
        }
        _ => e.to_string(),
    };
    parse_err(source, line, message)
}

fn field<T: std::str::FromStr>(value: &str, name: &str, source: &str, line: usize) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| parse_err(source, line, format!("bad {name}: {value:?}")))
}

fn optional_field<T: std::str::FromStr>(
    value: &str,
    name: &str,
    source: &str,
    line: usize,
) -> Result<Option<T>> {
    if value.trim().is_empty() {
        Ok(None)
    } else {
        field(value, name, source, line).map(Some)
    }
}

pub fn render_scores(scores: &[TokenScore]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for s in scores {
        let freq = s.frequency.map(|f| f.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.token_id,
            fmt9(s.ks_statistic),
            fmt9(s.p_value),
            fmt9(s.cos),
            fmt9(s.abs_l2),
            fmt9(s.relative),
            fmt9(s.ratio),
            fmt9(s.kl),
            freq
        ));
    }
    out
}

pub fn parse_scores(text: &str, source: &str) -> Result<Vec<TokenScore>> {
    let rows = csv_rows(text, SCORES_HEADER, source)?;
    if rows.is_empty() {
        return Err(Error::NoRows(source.to_string()));
    }
    let mut scores = rows
        .into_iter()
        .map(|(line, f)| {
            Ok(TokenScore {
                token_id: field(&f[0], "token_id", source, line)?,
                ks_statistic: field(&f[1], "ks_statistic", source, line)?,
                p_value: field(&f[2], "p_value", source, line)?,
                cos: field(&f[3], "cos", source, line)?,
                abs_l2: field(&f[4], "abs_l2", source, line)?,
                relative: field(&f[5], "relative", source, line)?,
                ratio: field(&f[6], "ratio", source, line)?,
                kl: field(&f[7], "kl", source, line)?,
                frequency: optional_field(&f[8], "frequency", source, line)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by_key(|s| s.token_id);
    if let Some((i, s)) = scores.iter().enumerate().find(|(i, s)| s.token_id != *i) {
        return Err(Error::invalid(format!(
            "{source}: token ids must cover 0..{} exactly once (found {} at row {i})",
            scores.len(),
            s.token_id
        )));
    }
    Ok(scores)
}

pub fn render_tickets(tickets: &WinningTicketSet) -> Result<String> {
    tickets.validate()?;
    toml::to_string(tickets).map_err(|e| Error::invalid(format!("cannot render ticket file: {e}")))
}

pub fn parse_tickets(text: &str, source: &str) -> Result<WinningTicketSet> {
    let tickets: WinningTicketSet = toml::from_str(text)
        .map_err(|e| Error::invalid(format!("{source}: bad ticket file: {e}")))?;
    tickets.validate()?;
    Ok(tickets)
}

pub fn render_mask(mask: &RowMask) -> String {
    let mut out = String::with_capacity(mask.vocab_size() * 2);
    for &t in &mask.trainable {
        out.push(if t { '1' } else { '0' });
        out.push('\n');
    }
    out
}

pub fn parse_mask(text: &str, source: &str) -> Result<RowMask> {
    let trainable = text
        .lines()
        .enumerate()
        .map(|(i, line)| match line.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(parse_err(
                source,
                i + 1,
                format!("expected 0 or 1, found {other:?}"),
            )),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RowMask { trainable })
}

pub fn render_prediction_log(records: &[PredictionRecord]) -> String {
    let opt_id = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let opt_p = |v: Option<f64>| v.map(fmt9).unwrap_or_default();
    let mut out = String::from(PREDICTION_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.example_id,
            r.position,
            r.reference_token,
            r.tuned_prediction,
            fmt9(r.p1),
            fmt9(r.p2),
            opt_id(r.partial_prediction),
            opt_p(r.base_p1),
            opt_p(r.base_p2),
        ));
    }
    out
}

pub fn parse_prediction_log(text: &str, source: &str) -> Result<Vec<PredictionRecord>> {
    csv_rows(text, PREDICTION_LOG_HEADER, source)?
        .into_iter()
        .map(|(line, f)| {
            let record = PredictionRecord {
                example_id: field(&f[0], "example_id", source, line)?,
                position: field(&f[1], "position", source, line)?,
                reference_token: field(&f[2], "reference_id", source, line)?,
                tuned_prediction: field(&f[3], "tuned_pred_id", source, line)?,
                p1: field(&f[4], "tuned_p1", source, line)?,
                p2: field(&f[5], "tuned_p2", source, line)?,
                partial_prediction: optional_field(&f[6], "partial_pred_id", source, line)?,
                base_p1: optional_field(&f[7], "base_p1", source, line)?,
                base_p2: optional_field(&f[8], "base_p2", source, line)?,
            };
            record
                .validate()
                .map_err(|e| parse_err(source, line, e.to_string()))?;
            Ok(record)
        })
        .collect()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    report: &'a [CertificationReport],
}

pub fn render_reports(reports: &[CertificationReport]) -> Result<String> {
    toml::to_string(&ReportFile { report: reports })
        .map_err(|e| Error::invalid(format!("cannot render report: {e}")))
}

pub fn render_counts(counts: &[u64], ids: impl IntoIterator<Item = usize>) -> String {
    let mut out = String::from(COUNTS_HEADER);
    out.push('\n');
    for id in ids {
        out.push_str(&format!("{id},{}\n", counts[id]));
    }
    out
}

/// Counts file to a dense vector of length `vocab_size`; ids absent from the
/// file count zero.
pub fn parse_counts(text: &str, source: &str, vocab_size: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; vocab_size];
    for (line, f) in csv_rows(text, COUNTS_HEADER, source)? {
        let id: usize = field(&f[0], "token_id", source, line)?;
        let slot = counts.get_mut(id).ok_or_else(|| {
            parse_err(
                source,
                line,
                format!("token id {id} out of range for {vocab_size}"),
            )
        })?;
        *slot = field(&f[1], "count", source, line)?;
    }
    Ok(counts)
}

/// Whitespace-separated token ids.
pub fn parse_corpus(text: &str, source: &str) -> Result<Vec<u64>> {
    text.lines()
        .enumerate()
        .flat_map(|(i, line)| line.split_whitespace().map(move |tok| (i + 1, tok)))
        .map(|(line, tok)| field(tok, "token id", source, line))
        .collect()
}

pub fn render_corpus(ids: impl IntoIterator<Item = u64>) -> String {
    let mut out = String::new();
    for id in ids {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    out
}

pub fn render_task_pairs(pairs: &[(usize, usize)]) -> String {
    let mut out = String::from(TASK_HEADER);
    out.push('\n');
    for (s, t) in pairs {
        out.push_str(&format!("{s},{t}\n"));
    }
    out
}

pub fn parse_task_pairs(text: &str, source: &str) -> Result<Vec<(usize, usize)>> {
    csv_rows(text, TASK_HEADER, source)?
        .into_iter()
        .map(|(line, f)| {
            Ok((
                field(&f[0], "source", source, line)?,
                field(&f[1], "target", source, line)?,
            ))
        })
        .collect()
}

pub fn render_loss_curve(curve: &[f64]) -> String {
    let mut out = String::from(LOSS_HEADER);
    out.push('\n');
    for (epoch, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{}\n", fmt9(*loss)));
    }
    out
}

/// Scalar results such as an accuracy, as a one-key TOML document.
#[derive(Debug, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
}
