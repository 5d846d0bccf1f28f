//! Binary container for named f32 tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..4      magic b"KSLT"
//! 4..8      format version (u32, currently 1)
//! 8..12     header length H (u32)
//! 12..12+H  UTF-8 header, one line per tensor:
//!           name \t dim0,dim1,... \t byte_offset \t byte_length \n
//! 12+H..    raw f32 payloads, row-major, no padding
//! ```
//!
//! Offsets in the header are relative to the end of the header.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KSLT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            shape,
            data,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| Error::InvalidTensor {
            name: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(invalid("empty name".into()));
        }
        if self.name.contains(['\t', '\n', '\r']) {
            return Err(invalid("name contains tab or newline".into()));
        }
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(invalid(format!(
                "shape {:?} must have positive dimensions",
                self.shape
            )));
        }
        let numel = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid("shape overflows".into()))?;
        if numel != self.data.len() {
            return Err(invalid(format!(
                "shape {:?} needs {numel} values but data has {}",
                self.shape,
                self.data.len()
            )));
        }
        if let Some(bad) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor {:?}", self.name),
                value: f64::from(*bad),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tensors: Vec<TensorRecord>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            tensors: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn new(tensors: Vec<TensorRecord>) -> Result<Self> {
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateTensor(t.name.clone()));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorRecord> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::TensorNotFound(name.to_string()))
    }

    /// Serializes to the on-disk byte layout. Identical input gives identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut header = String::new();
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            let len = t.data.len() * 4;
            header.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                t.name,
                dims.join(","),
                offset,
                len
            ));
            offset += len;
        }
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::invalid("checkpoint header exceeds 4 GiB"))?;

        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint("bad magic".into()));
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(Error::CorruptCheckpoint("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = PREAMBLE_LEN
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("header length past end of file".into()))?;
        let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..payload_start])
            .map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
        let payload = &bytes[payload_start..];

        let mut tensors = Vec::new();
        for (lineno, line) in header.lines().enumerate() {
            let corrupt = |what: &str| {
                Error::CorruptCheckpoint(format!("header line {}: {what}", lineno + 1))
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dims, offset, length] = fields[..] else {
                return Err(corrupt("expected 4 tab-separated fields"));
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| corrupt("bad shape"))?;
            let offset: usize = offset.parse().map_err(|_| corrupt("bad offset"))?;
            let length: usize = length.parse().map_err(|_| corrupt("bad length"))?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("shape overflows"))?;
            if numel.checked_mul(4) != Some(length) {
                return Err(corrupt("byte length does not match shape"));
            }
            let end = offset
                .checked_add(length)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| corrupt("payload extends past end of file"))?;
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let record = TensorRecord {
                name: name.to_string(),
                shape,
                data,
            };
            record.validate().map_err(|e| corrupt(&e.to_string()))?;
            tensors.push(record);
        }
        let ckpt = Checkpoint {
            format_version: version,
            tensors,
        };
        ckpt.validate()
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// A rank-2 tensor viewed as `vocab_size` rows of `dim` values.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingView<'a> {
    record: &'a TensorRecord,
}

impl<'a> EmbeddingView<'a> {
    pub fn new(record: &'a TensorRecord) -> Result<Self> {
        if record.shape.len() != 2 {
            return Err(Error::NotAMatrix {
                name: record.name.clone(),
                rank: record.shape.len(),
            });
        }
        Ok(EmbeddingView { record })
    }

    pub fn name(&self) -> &'a str {
        &self.record.name
    }

    pub fn vocab_size(&self) -> usize {
        self.record.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.record.shape[1]
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        let d = self.dim();
        &self.record.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f32]> + 'a {
        self.record.data.chunks_exact(self.dim())
    }

    pub fn data(&self) -> &'a [f32] {
        &self.record.data
    }
}

pub fn get_embedding<'a>(ckpt: &'a Checkpoint, tensor_name: &str) -> Result<EmbeddingView<'a>> {
    EmbeddingView::new(ckpt.tensor(tensor_name)?)
}

/// Checks that `tensor_name` exists in both checkpoints with the same 2-D
/// shape and returns `(vocab_size, dim)`.
pub fn validate_pair(
    base: &Checkpoint,
    tuned: &Checkpoint,
    tensor_name: &str,
) -> Result<(usize, usize)> {
    let b = base.tensor(tensor_name)?;
    let t = tuned.tensor(tensor_name)?;
    if b.shape != t.shape {
        return Err(Error::ShapeMismatch {
            name: tensor_name.to_string(),
            left: b.shape.clone(),
            right: t.shape.clone(),
        });
    }
    let view = EmbeddingView::new(b)?;
    Ok((view.vocab_size(), view.dim()))
}

/// Loads a headerless CSV of decimal floats as a single `[rows, cols]` tensor.
pub fn import_csv_matrix(path: impl AsRef<Path>, tensor_name: &str) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_matrix(&text, &path.display().to_string(), tensor_name)
}

pub(crate) fn parse_csv_matrix(text: &str, source: &str, tensor_name: &str) -> Result<Checkpoint> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    for record in reader.records() {
        let parse_err = |line: Option<&csv::Position>, message: String| Error::Parse {
            path: source.to_string(),
            line: crate::formats::line_of(text, line),
            message,
        };
        let record = record.map_err(|e| {
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } => {
                    format!("expected {expected_len} columns, found {len}")
                }
                _ => e.to_string(),
            };
            parse_err(e.position(), message)
        })?;
        for (col, cell) in record.iter().enumerate() {
            let value: f32 = cell.parse().map_err(|_| {
                parse_err(
                    record.position(),
                    format!("column {}: not a number: {cell:?}", col + 1),
                )
            })?;
            if !value.is_finite() {
                return Err(parse_err(
                    record.position(),
                    format!("column {}: non-finite value", col + 1),
                ));
            }
            data.push(value);
        }
        cols = record.len();
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::NoRows(source.to_string()));
    }
    Checkpoint::new(vec![TensorRecord::new(
        tensor_name,
        vec![rows, cols],
        data,
    )?])
}
