//! Embedding datasets and their on-disk formats.
//!
//! Binary layout ("EMB1", little-endian throughout):
//!
//! | field      | type            |
//! |------------|-----------------|
//! | magic      | `b"EMB1"`       |
//! | version    | `u8` = 1        |
//! | n          | `u32`           |
//! | d          | `u32`           |
//! | label_flag | `u8` (0 or 1)   |
//! | data       | `n·d` × `f64`, row-major |
//! | labels     | `n` × `i32`, only when `label_flag = 1` |
//!
//! A CSV reader is provided for hand-made inputs.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{check_dim, Error, Result};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 1;

/// An `n × d` matrix of feature vectors with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Array2<f64>,
    labels: Option<Vec<usize>>,
    pub source_tag: String,
}

impl EmbeddingSet {
    pub fn new(data: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if data.ncols() == 0 {
            return Err(Error::InvalidParams("embedding dimension must be >= 1".into()));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(idx));
        }
        if let Some(l) = &labels {
            check_dim("label count vs rows", data.nrows(), l.len())?;
        }
        Ok(Self {
            data,
            labels,
            source_tag: String::new(),
        })
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or(Error::MissingLabels)
    }

    /// `max(label) + 1`, or `None` for unlabeled sets.
    pub fn num_classes(&self) -> Option<usize> {
        self.labels()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn into_parts(self) -> (Array2<f64>, Option<Vec<usize>>) {
        (self.data, self.labels)
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let data = self.data.select(ndarray::Axis(0), rows);
        let labels = self
            .labels
            .as_ref()
            .map(|l| rows.iter().map(|&i| l[i]).collect());
        Ok(Self::new(data, labels)?.with_tag(self.source_tag.clone()))
    }

    /// Drops the labels.
    pub fn unlabeled(&self) -> Self {
        Self {
            data: self.data.clone(),
            labels: None,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// Serializes to the EMB1 byte layout.
pub fn encode_emb(set: &EmbeddingSet) -> Result<Vec<u8>> {
    if let Some(idx) = set.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(idx));
    }
    let n = u32::try_from(set.len())
        .map_err(|_| Error::InvalidParams("too many rows for EMB1".into()))?;
    let d = u32::try_from(set.dim())
        .map_err(|_| Error::InvalidParams("dimension too large for EMB1".into()))?;
    let label_bytes = set.labels.as_ref().map_or(0, |l| 4 * l.len());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * set.data.len() + label_bytes);
    out.extend_from_slice(&EMB_MAGIC);
    out.push(EMB_VERSION);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.push(u8::from(set.labels.is_some()));
    for v in set.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &set.labels {
        for &l in labels {
            let l = i32::try_from(l).map_err(|_| Error::LabelOutOfRange {
                row: 0,
                label: l as i64,
                num_classes: i32::MAX as usize,
            })?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the EMB1 byte layout. Nothing is returned unless the whole buffer
/// validates.
pub fn decode_emb(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != EMB_MAGIC {
            return Err(bad_magic(bytes));
        }
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != EMB_MAGIC {
        return Err(bad_magic(bytes));
    }
    if bytes[4] != EMB_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let has_labels = match bytes[13] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::InvalidParams(format!("label flag must be 0 or 1, got {other}")))
        }
    };
    let expected = HEADER_LEN + 8 * n * d + if has_labels { 4 * n } else { 0 };
    if bytes.len() != expected {
        return Err(Error::TruncatedFile {
            expected,
            actual: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let values: Vec<f64> = payload[..8 * n * d]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(idx));
    }
    let labels = if has_labels {
        let raw = payload[8 * n * d..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()));
        let mut labels = Vec::with_capacity(n);
        for (row, l) in raw.enumerate() {
            if l < 0 {
                return Err(Error::LabelOutOfRange {
                    row,
                    label: l as i64,
                    num_classes: 0,
                });
            }
            labels.push(l as usize);
        }
        Some(labels)
    } else {
        None
    };
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    EmbeddingSet::new(data, labels)
}

fn bad_magic(bytes: &[u8]) -> Error {
    let mut found = [0u8; 4];
    found.copy_from_slice(&bytes[..4]);
    Error::BadMagic {
        expected: EMB_MAGIC,
        found,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParams(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_emb(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_emb(set)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_emb(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_emb(&bytes)?.with_tag(path.display().to_string()))
}

/// Reads a headerless numeric CSV. With `has_labels`, the last column is an
/// integer class label.
pub fn read_csv_from<R: Read>(reader: R, has_labels: bool) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut width: Option<usize> = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::ParseError {
            line: e.position().map_or(0, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::RaggedRows {
                    line,
                    expected: w,
                    found: record.len(),
                })
            }
            _ => {}
        }
        let n_features = if has_labels {
            if record.len() < 2 {
                return Err(Error::ParseError {
                    line,
                    column: 1,
                    message: "labeled rows need at least one feature and a label".into(),
                });
            }
            record.len() - 1
        } else {
            record.len()
        };
        for (col, field) in record.iter().take(n_features).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::ParseError {
                line,
                column: col + 1,
                message: format!("not a number: {field:?}"),
            })?;
            values.push(v);
        }
        if has_labels {
            let field = &record[n_features];
            let label: i64 = field.parse().map_err(|_| Error::ParseError {
                line,
                column: n_features + 1,
                message: format!("not an integer label: {field:?}"),
            })?;
            if label < 0 {
                return Err(Error::LabelOutOfRange {
                    row: rows,
                    label,
                    num_classes: 0,
                });
            }
            labels.push(label as usize);
        }
        rows += 1;
    }
    let width = width.ok_or(Error::EmptyBatch)?;
    let d = if has_labels { width - 1 } else { width };
    let data =
        Array2::from_shape_vec((rows, d), values).map_err(|e| Error::InvalidParams(e.to_string()))?;
    EmbeddingSet::new(data, has_labels.then_some(labels))
}

pub fn read_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_csv_from(f, has_labels)?.with_tag(path.display().to_string()))
}
