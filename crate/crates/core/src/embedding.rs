//! Labelled embedding matrices and their CSV form.
//!
//! CSV layout: a header `index,label,z1,...,zm` followed by one row per
//! sample. Floats use the shortest representation that round-trips, so
//! identical embeddings always serialise to identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Master,
    Student,
    Baseline,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    values: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    pub source: EmbeddingSource,
}

impl EmbeddingSet {
    pub fn new(values: Vec<f64>, dim: usize, labels: Vec<usize>, source: EmbeddingSource) -> Result<Self> {
        if dim == 0 || values.len() != dim * labels.len() {
            return Err(Error::LengthMismatch {
                what: "embedding values vs rows * dim",
                left: values.len(),
                right: dim * labels.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite embedding in row {}", i / dim)));
        }
        Ok(EmbeddingSet {
            values,
            dim,
            labels,
            source,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("ragged embedding rows".into()));
        }
        EmbeddingSet::new(rows.concat(), dim, labels, EmbeddingSource::External)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label");
        for j in 1..=self.dim {
            write!(s, ",z{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.len() {
            write!(s, "{},{}", i, self.labels[i]).unwrap();
            for v in self.row(i) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses the CSV layout above. Errors carry the 1-based line number.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "index" || cols[1] != "label" {
            return Err(bad(1, format!("expected header index,label,z1,..., got {header:?}")));
        }
        let dim = cols.len() - 2;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines {
            let line_no = n + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 2 {
                return Err(bad(line_no, format!("expected {} fields, found {}", dim + 2, fields.len())));
            }
            let index: usize = fields[0].parse().map_err(|_| bad(line_no, format!("bad index {:?}", fields[0])))?;
            if index != labels.len() {
                return Err(bad(line_no, format!("index {index} out of sequence")));
            }
            labels.push(fields[1].parse().map_err(|_| bad(line_no, format!("bad label {:?}", fields[1])))?);
            for f in &fields[2..] {
                let v: f64 = f.parse().map_err(|_| bad(line_no, format!("bad value {f:?}")))?;
                if !v.is_finite() {
                    return Err(bad(line_no, format!("non-finite value {f:?}")));
                }
                values.push(v);
            }
        }
        if labels.is_empty() {
            return Err(bad(2, "no embedding rows".into()));
        }
        EmbeddingSet::new(values, dim, labels, EmbeddingSource::External)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        EmbeddingSet::from_csv(&text, path)
    }
}
