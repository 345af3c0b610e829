//! Plain-text labeled table.
//!
//! ```text
//! dim=<d>,num_classes=<c>
//! <label>,<v_0>,...,<v_{d-1}>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip formatting, so reading a written
//! table reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::DatasetError;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TableData {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub rows: Tensor,
}

pub fn write_table(path: &Path, num_classes: usize, labels: &[usize], rows: &Tensor) -> Result<(), DatasetError> {
    let mut out = String::new();
    let _ = writeln!(out, "dim={},num_classes={}", rows.cols(), num_classes);
    for (i, label) in labels.iter().enumerate() {
        let _ = write!(out, "{label}");
        for v in rows.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_table(path: &Path) -> Result<TableData, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(DatasetError::Table {
        line: 1,
        message: "missing header".into(),
    })?;
    let mut dim = None;
    let mut num_classes = None;
    for field in header.split(',') {
        let (k, v) = field.split_once('=').ok_or_else(|| DatasetError::Table {
            line: 1,
            message: format!("malformed header field `{field}`"),
        })?;
        let parsed: usize = v.trim().parse().map_err(|_| DatasetError::Table {
            line: 1,
            message: format!("bad integer `{v}`"),
        })?;
        match k.trim() {
            "dim" => dim = Some(parsed),
            "num_classes" => num_classes = Some(parsed),
            other => {
                return Err(DatasetError::Table {
                    line: 1,
                    message: format!("unknown header key `{other}`"),
                })
            }
        }
    }
    let (Some(dim), Some(num_classes)) = (dim, num_classes) else {
        return Err(DatasetError::Table {
            line: 1,
            message: "header needs dim and num_classes".into(),
        });
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| DatasetError::Table {
                line: line_no,
                message: "bad label".into(),
            })?;
        let values: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::Table {
                line: line_no,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(DatasetError::Table {
                line: line_no,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if label >= num_classes {
            return Err(DatasetError::Table {
                line: line_no,
                message: format!("label {label} outside [0, {num_classes})"),
            });
        }
        labels.push(label);
        data.extend(values);
    }
    let rows = Tensor::matrix(labels.len(), dim, data)?;
    Ok(TableData {
        num_classes,
        labels,
        rows,
    })
}
