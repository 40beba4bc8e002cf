//! CSV ingestion with a missing-value token.

use std::path::Path;

use csv::{ReaderBuilder, Trim};

use crate::error::{CliError, Result};

pub const DEFAULT_MISSING: &str = "NA";

/// A row-major numeric table; `mask` is false at missing cells, which hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Table {
    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Per-element mask for elements of `width` consecutive cells: an
    /// element counts as observed only if all of its cells are present.
    pub fn element_mask(&self, width: usize) -> Vec<bool> {
        self.mask.chunks(width.max(1)).map(|c| c.iter().all(|&m| m)).collect()
    }
}

/// Read a headerless rectangular CSV. Row and column numbers in errors are
/// 1-based.
pub fn load_data_csv(path: &Path, missing: &str) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let (mut rows, mut cols) = (0, 0);
    let (mut values, mut mask) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record?;
        rows += 1;
        if rows == 1 {
            cols = record.len();
        } else if record.len() != cols {
            return Err(CliError::RaggedRow {
                file: path.to_path_buf(),
                row: rows,
                expected: cols,
                found: record.len(),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if cell == missing {
                values.push(0.0);
                mask.push(false);
                continue;
            }
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            let v = v.ok_or_else(|| CliError::NonNumeric {
                file: path.to_path_buf(),
                row: rows,
                column: c + 1,
                value: cell.to_string(),
            })?;
            values.push(v);
            mask.push(true);
        }
    }
    Ok(Table {
        rows,
        cols,
        values,
        mask,
    })
}
