//! Column-ordered result tables and their CSV form.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // shortest representation that parses back to the same value, always with '.'
            Cell::Float(v) => write!(f, "{v:?}"),
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Float(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            Cell::Text(s) => s.parse().ok(),
        }
    }
}

/// A table with a fixed column order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::InvalidArgument(format!("row has {} cells, table has {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric values of a column (non-numeric cells become NaN).
    pub fn floats(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.column(name)?;
        Some(self.rows.iter().map(|r| r[j].as_f64().unwrap_or(f64::NAN)).collect())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let err = |e: csv::Error| Error::Io { path: "<memory>".into(), message: e.to_string() };
        w.write_record(&self.columns).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.to_string())).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io { path: "<memory>".into(), message: e.to_string() })?;
        String::from_utf8(bytes).map_err(|e| Error::Io { path: "<memory>".into(), message: e.to_string() })
    }
}

/// Write `table` as RFC-4180 CSV with a header row and LF line endings.
pub fn emit_csv(table: &Table, path: &Path) -> Result<()> {
    let text = table.to_csv_string()?;
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Read a CSV written by [`emit_csv`]; numeric-looking fields become floats.
pub fn read_csv(path: &Path) -> Result<Table> {
    let r = csv::Reader::from_path(path).map_err(|e| Error::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_records(r, &path.display().to_string())
}

/// [`read_csv`] for text already in memory.
pub fn parse_csv(text: &str) -> Result<Table> {
    parse_records(csv::Reader::from_reader(text.as_bytes()), "<memory>")
}

fn parse_records<R: std::io::Read>(mut r: csv::Reader<R>, source: &str) -> Result<Table> {
    let err = |m: String| Error::Io { path: source.to_string(), message: m };
    let columns: Vec<String> = r.headers().map_err(|e| err(e.to_string()))?.iter().map(|c| c.trim().to_string()).collect();
    let mut t = Table { columns, rows: Vec::new() };
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if !f.is_empty() => Cell::Float(v),
                _ => Cell::Text(f.to_string()),
            })
            .collect();
        t.push(row)?;
    }
    Ok(t)
}
