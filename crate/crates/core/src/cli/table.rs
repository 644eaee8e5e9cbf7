use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Header stamped into every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub artifact: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Provenance {
            artifact: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            notes: Vec::new(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    fn comment_lines(&self, prefix: &str) -> String {
        let mut s = format!(
            "{prefix} {} {}\n{prefix} config {}\n{prefix} seed {}\n",
            self.artifact, self.version, self.config_hash, self.seed
        );
        for note in &self.notes {
            s.push_str(&format!("{prefix} note {note}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl Cell {
    pub fn as_f64(self) -> f64 {
        match self {
            Cell::Int(v) => v as f64,
            Cell::Float(v) => v,
        }
    }

    // `Display` for f64 is the shortest representation that round-trips.
    fn render(self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub provenance: Provenance,
}

impl ResultTable {
    pub fn new(columns: &[&str], provenance: Provenance) -> Self {
        ResultTable {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            provenance,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "ragged result row");
        self.rows.push(row);
    }

    /// `(column[x], column[y])` pairs.
    pub fn points(&self, x: &str, y: &str) -> Vec<(f64, f64)> {
        let xi = self.column_index(x);
        let yi = self.column_index(y);
        self.rows
            .iter()
            .map(|r| (r[xi].as_f64(), r[yi].as_f64()))
            .collect()
    }

    fn column_index(&self, name: &str) -> usize {
        self.columns
            .iter()
            .position(|c| c == name)
            .unwrap_or_else(|| panic!("no column '{name}'"))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = self.provenance.comment_lines("#");
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record(&self.columns)
            .and_then(|_| {
                self.rows
                    .iter()
                    .try_for_each(|r| writer.write_record(r.iter().map(|c| c.render())))
            })
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        let body = writer
            .into_inner()
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }
}

pub fn svg_with_provenance(svg: &str, provenance: &Provenance) -> String {
    let mut s = String::from("<!--\n");
    s.push_str(&provenance.comment_lines(" "));
    s.push_str("-->\n");
    s.push_str(svg);
    s
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
