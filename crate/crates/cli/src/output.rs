//! Artifact writers: CSV tables, JSON reports, raw f64 arrays with a JSON
//! sidecar, and the pass/fail summary.

use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

/// One named assertion of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Check {
    /// Passes when value <= tolerance.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= tolerance,
            value,
            tolerance,
            detail: String::new(),
        }
    }

    pub fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            value: if passed { 1.0 } else { 0.0 },
            tolerance: 1.0,
            detail: detail.into(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// Files written into one output directory, in creation order.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, OutputError> {
        fs::create_dir_all(dir).map_err(|source| OutputError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), OutputError> {
        let path = self.path(name);
        let err = |source| OutputError::Csv { path: path.clone(), source };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| OutputError::Io {
            path: path.clone(),
            source: e,
        })
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), OutputError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|source| OutputError::Io {
            path: path.clone(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, value).map_err(|source| OutputError::Json {
            path: path.clone(),
            source,
        })?;
        writeln!(w).and_then(|_| w.flush()).map_err(|source| OutputError::Io { path, source })
    }

    /// Row-major little-endian f64 array `name.bin` plus `name.json`.
    pub fn raw(&mut self, name: &str, data: &[f64], columns: &[String]) -> Result<(), OutputError> {
        let bin = format!("{name}.bin");
        let path = self.path(&bin);
        let mut bytes = Vec::with_capacity(8 * data.len());
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|source| OutputError::Io { path, source })?;
        let rows = if columns.is_empty() { 0 } else { data.len() / columns.len() };
        self.json(
            &format!("{name}.json"),
            &serde_json::json!({
                "file": bin,
                "dtype": "f64",
                "byte_order": "little",
                "layout": "row-major",
                "shape": [rows, columns.len()],
                "columns": columns,
            }),
        )
    }
}
