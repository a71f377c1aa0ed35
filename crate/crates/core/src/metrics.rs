//! Newline-delimited JSON records, one object per line.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Append-only record sink. The in-memory variant keeps lines for callers
/// that do not want files.
pub enum MetricsWriter {
    File { path: PathBuf, out: BufWriter<File> },
    Memory(Vec<String>),
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter::File {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn memory() -> Self {
        MetricsWriter::Memory(Vec::new())
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        match self {
            MetricsWriter::File { path, out } => {
                writeln!(out, "{line}").and_then(|_| out.flush()).map_err(|e| Error::io(&*path, e))
            }
            MetricsWriter::Memory(lines) => {
                lines.push(line);
                Ok(())
            }
        }
    }

    pub fn lines(&self) -> &[String] {
        match self {
            MetricsWriter::File { .. } => &[],
            MetricsWriter::Memory(lines) => lines,
        }
    }
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
