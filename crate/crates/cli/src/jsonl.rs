use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Reads a JSON-lines file; errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

/// Complete, parseable lines at the head of `path`, plus their byte length.
/// A torn final line from an interrupted write is not counted.
fn valid_prefix<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    let mut valid = 0usize;
    let mut start = 0usize;
    while let Some(off) = bytes[start..].iter().position(|&b| b == b'\n') {
        let line = &bytes[start..start + off];
        match serde_json::from_slice(line) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        start += off + 1;
        valid = start;
    }
    Ok((records, valid as u64))
}

/// Append-only JSON-lines output. Each record is written and flushed as a
/// whole line, so an interrupted run leaves at most one torn line behind.
pub struct JsonlWriter {
    file: File,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Keeps the existing records when `resume` is set, dropping any torn tail.
    pub fn open<T: DeserializeOwned>(path: &Path, resume: bool) -> Result<(Self, Vec<T>)> {
        if !resume || !path.exists() {
            return Ok((Self::create(path)?, Vec::new()));
        }
        let (records, valid) = valid_prefix(path)?;
        Self::truncate_to(path, valid)?;
        Ok((Self::append(path)?, records))
    }

    /// Keeps only the first `n` lines of an existing file.
    pub fn open_keeping_lines(path: &Path, n: usize) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cut = 0usize;
        for _ in 0..n {
            match bytes[cut..].iter().position(|&b| b == b'\n') {
                Some(off) => cut += off + 1,
                None => break,
            }
        }
        Self::truncate_to(path, cut as u64)?;
        Self::append(path)
    }

    fn truncate_to(path: &Path, len: u64) -> Result<()> {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        f.set_len(len)
            .with_context(|| format!("truncating {}", path.display()))?;
        Ok(())
    }

    fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .with_context(|| format!("writing {}", self.path.display()))
    }
}
