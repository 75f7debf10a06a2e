//! Append-only preference record log: one JSON `PreferenceRecord` per line.
//! A record is appended again whenever it changes (for example when a
//! profile pass archives it); the last line for an id wins on load.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use tidyloop_core::preference::{PreferenceRecord, PreferenceStore};

use crate::error::CliError;

pub struct PreferenceLog {
    path: PathBuf,
}

impl PreferenceLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, records: &[PreferenceRecord]) -> Result<(), CliError> {
        if records.is_empty() {
            return Ok(());
        }
        let mut f =
            OpenOptions::new().create(true).append(true).open(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| CliError::io(&self.path, e))?;
        f.sync_data().map_err(|e| CliError::io(&self.path, e))
    }

    /// Records in first-seen order, each at its latest version.
    pub fn read(&self) -> Result<Vec<PreferenceRecord>, CliError> {
        let f = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::io(&self.path, e)),
        };
        let mut out: Vec<PreferenceRecord> = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| CliError::io(&self.path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PreferenceRecord = serde_json::from_str(&line).map_err(|e| {
                CliError::new("InvalidPreferenceLog", format!("{}:{}: {e}", self.path.display(), n + 1))
            })?;
            match out.iter_mut().find(|x| x.id == r.id) {
                Some(slot) => *slot = r,
                None => out.push(r),
            }
        }
        Ok(out)
    }

    pub fn load_store(&self, token_budget: usize) -> Result<PreferenceStore, CliError> {
        Ok(PreferenceStore::from_records(self.read()?, token_budget))
    }
}

/// Records of `after` that are new or differ from `before`.
pub fn changed(before: &[PreferenceRecord], after: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    after.iter().filter(|r| !before.contains(r)).cloned().collect()
}
