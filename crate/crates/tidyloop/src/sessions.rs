//! Disk-backed session registry with one lock per session.
//!
//! Layout under the data directory:
//! - `sessions/<id>.json`: the session document (also its replayable transcript)
//! - `sessions/<id>.prefs.jsonl`: the session's append-only preference log

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use tidyloop_core::preference::PreferenceRecord;
use tidyloop_core::session::Session;

use crate::error::CliError;
use crate::formats::{parse_transcript, transcript_text};
use crate::pref_log::{changed, PreferenceLog};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    NotFound(String),
    #[error("session `{0}` already exists")]
    Exists(String),
    #[error("invalid session id `{0}`")]
    InvalidId(String),
    #[error("{0}")]
    Io(CliError),
}

pub type SessionHandle = Arc<Mutex<Session>>;

pub struct SessionStore {
    dir: PathBuf,
    live: Mutex<HashMap<String, SessionHandle>>,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn open(data_dir: &Path) -> Result<Self, CliError> {
        let dir = data_dir.join("sessions");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self { dir, live: Mutex::new(HashMap::new()) })
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn preference_log(&self, id: &str) -> PreferenceLog {
        PreferenceLog::new(self.dir.join(format!("{id}.prefs.jsonl")))
    }

    pub fn create(&self, session: Session) -> Result<SessionHandle, StoreError> {
        if !valid_id(&session.id) {
            return Err(StoreError::InvalidId(session.id));
        }
        let mut live = self.live.lock().expect("registry lock");
        if live.contains_key(&session.id) || self.session_path(&session.id).exists() {
            return Err(StoreError::Exists(session.id));
        }
        self.persist(&[], &session)?;
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        live.insert(id, handle.clone());
        Ok(handle)
    }

    /// The live session, loading it from disk after a restart.
    pub fn get(&self, id: &str) -> Result<SessionHandle, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(id.to_string()));
        }
        let mut live = self.live.lock().expect("registry lock");
        if let Some(h) = live.get(id) {
            return Ok(h.clone());
        }
        let path = self.session_path(id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(id.to_string())),
            Err(e) => return Err(StoreError::Io(CliError::io(&path, e))),
        };
        let session = parse_transcript(&text).map_err(StoreError::Io)?;
        let handle = Arc::new(Mutex::new(session));
        live.insert(id.to_string(), handle.clone());
        Ok(handle)
    }

    /// Writes the session atomically and appends changed preference records.
    pub fn persist(&self, before: &[PreferenceRecord], s: &Session) -> Result<(), StoreError> {
        let path = self.session_path(&s.id);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, transcript_text(s)).map_err(|e| StoreError::Io(CliError::io(&tmp, e)))?;
        std::fs::rename(&tmp, &path).map_err(|e| StoreError::Io(CliError::io(&path, e)))?;
        self.preference_log(&s.id).append(&changed(before, &s.store.records)).map_err(StoreError::Io)
    }

    pub fn ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
            .collect();
        ids.sort();
        ids
    }
}
