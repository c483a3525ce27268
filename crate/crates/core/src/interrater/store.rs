//! On-disk session storage.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<session_id>/session.json   plan, written once
//! sessions/<session_id>/labels.jsonl   append-only label log
//! ```
//!
//! A label is acknowledged only after its log line has been synced, and the log
//! is replayed on open.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use super::session::{run_model_rater, ImageSource, LabelAck, LabelEntry, StudySession};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::labelspec::ScoringMethod;
use crate::trainer::TrainedModel;

pub const SESSION_FILE: &str = "session.json";
pub const LABEL_LOG: &str = "labels.jsonl";

pub fn sessions_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("sessions")
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

/// Ids of all sessions stored under `data_dir`, sorted.
pub fn list_sessions(data_dir: &Path) -> Result<Vec<String>> {
    let dir = sessions_dir(data_dir);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join(SESSION_FILE).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

#[derive(Debug)]
pub struct StoredSession {
    session: StudySession,
    dir: PathBuf,
    log: File,
}

impl StoredSession {
    pub fn create(data_dir: &Path, session: StudySession) -> Result<Self> {
        if !valid_id(&session.session_id) {
            return Err(Error::Validation(format!(
                "session id `{}` may only contain letters, digits, '-', '_' and '.'",
                session.session_id
            )));
        }
        let dir = sessions_dir(data_dir).join(&session.session_id);
        if dir.join(SESSION_FILE).exists() {
            return Err(Error::Validation(format!("session {} already exists", session.session_id)));
        }
        if session.label_count() > 0 {
            return Err(Error::Validation("a new session must not carry labels".into()));
        }
        write_atomic(&dir.join(SESSION_FILE), serde_json::to_string_pretty(&session)?.as_bytes())?;
        let log = open_log(&dir)?;
        Ok(StoredSession { session, dir, log })
    }

    pub fn open(data_dir: &Path, session_id: &str) -> Result<Self> {
        if !valid_id(session_id) {
            return Err(Error::NotFound(format!("session {session_id}")));
        }
        let dir = sessions_dir(data_dir).join(session_id);
        let plan = dir.join(SESSION_FILE);
        if !plan.is_file() {
            return Err(Error::NotFound(format!("session {session_id}")));
        }
        let text = fs::read_to_string(&plan).map_err(|e| Error::io(&plan, e))?;
        let mut session: StudySession = serde_json::from_str(&text)?;

        let log_path = dir.join(LABEL_LOG);
        if log_path.exists() {
            let file = File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let lines: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&log_path, e))?;
            let last = lines.len();
            for (i, line) in lines.into_iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<LabelEntry>(&line) {
                    Ok(entry) => session.restore_label(entry).map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("{}: {e}", log_path.display()),
                    })?,
                    // A torn final line was never acknowledged.
                    Err(e) if i + 1 == last => {
                        log::warn!("{}: ignoring incomplete last line: {e}", log_path.display());
                    }
                    Err(e) => {
                        return Err(Error::Parse {
                            line: i + 1,
                            message: format!("{}: {e}", log_path.display()),
                        })
                    }
                }
            }
        }
        let log = open_log(&dir)?;
        Ok(StoredSession { session, dir, log })
    }

    pub fn session(&self) -> &StudySession {
        &self.session
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(&mut self, entries: &[LabelEntry]) -> Result<()> {
        let mut buf = String::new();
        for e in entries {
            buf.push_str(&serde_json::to_string(e)?);
            buf.push('\n');
        }
        let path = self.dir.join(LABEL_LOG);
        self.log.write_all(buf.as_bytes()).map_err(|e| Error::io(&path, e))?;
        self.log.sync_data().map_err(|e| Error::io(&path, e))
    }

    /// Validates, persists and then applies one label.
    pub fn record_label(
        &mut self,
        rater_id: &str,
        image_id: &str,
        method: ScoringMethod,
        label: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<LabelAck> {
        let ack = self.session.record_label(rater_id, image_id, method, label, timestamp)?;
        let entry = self
            .session
            .labels()
            .find(|e| e.rater_id == rater_id && e.image_id == image_id && e.method == method)
            .cloned()
            .expect("label was just recorded");
        if let Err(e) = self.append(&[entry]) {
            self.session.remove_label(rater_id, image_id, method);
            return Err(e);
        }
        Ok(ack)
    }

    pub fn run_model_rater(
        &mut self,
        rater_id: &str,
        model: &TrainedModel,
        images: &dyn ImageSource,
        timestamp: DateTime<Utc>,
    ) -> Result<usize> {
        let added = run_model_rater(&mut self.session, rater_id, model, images, timestamp)?;
        if let Err(e) = self.append(&added) {
            for entry in &added {
                self.session.remove_label(&entry.rater_id, &entry.image_id, entry.method);
            }
            return Err(e);
        }
        Ok(added.len())
    }
}

fn open_log(dir: &Path) -> Result<File> {
    let path = dir.join(LABEL_LOG);
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}
