//! Append-only per-session event files with periodic snapshots.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::{apply, project, Event, SessionView};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session store: {0}")]
    Io(#[from] std::io::Error),
    #[error("session `{session}` line {line}: {message}")]
    Corrupt { session: String, line: usize, message: String },
    #[error("snapshot for `{session}`: {message}")]
    Snapshot { session: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Seq of the last event folded into `view`.
    pub upto_seq: u64,
    pub view: SessionView,
}

#[derive(Debug, Clone)]
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let dir = root.join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    fn snapshot_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.snapshot.json"))
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.log_path(session_id).is_file()
    }

    /// Session ids with an event log, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".jsonl") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Drops a torn trailing fragment so later appends start on a fresh line.
    pub fn repair(&self, session_id: &str) -> Result<(), StoreError> {
        let path = self.log_path(session_id);
        let bytes = fs::read(&path)?;
        if bytes.is_empty() || bytes.ends_with(b"\n") {
            return Ok(());
        }
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        tracing::warn!(session = session_id, dropped = bytes.len() - keep, "truncating torn event line");
        OpenOptions::new().write(true).open(&path)?.set_len(keep as u64)?;
        Ok(())
    }

    /// Appends one event and syncs it to disk.
    pub fn append(&self, session_id: &str, event: &Event) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.log_path(session_id))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    /// All events of a session. A final line without a newline is a torn
    /// write and is skipped if it does not parse.
    pub fn read_events(&self, session_id: &str) -> Result<Vec<Event>, StoreError> {
        let reader = BufReader::new(File::open(self.log_path(session_id))?);
        let mut out = Vec::new();
        let mut lines = reader.split(b'\n').enumerate().peekable();
        while let Some((i, line)) = lines.next() {
            let line = line?;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice::<Event>(&line) {
                Ok(e) => out.push(e),
                Err(_) if lines.peek().is_none() => {
                    tracing::warn!(session = session_id, line = i + 1, "skipping torn final event line");
                }
                Err(e) => {
                    return Err(StoreError::Corrupt { session: session_id.to_string(), line: i + 1, message: e.to_string() })
                }
            }
        }
        Ok(out)
    }

    pub fn write_snapshot(&self, session_id: &str, snapshot: &Snapshot) -> Result<(), StoreError> {
        let path = self.snapshot_path(session_id);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(snapshot).expect("snapshots serialize"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_snapshot(&self, session_id: &str) -> Result<Option<Snapshot>, StoreError> {
        let path = self.snapshot_path(session_id);
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = fs::read(path)?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Snapshot { session: session_id.to_string(), message: e.to_string() })
    }

    /// Projection from the newest snapshot plus the events after it.
    pub fn load(&self, session_id: &str) -> Result<SessionView, StoreError> {
        let events = self.read_events(session_id)?;
        let snapshot = match self.read_snapshot(session_id) {
            Ok(s) => s,
            Err(e) => {
                tracing::warn!(error = %e, "ignoring unreadable snapshot");
                None
            }
        };
        Ok(match snapshot {
            Some(s) if events.iter().any(|e| e.seq == s.upto_seq) => {
                let mut view = s.view;
                for e in events.iter().filter(|e| e.seq > s.upto_seq) {
                    apply(&mut view, e);
                }
                view
            }
            _ => project(&events),
        })
    }

    /// Projection folded from the full event log, ignoring snapshots.
    pub fn replay(&self, session_id: &str) -> Result<SessionView, StoreError> {
        Ok(project(&self.read_events(session_id)?))
    }
}
