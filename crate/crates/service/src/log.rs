//! Append-only session event logs, one NDJSON file per session.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use gengrade_core::feedback::Highlight;
use gengrade_core::knn::EditScript;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Control,
    Assisted,
}

/// What an assisted grader was shown for one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assist {
    pub neighbour: String,
    pub diff: EditScript,
    pub prefill: Vec<String>,
    pub exact: bool,
    pub distance: usize,
    pub highlights: Vec<Highlight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        grader: String,
        mode: Mode,
        source: String,
        items: Vec<String>,
        at: u64,
    },
    Started {
        index: usize,
        at: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        assist: Option<Assist>,
    },
    Submitted {
        index: usize,
        labels: Vec<String>,
        at: u64,
    },
}

pub struct EventLog {
    file: File,
}

impl EventLog {
    /// Create the log for a new session. Fails if it already exists.
    pub fn create(dir: &Path, id: &str) -> Result<Self, ServiceError> {
        let file = OpenOptions::new().append(true).create_new(true).open(path_for(dir, id))?;
        Ok(EventLog { file })
    }

    pub fn open(dir: &Path, id: &str) -> Result<Self, ServiceError> {
        let file = OpenOptions::new().append(true).open(path_for(dir, id))?;
        Ok(EventLog { file })
    }

    /// Append one event and wait for it to reach the disk.
    pub fn append(&mut self, ev: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(ev).expect("events serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

fn path_for(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ndjson"))
}

/// Every session log under `dir` as `(id, events)`, sorted by id.
///
/// A final line without its newline is a write cut short by a crash and is
/// dropped; anything else that fails to parse is corruption.
pub fn load_all(dir: &Path) -> Result<Vec<(String, Vec<Event>)>, ServiceError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_none_or(|e| e != "ndjson") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        let src = fs::read_to_string(&path)?;
        let complete = src.ends_with('\n');
        let lines: Vec<&str> = src.lines().collect();
        let mut events = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(ev) => events.push(ev),
                Err(_) if i + 1 == lines.len() && !complete => {
                    log::warn!("{}: dropping torn final line", path.display());
                    truncate_torn(&path, src.len() - line.len())?;
                }
                Err(e) => {
                    return Err(ServiceError::Corrupt(format!("{}:{}: {e}", path.display(), i + 1)));
                }
            }
        }
        out.push((id, events));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn truncate_torn(path: &Path, keep: usize) -> Result<(), ServiceError> {
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    Ok(())
}
