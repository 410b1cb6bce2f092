//! Grading-session service: hands solutions to graders (optionally with the
//! nearest in-simulator neighbour, a diff and prefilled labels), records
//! their labels with server-side timing, and exports the results.
//!
//! State lives in one append-only event log per session and is rebuilt from
//! those logs at startup.

mod api;
pub mod clock;
pub mod log;
pub mod session;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use gengrade_core::feedback::{feedback, FeedbackError};
use gengrade_core::nap::InferenceModel;
use gengrade_core::simulator::Simulator;
use serde::Serialize;
use thiserror::Error;

pub use api::{router, serve};
pub use clock::{Clock, ManualClock, SystemClock};
pub use log::{Assist, Event, Mode};
pub use session::{Session, SessionSummary};

use crate::log::EventLog;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown item source {0}")]
    UnknownSource(String),
    #[error("assisted mode needs a loaded model and grammar")]
    NoModel,
    #[error("item {index} out of range for a session of {len} items")]
    OutOfRange { index: usize, len: usize },
    #[error("item {0} has not been fetched")]
    NotFetched(usize),
    #[error("item {0} was already submitted with different labels")]
    Conflict(usize),
    #[error("{0}")]
    BadRequest(String),
    #[error("inference failed: {0}")]
    Inference(#[from] FeedbackError),
    #[error("corrupt session log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::UnknownSession(_) | ServiceError::UnknownSource(_) => "not_found",
            ServiceError::OutOfRange { .. } => "out_of_range",
            ServiceError::NoModel | ServiceError::BadRequest(_) => "bad_request",
            ServiceError::NotFetched(_) | ServiceError::Conflict(_) => "conflict",
            ServiceError::Inference(_) | ServiceError::Corrupt(_) | ServiceError::Io(_) => "internal",
        }
    }
}

/// Model and grammar used to build assisted payloads.
pub struct Assistant {
    pub model: InferenceModel,
    pub sim: Simulator,
}

pub struct Config {
    pub data_dir: PathBuf,
    /// Named item lists sessions can be created from.
    pub sources: BTreeMap<String, Vec<String>>,
    pub assistant: Option<Assistant>,
    /// Gold labels by solution text, for error counts in exports.
    pub gold: Option<HashMap<String, Vec<String>>>,
}

struct Entry {
    session: Session,
    log: EventLog,
}

pub struct Service {
    cfg: Config,
    clock: Arc<dyn Clock>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Entry>>>>,
    labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemView {
    pub session: String,
    pub index: usize,
    pub total: usize,
    pub solution: String,
    pub started_at: u64,
    pub submitted: Option<Vec<String>>,
    pub submitted_at: Option<u64>,
    pub read_only: bool,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub assist: Option<Assist>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubmitAck {
    pub session: String,
    pub index: usize,
    pub labels: Vec<String>,
    pub submitted_at: u64,
    pub duration_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemExport {
    pub index: usize,
    pub solution: String,
    pub labels: Option<Vec<String>>,
    pub started_at: Option<u64>,
    pub submitted_at: Option<u64>,
    pub duration_ms: Option<u64>,
    /// Whether the labels differ from gold; absent without gold.
    pub error: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionExport {
    pub id: String,
    pub grader: String,
    pub mode: Mode,
    pub items: Vec<ItemExport>,
    pub submitted: usize,
    pub total_duration_ms: u64,
    pub mean_duration_ms: Option<f64>,
    pub errors: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeAggregate {
    pub mode: Mode,
    pub sessions: usize,
    pub items: usize,
    /// Mean over all submitted items of this mode.
    pub mean_item_duration_ms: Option<f64>,
    /// Mean of per-session total grading time.
    pub mean_session_duration_ms: Option<f64>,
    pub errors: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportDoc {
    pub sessions: Vec<SessionExport>,
    pub modes: Vec<ModeAggregate>,
}

fn mean(xs: &[u64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<u64>() as f64 / xs.len() as f64)
}

fn normalize(labels: Vec<String>) -> Vec<String> {
    labels.into_iter().collect::<BTreeSet<_>>().into_iter().collect()
}

impl Service {
    /// Open the service over `cfg.data_dir`, replaying every session log.
    pub fn open(cfg: Config, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&cfg.data_dir)?;
        let mut sessions = BTreeMap::new();
        for (id, events) in log::load_all(&cfg.data_dir)? {
            let session = Session::replay(&events)?;
            if session.id != id {
                return Err(ServiceError::Corrupt(format!("log {id} holds session {}", session.id)));
            }
            let log = EventLog::open(&cfg.data_dir, &id)?;
            sessions.insert(id, Arc::new(Mutex::new(Entry { session, log })));
        }
        let mut labels = Vec::new();
        if let Some(a) = &cfg.assistant {
            labels = a.sim.label_vocabulary();
        }
        for ls in cfg.gold.iter().flat_map(|g| g.values()) {
            for l in ls {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        Ok(Service {
            cfg,
            clock,
            sessions: RwLock::new(sessions),
            labels,
        })
    }

    pub fn sources(&self) -> BTreeMap<String, usize> {
        self.cfg.sources.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ServiceError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    pub fn create_session(&self, grader: &str, mode: Mode, source: &str) -> Result<SessionSummary, ServiceError> {
        let items = self
            .cfg
            .sources
            .get(source)
            .ok_or_else(|| ServiceError::UnknownSource(source.to_string()))?;
        if mode == Mode::Assisted && self.cfg.assistant.is_none() {
            return Err(ServiceError::NoModel);
        }
        let mut table = self.sessions.write().expect("session table poisoned");
        let id = format!("s{:06}", table.len() + 1);
        let ev = Event::Created {
            id: id.clone(),
            grader: grader.to_string(),
            mode,
            source: source.to_string(),
            items: items.clone(),
            at: self.clock.now_ms(),
        };
        let mut log = EventLog::create(&self.cfg.data_dir, &id)?;
        log.append(&ev)?;
        let session = Session::from_created(&ev)?;
        let summary = session.summary(self.labels.clone());
        table.insert(id, Arc::new(Mutex::new(Entry { session, log })));
        Ok(summary)
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, ServiceError> {
        let entry = self.entry(id)?;
        let e = entry.lock().expect("session poisoned");
        Ok(e.session.summary(self.labels.clone()))
    }

    /// Fetch an item; the first fetch stamps its start time and fixes the
    /// assisted payload.
    pub fn get_item(&self, id: &str, index: usize) -> Result<ItemView, ServiceError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock().expect("session poisoned");
        let item = e.session.item(index)?;
        if item.started_at.is_none() {
            let assist = match e.session.mode {
                Mode::Control => None,
                Mode::Assisted => Some(self.assist(&item.text)?),
            };
            let ev = Event::Started {
                index,
                at: self.clock.now_ms(),
                assist,
            };
            e.log.append(&ev)?;
            e.session.apply(&ev)?;
        }
        let item = &e.session.items[index];
        Ok(ItemView {
            session: id.to_string(),
            index,
            total: e.session.items.len(),
            solution: item.text.clone(),
            started_at: item.started_at.expect("stamped above"),
            submitted: item.submitted.as_ref().map(|s| s.0.clone()),
            submitted_at: item.submitted.as_ref().map(|s| s.1),
            read_only: item.submitted.is_some(),
            assist: item.assist.clone(),
        })
    }

    fn assist(&self, text: &str) -> Result<Assist, ServiceError> {
        let a = self.cfg.assistant.as_ref().ok_or(ServiceError::NoModel)?;
        let r = feedback(&a.model, &a.sim, text)?;
        Ok(Assist {
            neighbour: r.neighbour,
            diff: r.diff,
            prefill: r.labels,
            exact: r.exact,
            distance: r.distance,
            highlights: r.highlights,
        })
    }

    /// Record labels for a fetched item. Resubmitting the same label set is a
    /// no-op; a different set is rejected.
    pub fn submit(&self, id: &str, index: usize, labels: Vec<String>) -> Result<SubmitAck, ServiceError> {
        let labels = normalize(labels);
        let entry = self.entry(id)?;
        let mut e = entry.lock().expect("session poisoned");
        let item = e.session.item(index)?;
        let start = item.started_at.ok_or(ServiceError::NotFetched(index))?;
        let at = match &item.submitted {
            Some((prev, _)) if *prev != labels => return Err(ServiceError::Conflict(index)),
            Some((_, at)) => *at,
            None => {
                // A wall clock may step backwards; timing stays monotone per item.
                let at = self.clock.now_ms().max(start);
                let ev = Event::Submitted {
                    index,
                    labels: labels.clone(),
                    at,
                };
                e.log.append(&ev)?;
                e.session.apply(&ev)?;
                at
            }
        };
        Ok(SubmitAck {
            session: id.to_string(),
            index,
            labels,
            submitted_at: at,
            duration_ms: at - start,
        })
    }

    /// Snapshot of a session's state, as rebuilt from its log.
    pub fn session(&self, id: &str) -> Result<Session, ServiceError> {
        let entry = self.entry(id)?;
        let e = entry.lock().expect("session poisoned");
        Ok(e.session.clone())
    }

    pub fn export(&self, ids: &[String]) -> Result<ExportDoc, ServiceError> {
        if ids.is_empty() {
            return Err(ServiceError::BadRequest("no sessions requested".into()));
        }
        let sessions: Vec<Session> = ids.iter().map(|id| self.session(id)).collect::<Result<_, _>>()?;
        let gold = self.cfg.gold.as_ref();
        let mut out = Vec::new();
        for s in &sessions {
            let items: Vec<ItemExport> = s
                .items
                .iter()
                .enumerate()
                .map(|(index, it)| {
                    let error = match (gold.and_then(|g| g.get(&it.text)), &it.submitted) {
                        (Some(g), Some((labels, _))) => Some(normalize(g.clone()) != *labels),
                        _ => None,
                    };
                    ItemExport {
                        index,
                        solution: it.text.clone(),
                        labels: it.submitted.as_ref().map(|s| s.0.clone()),
                        started_at: it.started_at,
                        submitted_at: it.submitted.as_ref().map(|s| s.1),
                        duration_ms: it.submitted.as_ref().zip(it.started_at).map(|(s, start)| s.1 - start),
                        error,
                    }
                })
                .collect();
            let durations: Vec<u64> = items.iter().filter_map(|i| i.duration_ms).collect();
            out.push(SessionExport {
                id: s.id.clone(),
                grader: s.grader.clone(),
                mode: s.mode,
                submitted: durations.len(),
                total_duration_ms: durations.iter().sum(),
                mean_duration_ms: mean(&durations),
                errors: gold.map(|_| items.iter().filter(|i| i.error == Some(true)).count()),
                items,
            });
        }
        let mut modes = Vec::new();
        for mode in [Mode::Control, Mode::Assisted] {
            let of: Vec<&SessionExport> = out.iter().filter(|s| s.mode == mode).collect();
            if of.is_empty() {
                continue;
            }
            let items: Vec<u64> = of.iter().flat_map(|s| s.items.iter().filter_map(|i| i.duration_ms)).collect();
            let totals: Vec<u64> = of.iter().map(|s| s.total_duration_ms).collect();
            modes.push(ModeAggregate {
                mode,
                sessions: of.len(),
                items: items.len(),
                mean_item_duration_ms: mean(&items),
                mean_session_duration_ms: mean(&totals),
                errors: gold.map(|_| of.iter().filter_map(|s| s.errors).sum()),
            });
        }
        Ok(ExportDoc { sessions: out, modes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service(dir: &std::path::Path, clock: ManualClock) -> Service {
        let cfg = Config {
            data_dir: dir.to_path_buf(),
            sources: BTreeMap::from([("s".to_string(), vec!["a".to_string(), "b".to_string()])]),
            assistant: None,
            gold: Some(HashMap::from([("a".to_string(), vec!["x".to_string()])])),
        };
        Service::open(cfg, Arc::new(clock)).unwrap()
    }

    #[test]
    fn submit_rules() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::new(1000);
        let svc = service(dir.path(), clock.clone());
        let id = svc.create_session("g", Mode::Control, "s").unwrap().id;
        assert!(matches!(svc.submit(&id, 0, vec![]), Err(ServiceError::NotFetched(0))));
        svc.get_item(&id, 0).unwrap();
        clock.advance(250);
        let ack = svc.submit(&id, 0, vec!["x".into(), "x".into()]).unwrap();
        assert_eq!((ack.duration_ms, ack.labels.clone()), (250, vec!["x".to_string()]));
        clock.advance(5);
        assert_eq!(svc.submit(&id, 0, vec!["x".into()]).unwrap(), ack);
        assert!(matches!(svc.submit(&id, 0, vec!["y".into()]), Err(ServiceError::Conflict(0))));
        assert!(matches!(svc.get_item(&id, 2), Err(ServiceError::OutOfRange { index: 2, len: 2 })));
        assert!(matches!(svc.create_session("g", Mode::Assisted, "s"), Err(ServiceError::NoModel)));
        assert!(matches!(svc.create_session("g", Mode::Control, "nope"), Err(ServiceError::UnknownSource(_))));
    }

    #[test]
    fn export_counts_errors_against_gold() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path(), ManualClock::new(0));
        let id = svc.create_session("g", Mode::Control, "s").unwrap().id;
        svc.get_item(&id, 0).unwrap();
        svc.submit(&id, 0, vec![]).unwrap();
        let doc = svc.export(&[id]).unwrap();
        assert_eq!(doc.sessions[0].errors, Some(1));
        assert_eq!(doc.sessions[0].items[1].error, None);
        assert_eq!(doc.modes.len(), 1);
        assert!(matches!(svc.export(&[]), Err(ServiceError::BadRequest(_))));
    }
}
