use serde::Serialize;

use crate::log::{Assist, Event, Mode};
use crate::ServiceError;

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub text: String,
    pub started_at: Option<u64>,
    pub assist: Option<Assist>,
    pub submitted: Option<(Vec<String>, u64)>,
}

/// In-memory state of one session. Live updates and log replay both go
/// through [`Session::apply`], so a replayed session equals the one that
/// wrote the log.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub grader: String,
    pub mode: Mode,
    pub source: String,
    pub created_at: u64,
    pub items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub grader: String,
    pub mode: Mode,
    pub source: String,
    pub items: usize,
    pub submitted: usize,
    /// Label vocabulary for the checklist.
    pub labels: Vec<String>,
}

impl Session {
    pub fn from_created(ev: &Event) -> Result<Self, ServiceError> {
        match ev {
            Event::Created {
                id,
                grader,
                mode,
                source,
                items,
                at,
            } => Ok(Session {
                id: id.clone(),
                grader: grader.clone(),
                mode: *mode,
                source: source.clone(),
                created_at: *at,
                items: items
                    .iter()
                    .map(|t| Item {
                        text: t.clone(),
                        started_at: None,
                        assist: None,
                        submitted: None,
                    })
                    .collect(),
            }),
            _ => Err(ServiceError::Corrupt("session log does not start with its creation".into())),
        }
    }

    pub fn replay(events: &[Event]) -> Result<Self, ServiceError> {
        let (first, rest) = events
            .split_first()
            .ok_or_else(|| ServiceError::Corrupt("empty session log".into()))?;
        let mut s = Session::from_created(first)?;
        for ev in rest {
            s.apply(ev)?;
        }
        Ok(s)
    }

    pub fn item(&self, index: usize) -> Result<&Item, ServiceError> {
        self.items.get(index).ok_or(ServiceError::OutOfRange {
            index,
            len: self.items.len(),
        })
    }

    pub fn apply(&mut self, ev: &Event) -> Result<(), ServiceError> {
        match ev {
            Event::Created { .. } => return Err(ServiceError::Corrupt("repeated creation event".into())),
            Event::Started { index, at, assist } => {
                self.item(*index)?;
                let item = &mut self.items[*index];
                if item.started_at.is_some() {
                    return Err(ServiceError::Corrupt(format!("item {index} started twice")));
                }
                if (self.mode == Mode::Control) != assist.is_none() {
                    return Err(ServiceError::Corrupt(format!("item {index} payload does not fit the mode")));
                }
                item.started_at = Some(*at);
                item.assist = assist.clone();
            }
            Event::Submitted { index, labels, at } => {
                self.item(*index)?;
                let item = &mut self.items[*index];
                match (item.started_at, &item.submitted) {
                    (None, _) => return Err(ServiceError::NotFetched(*index)),
                    (_, Some(_)) => return Err(ServiceError::Corrupt(format!("item {index} submitted twice"))),
                    (Some(start), None) if *at < start => {
                        return Err(ServiceError::Corrupt(format!("item {index} submitted before it started")))
                    }
                    _ => item.submitted = Some((labels.clone(), *at)),
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self, labels: Vec<String>) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            grader: self.grader.clone(),
            mode: self.mode,
            source: self.source.clone(),
            items: self.items.len(),
            submitted: self.items.iter().filter(|i| i.submitted.is_some()).count(),
            labels,
        }
    }
}
