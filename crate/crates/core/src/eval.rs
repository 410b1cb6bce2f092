//! Feedback quality by frequency region.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Region, ZipfPartition};
use crate::feedback::{labels_unchecked, nearest_in_simulator, FeedbackError};
use crate::knn::{KnnError, KnnIndex};
use crate::nap::InferenceModel;
use crate::par::Exec;
use crate::simulator::Simulator;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what}: expected {expected} entries, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("solution {0} is not covered by the partition")]
    Uncovered(usize),
    #[error("held-out set is empty")]
    Empty,
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Knn(#[from] KnnError),
}

/// Confusion counts over (solution, label) decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    fn add(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub count: usize,
    pub confusion: Confusion,
    /// `None` when the region holds no solutions.
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl RegionMetrics {
    fn from_confusion(count: usize, c: Confusion) -> Self {
        if count == 0 {
            return RegionMetrics::default();
        }
        let decisions = c.tp + c.fp + c.fn_ + c.tn;
        let accuracy = if decisions == 0 { 1.0 } else { (c.tp + c.tn) as f64 / decisions as f64 };
        // Nothing predicted (or nothing to find) counts as perfect only when
        // the other side is empty too.
        let precision = ratio(c.tp, c.tp + c.fp, c.fn_ == 0);
        let recall = ratio(c.tp, c.tp + c.fn_, c.fp == 0);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RegionMetrics {
            count,
            confusion: c,
            accuracy: Some(accuracy),
            precision: Some(precision),
            recall: Some(recall),
            f1: Some(f1),
        }
    }
}

fn ratio(num: u64, den: u64, perfect_if_empty: bool) -> f64 {
    match den {
        0 if perfect_if_empty => 1.0,
        0 => 0.0,
        _ => num as f64 / den as f64,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub head: RegionMetrics,
    pub body: RegionMetrics,
    pub tail: RegionMetrics,
    pub overall: RegionMetrics,
    pub exact_rate: Option<f64>,
}

impl EvalReport {
    pub fn region(&self, r: Region) -> &RegionMetrics {
        match r {
            Region::Head => &self.head,
            Region::Body => &self.body,
            Region::Tail => &self.tail,
        }
    }
}

fn confusion(pred: &BTreeSet<&str>, gold: &BTreeSet<&str>, universe: usize) -> Confusion {
    let tp = pred.intersection(gold).count() as u64;
    let fp = pred.len() as u64 - tp;
    let fn_ = gold.len() as u64 - tp;
    Confusion {
        tp,
        fp,
        fn_,
        tn: universe as u64 - tp - fp - fn_,
    }
}

/// Micro-averaged label metrics per region. Every label in `labels` or in
/// any prediction or gold set is one binary decision per solution.
pub fn feedback_metrics<S: AsRef<str>, L: AsRef<str>>(
    texts: &[S],
    predictions: &[Vec<L>],
    golds: &[Vec<L>],
    partition: &ZipfPartition,
    labels: &[String],
) -> Result<EvalReport, EvalError> {
    for (what, n) in [("predictions", predictions.len()), ("golds", golds.len())] {
        if n != texts.len() {
            return Err(EvalError::LengthMismatch {
                what,
                expected: texts.len(),
                found: n,
            });
        }
    }
    let mut universe: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    for set in predictions.iter().chain(golds) {
        universe.extend(set.iter().map(AsRef::as_ref));
    }
    let lookup = partition.lookup();
    let mut counts = [0usize; 3];
    let mut conf = [Confusion::default(); 3];
    for (i, text) in texts.iter().enumerate() {
        let region = *lookup.get(text.as_ref()).ok_or(EvalError::Uncovered(i))?;
        let ix = region as usize;
        let p = predictions[i].iter().map(AsRef::as_ref).collect();
        let g = golds[i].iter().map(AsRef::as_ref).collect();
        counts[ix] += 1;
        conf[ix].add(confusion(&p, &g, universe.len()));
    }
    let mut total = Confusion::default();
    for c in conf {
        total.add(c);
    }
    Ok(EvalReport {
        head: RegionMetrics::from_confusion(counts[0], conf[0]),
        body: RegionMetrics::from_confusion(counts[1], conf[1]),
        tail: RegionMetrics::from_confusion(counts[2], conf[2]),
        overall: RegionMetrics::from_confusion(texts.len(), total),
        exact_rate: None,
    })
}

/// Fraction of held-out records whose greedy parse replays to their text.
pub fn exact_rate(model: &InferenceModel, sim: &Simulator, heldout: &Dataset, exec: Exec) -> Result<f64, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = exec.map(&heldout.records, |r| nearest_in_simulator(model, sim, r.text()).map(|n| n.exact));
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / heldout.len() as f64)
}

/// Labels of each solution's greedy parse.
pub fn nap_predictions<S: AsRef<str> + Sync>(
    model: &InferenceModel,
    sim: &Simulator,
    texts: &[S],
    exec: Exec,
) -> Result<Vec<Vec<String>>, EvalError> {
    exec.map(texts, |y| {
        let near = nearest_in_simulator(model, sim, y.as_ref())?;
        Ok(labels_unchecked(sim, &near.trace))
    })
    .into_iter()
    .collect()
}

/// Labels of each solution's nearest dataset neighbour.
pub fn knn_predictions<S: AsRef<str> + Sync>(
    index: &KnnIndex,
    sim: &Simulator,
    texts: &[S],
    exec: Exec,
) -> Result<Vec<Vec<String>>, EvalError> {
    let mut out = Vec::with_capacity(texts.len());
    for y in texts {
        let top = index.query(y.as_ref(), 1, exec)?;
        out.push(labels_unchecked(sim, &top[0].trace));
    }
    Ok(out)
}
