//! Feedback derived from inferred traces.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knn::{token_edit_distance, tokenize, tokenize_with_offsets, EditOp, EditScript};
use crate::nap::{parse, DecodeMode, InferenceModel, NapError, ParseResult};
use crate::par::Exec;
use crate::simulator::{replay, ExecError, Production, Simulator, Span, Trace};

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error(transparent)]
    Parse(#[from] NapError),
    #[error("invalid trace: {0}")]
    InvalidTrace(#[from] ExecError),
    #[error("production does not belong to trace: {0}")]
    Mismatch(String),
    #[error("no solutions given")]
    NoSolutions,
}

/// The replayed parse of a solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Nearest {
    pub trace: Trace,
    pub neighbour: Production,
    pub exact: bool,
    pub distance: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Input,
    Neighbour,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Highlight {
    pub span: Span,
    pub label: String,
    pub node: String,
    pub on: Carrier,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeedbackReport {
    pub text: String,
    pub labels: Vec<String>,
    pub exact: bool,
    pub trace: Trace,
    pub neighbour: String,
    pub distance: usize,
    pub diff: EditScript,
    pub highlights: Vec<Highlight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMismatchScore {
    pub node: String,
    pub mismatches: usize,
    pub opportunities: usize,
    pub score: f64,
}

fn nearest_from(parsed: ParseResult, y: &str) -> Nearest {
    let distance = if parsed.exact {
        0
    } else {
        token_edit_distance(&tokenize(&parsed.production.text), &tokenize(y)).0
    };
    Nearest {
        trace: parsed.trace,
        neighbour: parsed.production,
        exact: parsed.exact,
        distance,
    }
}

/// Greedy parse of `y`, replayed into its nearest in-simulator neighbour.
pub fn nearest_in_simulator(model: &InferenceModel, sim: &Simulator, y: &str) -> Result<Nearest, FeedbackError> {
    Ok(nearest_from(parse(model, sim, y, DecodeMode::Greedy)?, y))
}

/// Labels of every label rule matched by a step of `trace`, sorted.
pub fn extract_labels(sim: &Simulator, trace: &Trace) -> Result<Vec<String>, FeedbackError> {
    replay(sim, trace)?;
    Ok(labels_unchecked(sim, trace))
}

pub(crate) fn labels_unchecked(sim: &Simulator, trace: &Trace) -> Vec<String> {
    let mut out = BTreeSet::new();
    for step in trace.iter() {
        for rule in sim.label_rules() {
            if rule.matches(step) {
                out.insert(rule.label.clone());
            }
        }
    }
    out.into_iter().collect()
}

/// The recorded span of every labelled step of `trace` in `production`.
pub fn highlight(sim: &Simulator, trace: &Trace, production: &Production) -> Result<Vec<Highlight>, FeedbackError> {
    if production.spans.len() != trace.len() {
        return Err(FeedbackError::Mismatch(format!(
            "{} spans for {} steps",
            production.spans.len(),
            trace.len()
        )));
    }
    let chars = production.text.chars().count();
    let mut out = Vec::new();
    for (step, span) in trace.iter().zip(&production.spans) {
        if span.end > chars || span.start > span.end {
            return Err(FeedbackError::Mismatch(format!(
                "span {}..{} outside a text of {chars} characters",
                span.start, span.end
            )));
        }
        for rule in sim.label_rules() {
            if rule.matches(step) {
                out.push(Highlight {
                    span: *span,
                    label: rule.label.clone(),
                    node: step.node().to_string(),
                    on: Carrier::Neighbour,
                });
            }
        }
    }
    Ok(out)
}

/// Token-level script rewriting `neighbour` into `y`.
pub fn diff(y: &str, neighbour: &str) -> EditScript {
    token_edit_distance(&tokenize(neighbour), &tokenize(y)).1
}

/// Full feedback for one solution.
pub fn feedback(model: &InferenceModel, sim: &Simulator, y: &str) -> Result<FeedbackReport, FeedbackError> {
    let near = nearest_in_simulator(model, sim, y)?;
    let mut highlights = highlight(sim, &near.trace, &near.neighbour)?;
    if near.exact {
        for h in &mut highlights {
            h.on = Carrier::Input;
        }
    }
    Ok(FeedbackReport {
        text: y.to_string(),
        labels: labels_unchecked(sim, &near.trace),
        exact: near.exact,
        diff: diff(y, &near.neighbour.text),
        neighbour: near.neighbour.text,
        distance: near.distance,
        trace: near.trace,
        highlights,
    })
}

/// Nodes whose spans in `neighbour` contain a non-keep op of `script`
/// (`script` rewrites the neighbour's tokens into the solution's).
pub fn mismatched_nodes(trace: &Trace, neighbour: &Production, script: &EditScript) -> BTreeSet<String> {
    let tokens = tokenize_with_offsets(&neighbour.text);
    let text_end = neighbour.text.chars().count();
    let mut out = BTreeSet::new();
    let mut k = 0;
    for op in &script.ops {
        let range = match op {
            EditOp::Keep { .. } => None,
            EditOp::Delete { .. } | EditOp::Substitute { .. } => Some((tokens[k].start, tokens[k].end)),
            EditOp::Insert { .. } => {
                let p = match (tokens.get(k), k.checked_sub(1).and_then(|j| tokens.get(j))) {
                    (Some(t), _) => t.start,
                    (None, Some(prev)) => prev.end,
                    (None, None) => text_end,
                };
                Some((p, p))
            }
        };
        if op.consumes_source() {
            k += 1;
        }
        if let Some((s, e)) = range {
            if let Some(i) = neighbour.innermost_covering(s, e) {
                out.insert(trace.steps[i].node().to_string());
            }
        }
    }
    out
}

/// Rank decision nodes by how often their output disagrees with solutions
/// that do not parse exactly. A node's opportunities are the solutions whose
/// parse visits it; its score is mismatches over opportunities.
pub fn diagnose_misparses<S: AsRef<str> + Sync>(
    model: &InferenceModel,
    sim: &Simulator,
    solutions: &[S],
    exec: Exec,
) -> Result<Vec<NodeMismatchScore>, FeedbackError> {
    if solutions.is_empty() {
        return Err(FeedbackError::NoSolutions);
    }
    let per = exec.map(solutions, |y| -> Result<(BTreeSet<String>, BTreeSet<String>), FeedbackError> {
        let y = y.as_ref();
        let near = nearest_in_simulator(model, sim, y)?;
        let visited = near.trace.iter().map(|s| s.node().to_string()).collect();
        let missed = if near.exact {
            BTreeSet::new()
        } else {
            mismatched_nodes(&near.trace, &near.neighbour, &diff(y, &near.neighbour.text))
        };
        Ok((visited, missed))
    });
    let mut table: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in per {
        let (visited, missed) = r?;
        for n in visited {
            table.entry(n).or_default().1 += 1;
        }
        for n in missed {
            table.entry(n).or_default().0 += 1;
        }
    }
    Ok(rank_scores(table))
}

pub(crate) fn rank_scores(table: BTreeMap<String, (usize, usize)>) -> Vec<NodeMismatchScore> {
    let mut out: Vec<NodeMismatchScore> = table
        .into_iter()
        .map(|(node, (mismatches, opportunities))| NodeMismatchScore {
            node,
            mismatches,
            opportunities,
            score: mismatches as f64 / opportunities as f64,
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.opportunities.cmp(&a.opportunities))
            .then(a.node.cmp(&b.node))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn trace(pairs: &[(&str, &str)]) -> Trace {
        Trace::from_pairs(pairs.iter().copied())
    }

    #[test]
    fn labels_follow_rules() {
        let sim = fixtures::countdown_mini();
        let t = trace(&[("LoopChoice", "for"), ("Direction", "down"), ("Bound", "off_by_one"), ("PrintStyle", "println")]);
        assert_eq!(extract_labels(&sim, &t).unwrap(), ["off by one increment"]);
        let clean = trace(&[("LoopChoice", "for"), ("Direction", "down"), ("Bound", "correct"), ("PrintStyle", "println")]);
        assert!(extract_labels(&sim, &clean).unwrap().is_empty());
        assert!(extract_labels(&sim, &trace(&[("LoopChoice", "for")])).is_err());
    }

    #[test]
    fn highlight_covers_the_bound() {
        let sim = fixtures::countdown_mini();
        let t = trace(&[("LoopChoice", "for"), ("Direction", "down"), ("Bound", "off_by_one"), ("PrintStyle", "println")]);
        let prod = replay(&sim, &t).unwrap();
        let hs = highlight(&sim, &t, &prod).unwrap();
        assert_eq!(hs.len(), 1);
        let covered: String = prod.text.chars().skip(hs[0].span.start).take(hs[0].span.len()).collect();
        assert_eq!(covered, ">= 0");
        assert_eq!(hs[0].node, "Bound");
    }

    #[test]
    fn single_mismatch_scores_one_node() {
        let sim = fixtures::countdown_mini();
        let t = trace(&[("LoopChoice", "for"), ("Direction", "down"), ("Bound", "correct"), ("PrintStyle", "println")]);
        let prod = replay(&sim, &t).unwrap();
        let y = prod.text.replace("> 0", "> 1");
        let missed = mismatched_nodes(&t, &prod, &diff(&y, &prod.text));
        assert_eq!(missed.into_iter().collect::<Vec<_>>(), ["Bound"]);
    }

    #[test]
    fn ranking_breaks_ties_by_opportunities_then_name() {
        let mut table = BTreeMap::new();
        table.insert("b".to_string(), (1, 2));
        table.insert("a".to_string(), (2, 4));
        table.insert("c".to_string(), (0, 9));
        table.insert("d".to_string(), (1, 2));
        let names: Vec<String> = rank_scores(table).into_iter().map(|s| s.node).collect();
        assert_eq!(names, ["a", "b", "d", "c"]);
    }
}
