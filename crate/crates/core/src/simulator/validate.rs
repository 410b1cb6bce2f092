use std::collections::HashSet;

use serde::Serialize;

use super::{ExecError, Execution, NodeId, Part, Simulator, Trace};

/// Exploration budget, in distinct execution states.
const MAX_STATES: usize = 2_000_000;

/// A problem found by [`validate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Issue {
    /// The node is never reached from the start node.
    Unreachable { node: String },
    /// A reachable context in which no rule of `node` is satisfiable.
    DeadContext { node: String, prefix: Trace },
    /// Two satisfied rules declare the same value, so replay is ambiguous.
    Ambiguous { node: String, value: String, prefix: Trace },
    /// A reachable execution nests deeper than `max_depth`.
    DepthExceeded { node: String, prefix: Trace },
    /// The nodes reference each other cyclically; termination depends on weights and guards.
    RecursionRisk { cycle: Vec<String> },
    /// A transform fails on some reachable output.
    TransformFailure { message: String, prefix: Trace },
    /// The state space was larger than the exploration budget.
    Truncated { explored: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Explore every reachable execution state and report structural problems.
///
/// States that agree on the pending node, the template positions on the stack
/// and the values of guard-referenced nodes have identical futures, so each is
/// expanded once; grammars with independent decisions stay cheap to check.
pub fn validate(sim: &Simulator) -> ValidationReport {
    let mut issues = Vec::new();

    let mut relevant = Vec::new();
    for spec in sim.nodes() {
        for r in &spec.rules {
            r.guard.referenced(&mut relevant);
        }
    }
    relevant.sort();

    let mut reached = vec![false; sim.len()];
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut reported: HashSet<(u8, usize)> = HashSet::new();
    let mut stack = vec![Execution::new(sim)];
    let mut truncated = false;
    while let Some(exec) = stack.pop() {
        let Some(node) = exec.pending() else { continue };
        if !seen.insert(exec.state_key(&relevant)) {
            continue;
        }
        if seen.len() > MAX_STATES {
            truncated = true;
            break;
        }
        reached[node.0] = true;
        let options = match exec.options() {
            Ok(o) => o,
            Err(ExecError::DeadContext { node: name, prefix }) => {
                if reported.insert((0, node.0)) {
                    issues.push(Issue::DeadContext { node: name, prefix });
                }
                continue;
            }
            Err(ExecError::Ambiguous { node: name, value }) => {
                if reported.insert((1, node.0)) {
                    issues.push(Issue::Ambiguous {
                        node: name,
                        value,
                        prefix: exec.partial_trace(),
                    });
                }
                continue;
            }
            Err(_) => continue,
        };
        for o in options.iter().rev() {
            let mut next = exec.clone();
            match next.choose(o.rule) {
                Ok(()) => stack.push(next),
                Err(ExecError::DepthExceeded { node: name, .. }) => {
                    let id = sim.node_id(&name).map_or(usize::MAX, |n| n.0);
                    if reported.insert((2, id)) {
                        issues.push(Issue::DepthExceeded {
                            node: name,
                            prefix: next.partial_trace(),
                        });
                    }
                }
                Err(ExecError::Transform { name, message }) => {
                    if reported.insert((3, node.0)) {
                        issues.push(Issue::TransformFailure {
                            message: format!("{name}: {message}"),
                            prefix: next.partial_trace(),
                        });
                    }
                }
                Err(_) => {}
            }
        }
    }
    if truncated {
        issues.push(Issue::Truncated { explored: seen.len() });
    } else {
        for (i, r) in reached.iter().enumerate() {
            if !r {
                issues.push(Issue::Unreachable {
                    node: sim.node(NodeId(i)).name.to_string(),
                });
            }
        }
    }
    issues.extend(cycles(sim).into_iter().map(|cycle| Issue::RecursionRisk { cycle }));
    ValidationReport { issues }
}

fn refs(parts: &[Part], out: &mut Vec<usize>) {
    for p in parts {
        match p {
            Part::Lit(_) => {}
            Part::Ref(n) => out.push(n.0),
            Part::Xf(_, inner) => refs(inner, out),
        }
    }
}

/// Groups of mutually reachable nodes in the static reference graph.
fn cycles(sim: &Simulator) -> Vec<Vec<String>> {
    let n = sim.len();
    let edges: Vec<Vec<usize>> = sim
        .nodes()
        .iter()
        .map(|spec| {
            let mut out = Vec::new();
            for r in &spec.rules {
                refs(&r.template, &mut out);
            }
            out.sort();
            out.dedup();
            out
        })
        .collect();
    let reach: Vec<Vec<bool>> = (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            let mut stack = edges[s].clone();
            while let Some(x) = stack.pop() {
                if !seen[x] {
                    seen[x] = true;
                    stack.extend(&edges[x]);
                }
            }
            seen
        })
        .collect();
    let mut done = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if done[s] || !reach[s][s] {
            continue;
        }
        let group: Vec<usize> = (0..n).filter(|&t| reach[s][t] && reach[t][s]).collect();
        for &t in &group {
            done[t] = true;
        }
        out.push(group.iter().map(|&t| sim.node(NodeId(t)).name.to_string()).collect());
    }
    out
}
