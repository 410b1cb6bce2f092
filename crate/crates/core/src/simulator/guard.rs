use super::{NodeId, ValueId};

/// Predicate over the decisions made so far.
///
/// `chosen(node)` is the most recent value recorded for `node`. A node that has
/// not been visited yet is *unset*: equality and membership tests on it are
/// false, so their negations are true.
#[derive(Clone, Debug, PartialEq)]
pub enum Guard {
    Always,
    Eq(NodeId, ValueId),
    In(NodeId, Vec<ValueId>),
    Not(Box<Guard>),
    All(Vec<Guard>),
    Any(Vec<Guard>),
}

impl Guard {
    pub fn eval(&self, last: &[Option<ValueId>]) -> bool {
        match self {
            Guard::Always => true,
            Guard::Eq(node, value) => last[node.0] == Some(*value),
            Guard::In(node, values) => last[node.0].is_some_and(|v| values.contains(&v)),
            Guard::Not(inner) => !inner.eval(last),
            Guard::All(gs) => gs.iter().all(|g| g.eval(last)),
            Guard::Any(gs) => gs.iter().any(|g| g.eval(last)),
        }
    }

    /// Nodes whose values this guard inspects.
    pub fn referenced(&self, out: &mut Vec<NodeId>) {
        match self {
            Guard::Always => {}
            Guard::Eq(n, _) | Guard::In(n, _) => {
                if !out.contains(n) {
                    out.push(*n);
                }
            }
            Guard::Not(g) => g.referenced(out),
            Guard::All(gs) | Guard::Any(gs) => gs.iter().for_each(|g| g.referenced(out)),
        }
    }
}
