//! Idea2Text-style simulators of student decision making.
//!
//! A [`Simulator`] is a set of named decision nodes. Each node owns an ordered
//! list of guarded, weighted production rules; a rule declares one choice value
//! and a template mixing literal text, references to further decision nodes and
//! registered text transforms. Running a simulator expands the start node
//! depth-first, left to right, recording every `(node, value)` decision in a
//! [`Trace`] and attributing a character range of the output to every step.

mod exec;
mod grammar;
mod guard;
mod ops;
mod transform;
mod validate;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exec::{Execution, Option_ as ChoiceOption};
pub use grammar::{load_simulator, load_simulator_file};
pub use guard::Guard;
pub use ops::{enumerate_all, replay, simulate, simulate_seeded, trace_prob, Enumerated};
pub use transform::Transform;
pub use validate::{validate, Issue, ValidationReport};

/// Default bound on nested node expansions.
pub const DEFAULT_MAX_DEPTH: usize = 64;

/// Index of a decision node inside its [`Simulator`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Index of a choice value inside a node's domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub usize);

/// One element of a rule template.
#[derive(Clone, Debug, PartialEq)]
pub enum Part {
    Lit(String),
    Ref(NodeId),
    Xf(Transform, Vec<Part>),
}

#[derive(Clone, Debug)]
pub struct ProductionRule {
    pub value: ValueId,
    pub guard: Guard,
    pub weight: f64,
    pub template: Vec<Part>,
}

/// A decision node: its name, ordered rules and the value domain they declare.
#[derive(Clone, Debug)]
pub struct DecisionSpec {
    pub name: Arc<str>,
    pub rules: Vec<ProductionRule>,
    /// Distinct rule values in order of first declaration.
    pub domain: Vec<Arc<str>>,
}

impl DecisionSpec {
    pub fn value_id(&self, value: &str) -> Option<ValueId> {
        self.domain.iter().position(|v| &**v == value).map(ValueId)
    }
}

/// Maps a `(node, value)` decision to a feedback label. A value of `*`
/// matches every value of the node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub node: String,
    pub value: String,
    pub label: String,
}

impl LabelRule {
    pub fn matches(&self, step: &Step) -> bool {
        *self.node == *step.node() && (self.value == "*" || *self.value == *step.value())
    }
}

/// A loaded, structurally checked simulator. Immutable once built.
#[derive(Clone, Debug)]
pub struct Simulator {
    nodes: Vec<DecisionSpec>,
    index: HashMap<Arc<str>, NodeId>,
    start: NodeId,
    max_depth: usize,
    labels: Vec<LabelRule>,
    hash: String,
}

impl Simulator {
    pub fn nodes(&self) -> &[DecisionSpec] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &DecisionSpec {
        &self.nodes[id.0]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.index.get(name).copied()
    }

    pub fn start(&self) -> NodeId {
        self.start
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn label_rules(&self) -> &[LabelRule] {
        &self.labels
    }

    /// Every distinct label string, in declaration order.
    pub fn label_vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for rule in &self.labels {
            if !out.contains(&rule.label) {
                out.push(rule.label.clone());
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical form of the source grammar document.
    pub fn grammar_hash(&self) -> &str {
        &self.hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn step(&self, node: NodeId, value: ValueId) -> Step {
        let spec = self.node(node);
        Step(spec.name.clone(), spec.domain[value.0].clone())
    }
}

/// One decision: the node name and the chosen value. Serialized as a
/// two-element array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Step(pub Arc<str>, pub Arc<str>);

impl Step {
    pub fn new(node: &str, value: &str) -> Self {
        Step(node.into(), value.into())
    }

    pub fn node(&self) -> &str {
        &self.0
    }

    pub fn value(&self) -> &str {
        &self.1
    }
}

/// Ordered record of the decisions of one execution.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trace {
    pub steps: Vec<Step>,
}

impl Trace {
    pub fn new(steps: Vec<Step>) -> Self {
        Trace { steps }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Trace {
            steps: pairs.into_iter().map(|(n, v)| Step::new(n, v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Step> {
        self.steps.iter()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}={}", s.node(), s.value())?;
        }
        f.write_str("]")
    }
}

/// Half-open character range `[start, end)`. Serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl From<(usize, usize)> for Span {
    fn from((start, end): (usize, usize)) -> Self {
        Span { start, end }
    }
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

/// Terminal text of an execution plus one span per trace step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Production {
    pub text: String,
    pub spans: Vec<Span>,
}

impl Production {
    /// Index of the innermost step whose span covers the character range
    /// `[start, end)`. Ties between equal-length spans go to the later
    /// (deeper) step.
    pub fn innermost_covering(&self, start: usize, end: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, s) in self.spans.iter().enumerate() {
            let covers = if start == end {
                !s.is_empty() && s.start <= start && start <= s.end
            } else {
                s.start <= start && end <= s.end
            };
            if covers && best.is_none_or(|b| s.len() <= self.spans[b].len()) {
                best = Some(i);
            }
        }
        best
    }
}

/// Errors raised while loading a grammar document.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown node reference: {0}")]
    UnknownNode(String),
    #[error("unknown value '{value}' for node {node}")]
    UnknownValue { node: String, value: String },
    #[error("unknown transform: {0}")]
    UnknownTransform(String),
    #[error("bad argument for transform {name}: {message}")]
    TransformArg { name: String, message: String },
    #[error("nonpositive weight {weight} in rule '{value}' of node {node}")]
    NonPositiveWeight {
        node: String,
        value: String,
        weight: f64,
    },
    #[error("duplicate node name: {0}")]
    DuplicateNode(String),
    #[error("node {0} has no rules")]
    EmptyNode(String),
    #[error("max_depth must be at least 1")]
    BadMaxDepth,
    #[error("malformed template part: {0}")]
    BadPart(String),
    #[error("reading grammar file: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised while executing, replaying or enumerating a simulator.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error("recursion exceeded max_depth {max_depth} at node {node}")]
    DepthExceeded { node: String, max_depth: usize },
    #[error("dead context at node {node}: no rule satisfiable after {prefix}")]
    DeadContext { node: String, prefix: Trace },
    #[error("ambiguous context at node {node}: value '{value}' declared by several satisfied rules")]
    Ambiguous { node: String, value: String },
    #[error("invalid trace at step {step}: {reason}")]
    InvalidTrace { step: usize, reason: String },
    #[error("transform {name} failed: {message}")]
    Transform { name: String, message: String },
    #[error("trajectory space exceeds limit {limit}")]
    LimitExceeded { limit: usize },
    #[error("execution already complete")]
    Complete,
    #[error("option index {0} out of range")]
    BadOption(usize),
}
