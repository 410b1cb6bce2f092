//! Step-wise execution machine shared by sampling, replay, enumeration and
//! grammar-constrained decoding.
//!
//! The machine expands templates depth-first, left to right, and stops every
//! time it reaches a decision node. The caller inspects the admissible options
//! for that node and commits one of them with [`Execution::choose`].

use super::{ExecError, NodeId, Part, Production, Simulator, Span, Trace, Transform, ValueId};

#[derive(Clone, Debug)]
enum Frame<'s> {
    Node {
        step: usize,
        parts: &'s [Part],
        next: usize,
    },
    Xf {
        xf: &'s Transform,
        parts: &'s [Part],
        next: usize,
        start: usize,
        first_step: usize,
        bounds: Vec<usize>,
    },
}

/// An admissible choice at the pending node: one guard-satisfied rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Option_ {
    pub value: ValueId,
    pub rule: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Execution<'s> {
    sim: &'s Simulator,
    stack: Vec<Frame<'s>>,
    text: String,
    steps: Vec<(NodeId, ValueId)>,
    spans: Vec<(usize, usize)>,
    last: Vec<Option<ValueId>>,
    pending: Option<NodeId>,
    node_depth: usize,
}

impl<'s> Execution<'s> {
    pub fn new(sim: &'s Simulator) -> Self {
        Execution {
            sim,
            stack: Vec::new(),
            text: String::new(),
            steps: Vec::new(),
            spans: Vec::new(),
            last: vec![None; sim.len()],
            pending: Some(sim.start()),
            node_depth: 0,
        }
    }

    pub fn simulator(&self) -> &'s Simulator {
        self.sim
    }

    /// The node awaiting a decision, or `None` once the execution is complete.
    pub fn pending(&self) -> Option<NodeId> {
        self.pending
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_none()
    }

    /// Number of decisions made so far (the 0-based index of the next step).
    pub fn step_index(&self) -> usize {
        self.steps.len()
    }

    /// Most recent value recorded for every node.
    pub fn context(&self) -> &[Option<ValueId>] {
        &self.last
    }

    pub fn partial_trace(&self) -> Trace {
        Trace::new(self.steps.iter().map(|&(n, v)| self.sim.step(n, v)).collect())
    }

    /// Guard-satisfied rules of the pending node, in document order.
    ///
    /// Fails with `DeadContext` when no rule is satisfiable and with
    /// `Ambiguous` when two satisfied rules declare the same value.
    pub fn options(&self) -> Result<Vec<Option_>, ExecError> {
        let node = self.pending.ok_or(ExecError::Complete)?;
        let spec = self.sim.node(node);
        let mut out: Vec<Option_> = Vec::with_capacity(spec.rules.len());
        for (i, rule) in spec.rules.iter().enumerate() {
            if rule.guard.eval(&self.last) {
                if out.iter().any(|o| o.value == rule.value) {
                    return Err(ExecError::Ambiguous {
                        node: spec.name.to_string(),
                        value: spec.domain[rule.value.0].to_string(),
                    });
                }
                out.push(Option_ {
                    value: rule.value,
                    rule: i,
                    weight: rule.weight,
                });
            }
        }
        if out.is_empty() {
            return Err(ExecError::DeadContext {
                node: spec.name.to_string(),
                prefix: self.partial_trace(),
            });
        }
        Ok(out)
    }

    /// Commit rule `rule` of the pending node and expand until the next
    /// decision node (or the end of the execution).
    pub fn choose(&mut self, rule: usize) -> Result<(), ExecError> {
        let node = self.pending.take().ok_or(ExecError::Complete)?;
        let spec = self.sim.node(node);
        let r = spec.rules.get(rule).ok_or(ExecError::BadOption(rule))?;
        self.steps.push((node, r.value));
        let start = self.text.len();
        self.spans.push((start, start));
        self.last[node.0] = Some(r.value);
        self.stack.push(Frame::Node {
            step: self.steps.len() - 1,
            parts: &r.template,
            next: 0,
        });
        self.node_depth += 1;
        self.advance()
    }

    /// Choose the pending node's rule declaring `value`; fails when no
    /// satisfied rule declares it.
    pub fn choose_value(&mut self, value: ValueId) -> Result<(), ExecError> {
        let opts = self.options()?;
        match opts.iter().find(|o| o.value == value) {
            Some(o) => self.choose(o.rule),
            None => Err(ExecError::InvalidTrace {
                step: self.steps.len() + 1,
                reason: "value not admissible in this context".into(),
            }),
        }
    }

    fn advance(&mut self) -> Result<(), ExecError> {
        loop {
            let Some(top) = self.stack.last_mut() else {
                return Ok(());
            };
            let (parts, next) = match top {
                Frame::Node { parts, next, .. } => (*parts, next),
                Frame::Xf { parts, next, bounds, .. } => {
                    if *next < parts.len() {
                        bounds.push(self.text.len());
                    }
                    (*parts, next)
                }
            };
            if *next < parts.len() {
                let part = &parts[*next];
                *next += 1;
                match part {
                    Part::Lit(s) => self.text.push_str(s),
                    Part::Ref(n) => {
                        if self.node_depth + 1 > self.sim.max_depth() {
                            return Err(ExecError::DepthExceeded {
                                node: self.sim.node(*n).name.to_string(),
                                max_depth: self.sim.max_depth(),
                            });
                        }
                        self.pending = Some(*n);
                        return Ok(());
                    }
                    Part::Xf(xf, inner) => {
                        let start = self.text.len();
                        self.stack.push(Frame::Xf {
                            xf,
                            parts: inner,
                            next: 0,
                            start,
                            first_step: self.steps.len(),
                            bounds: Vec::new(),
                        });
                    }
                }
                continue;
            }
            match self.stack.pop().unwrap() {
                Frame::Node { step, .. } => {
                    self.spans[step].1 = self.text.len();
                    self.node_depth -= 1;
                }
                Frame::Xf {
                    xf,
                    start,
                    first_step,
                    bounds,
                    ..
                } => {
                    let rel: Vec<usize> = bounds.iter().map(|b| b - start).collect();
                    let (out, remap) = xf.apply(&self.text[start..], &rel)?;
                    for span in &mut self.spans[first_step..] {
                        let (s, e) = remap.span(span.0 - start, span.1 - start);
                        *span = (start + s, start + e);
                    }
                    self.text.truncate(start);
                    self.text.push_str(&out);
                }
            }
        }
    }

    /// Output produced so far (complete once `is_complete`).
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Finish a complete execution. Spans are converted to character offsets.
    pub fn finish(self) -> Result<(Trace, Production), ExecError> {
        if self.pending.is_some() {
            return Err(ExecError::InvalidTrace {
                step: self.steps.len() + 1,
                reason: "trace too short: execution still pending".into(),
            });
        }
        let trace = self.partial_trace();
        let spans = if self.text.is_ascii() {
            self.spans.iter().map(|&(s, e)| Span::new(s, e)).collect()
        } else {
            let mut table = vec![0usize; self.text.len() + 1];
            let mut count = 0;
            for (pos, _) in self.text.char_indices() {
                table[pos] = count;
                count += 1;
            }
            table[self.text.len()] = count;
            self.spans
                .iter()
                .map(|&(s, e)| Span::new(table[s], table[e]))
                .collect()
        };
        Ok((
            trace,
            Production {
                text: self.text,
                spans,
            },
        ))
    }

    /// Everything that determines the rest of the execution apart from the
    /// output text: the pending node, the template positions on the stack and
    /// the current values of the nodes in `relevant`.
    pub(crate) fn state_key(&self, relevant: &[NodeId]) -> Vec<usize> {
        let mut key = Vec::with_capacity(2 + self.stack.len() * 3 + relevant.len());
        key.push(self.pending.map_or(usize::MAX, |n| n.0));
        for f in &self.stack {
            match f {
                Frame::Node { parts, next, .. } => key.extend([0, parts.as_ptr() as usize, *next]),
                Frame::Xf { parts, next, .. } => key.extend([1, parts.as_ptr() as usize, *next]),
            }
        }
        key.push(usize::MAX);
        key.extend(relevant.iter().map(|n| self.last[n.0].map_or(usize::MAX, |v| v.0)));
        key
    }
}
