//! JSON grammar documents.
//!
//! ```json
//! {
//!   "start": "Program",
//!   "max_depth": 64,
//!   "nodes": {
//!     "Program": [
//!       {"value": "for", "weight": 3, "template": [{"lit": "for ("}, {"ref": "Header"}, {"lit": ")"}]},
//!       {"value": "while", "guard": {"eq": ["Ability", "low"]}, "template": [{"xf": "upper", "parts": [{"lit": "x"}]}]}
//!     ]
//!   },
//!   "labels": [{"node": "Program", "value": "while", "label": "uses while loop"}]
//! }
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use sha2::{Digest, Sha256};

use super::{
    DecisionSpec, Guard, LabelRule, LoadError, NodeId, Part, ProductionRule, Simulator, Transform,
    ValueId, DEFAULT_MAX_DEPTH,
};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarDoc {
    #[serde(default)]
    #[allow(dead_code)]
    name: Option<String>,
    #[serde(default)]
    #[allow(dead_code)]
    description: Option<String>,
    start: String,
    #[serde(default = "default_depth")]
    max_depth: usize,
    nodes: NodeList,
    #[serde(default)]
    labels: Vec<LabelRule>,
}

fn default_depth() -> usize {
    DEFAULT_MAX_DEPTH
}

struct NodeList(Vec<(String, Vec<RuleDoc>)>);

impl<'de> Deserialize<'de> for NodeList {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = NodeList;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from node name to a list of rules")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<NodeList, A::Error> {
                let mut out: Vec<(String, Vec<RuleDoc>)> = Vec::new();
                while let Some((name, rules)) = map.next_entry::<String, Vec<RuleDoc>>()? {
                    if out.iter().any(|(n, _)| *n == name) {
                        return Err(serde::de::Error::custom(format!("duplicate node name: {name}")));
                    }
                    out.push((name, rules));
                }
                Ok(NodeList(out))
            }
        }
        deserializer.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleDoc {
    value: String,
    #[serde(default)]
    guard: Option<GuardDoc>,
    #[serde(default = "one")]
    weight: f64,
    #[serde(default)]
    template: Vec<PartDoc>,
}

fn one() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum GuardDoc {
    Eq(String, String),
    In(String, Vec<String>),
    Not(Box<GuardDoc>),
    All(Vec<GuardDoc>),
    Any(Vec<GuardDoc>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartDoc {
    #[serde(default)]
    lit: Option<String>,
    #[serde(default, rename = "ref")]
    node: Option<String>,
    #[serde(default)]
    xf: Option<String>,
    #[serde(default)]
    arg: Option<serde_json::Value>,
    #[serde(default)]
    parts: Option<Vec<PartDoc>>,
}

/// Parse and structurally check a grammar document.
pub fn load_simulator(source: &str) -> Result<Simulator, LoadError> {
    let syntax = |e: serde_json::Error| {
        let message = e.to_string();
        // serde_json appends " at line X column Y"; keep the bare message
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        if let Some(name) = message.strip_prefix("duplicate node name: ") {
            return LoadError::DuplicateNode(name.to_string());
        }
        LoadError::Syntax {
            line: e.line(),
            column: e.column(),
            message,
        }
    };
    let raw: serde_json::Value = serde_json::from_str(source).map_err(syntax)?;
    let doc: GrammarDoc = serde_json::from_str(source).map_err(syntax)?;
    if doc.max_depth == 0 {
        return Err(LoadError::BadMaxDepth);
    }

    let names: Vec<Arc<str>> = doc.nodes.0.iter().map(|(n, _)| Arc::from(n.as_str())).collect();
    let index: HashMap<Arc<str>, NodeId> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), NodeId(i)))
        .collect();

    // domains first, so guards can resolve values of any node
    let mut domains: Vec<Vec<Arc<str>>> = Vec::with_capacity(names.len());
    for (name, rules) in &doc.nodes.0 {
        if rules.is_empty() {
            return Err(LoadError::EmptyNode(name.clone()));
        }
        let mut domain: Vec<Arc<str>> = Vec::new();
        for r in rules {
            if !domain.iter().any(|v| **v == *r.value) {
                domain.push(r.value.as_str().into());
            }
        }
        domains.push(domain);
    }

    let resolver = Resolver {
        index: &index,
        domains: &domains,
    };
    let mut nodes = Vec::with_capacity(names.len());
    for (i, (name, rules)) in doc.nodes.0.iter().enumerate() {
        let mut built = Vec::with_capacity(rules.len());
        for r in rules {
            if !(r.weight > 0.0 && r.weight.is_finite()) {
                return Err(LoadError::NonPositiveWeight {
                    node: name.clone(),
                    value: r.value.clone(),
                    weight: r.weight,
                });
            }
            let value = ValueId(domains[i].iter().position(|v| **v == *r.value).unwrap());
            let guard = match &r.guard {
                Some(g) => resolver.guard(g)?,
                None => Guard::Always,
            };
            let template = resolver.parts(&r.template)?;
            built.push(ProductionRule {
                value,
                guard,
                weight: r.weight,
                template,
            });
        }
        nodes.push(DecisionSpec {
            name: names[i].clone(),
            rules: built,
            domain: domains[i].clone(),
        });
    }

    let start = resolver.node(&doc.start)?;
    for l in &doc.labels {
        let n = resolver.node(&l.node)?;
        if l.value != "*" {
            resolver.value(n, &l.value)?;
        }
    }

    Ok(Simulator {
        nodes,
        index,
        start,
        max_depth: doc.max_depth,
        labels: doc.labels,
        hash: canonical_hash(&raw),
    })
}

pub fn load_simulator_file(path: impl AsRef<Path>) -> Result<Simulator, LoadError> {
    let source = std::fs::read_to_string(path)?;
    load_simulator(&source)
}

struct Resolver<'a> {
    index: &'a HashMap<Arc<str>, NodeId>,
    domains: &'a [Vec<Arc<str>>],
}

impl Resolver<'_> {
    fn node(&self, name: &str) -> Result<NodeId, LoadError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| LoadError::UnknownNode(name.to_string()))
    }

    fn value(&self, node: NodeId, value: &str) -> Result<ValueId, LoadError> {
        self.domains[node.0]
            .iter()
            .position(|v| **v == *value)
            .map(ValueId)
            .ok_or_else(|| LoadError::UnknownValue {
                node: self.domains_name(node),
                value: value.to_string(),
            })
    }

    fn domains_name(&self, node: NodeId) -> String {
        self.index
            .iter()
            .find(|(_, id)| **id == node)
            .map(|(n, _)| n.to_string())
            .unwrap_or_default()
    }

    fn guard(&self, g: &GuardDoc) -> Result<Guard, LoadError> {
        Ok(match g {
            GuardDoc::Eq(n, v) => {
                let node = self.node(n)?;
                Guard::Eq(node, self.value(node, v)?)
            }
            GuardDoc::In(n, vs) => {
                let node = self.node(n)?;
                let values = vs
                    .iter()
                    .map(|v| self.value(node, v))
                    .collect::<Result<_, _>>()?;
                Guard::In(node, values)
            }
            GuardDoc::Not(inner) => Guard::Not(Box::new(self.guard(inner)?)),
            GuardDoc::All(gs) => Guard::All(gs.iter().map(|g| self.guard(g)).collect::<Result<_, _>>()?),
            GuardDoc::Any(gs) => Guard::Any(gs.iter().map(|g| self.guard(g)).collect::<Result<_, _>>()?),
        })
    }

    fn parts(&self, parts: &[PartDoc]) -> Result<Vec<Part>, LoadError> {
        parts.iter().map(|p| self.part(p)).collect()
    }

    fn part(&self, p: &PartDoc) -> Result<Part, LoadError> {
        match (&p.lit, &p.node, &p.xf) {
            (Some(lit), None, None) if p.parts.is_none() && p.arg.is_none() => Ok(Part::Lit(lit.clone())),
            (None, Some(node), None) if p.parts.is_none() && p.arg.is_none() => Ok(Part::Ref(self.node(node)?)),
            (None, None, Some(name)) => {
                let xf = Transform::from_doc(name, p.arg.as_ref())?;
                let inner = self.parts(p.parts.as_deref().unwrap_or(&[]))?;
                Ok(Part::Xf(xf, inner))
            }
            _ => Err(LoadError::BadPart(
                "expected exactly one of {\"lit\"}, {\"ref\"} or {\"xf\", \"parts\"}".into(),
            )),
        }
    }
}

fn canonical_hash(doc: &serde_json::Value) -> String {
    let mut buf = String::new();
    canonical(doc, &mut buf);
    let digest = Sha256::digest(buf.as_bytes());
    format!("{digest:x}")
}

/// JSON with object keys sorted and no insignificant whitespace.
fn canonical(v: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
