use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::knn::tokenize;
use crate::simulator::Simulator;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Token ids (in order of first occurrence, after the reserved ids) and the
/// grammar's node and value names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabDoc", into = "VocabDoc")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    nodes: Vec<String>,
    values: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    tokens: Vec<String>,
    nodes: Vec<String>,
    values: Vec<Vec<String>>,
}

impl From<VocabDoc> for Vocabulary {
    fn from(d: VocabDoc) -> Self {
        let index = d.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocabulary {
            tokens: d.tokens,
            index,
            nodes: d.nodes,
            values: d.values,
        }
    }
}

impl From<Vocabulary> for VocabDoc {
    fn from(v: Vocabulary) -> Self {
        VocabDoc {
            tokens: v.tokens,
            nodes: v.nodes,
            values: v.values,
        }
    }
}

impl Vocabulary {
    pub fn build<'a>(sim: &Simulator, texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<unk>".into()];
        let mut seen: HashSet<String> = tokens.iter().cloned().collect();
        for text in texts {
            for tok in tokenize(text) {
                if seen.insert(tok.clone()) {
                    tokens.push(tok);
                }
            }
        }
        Vocabulary::from(VocabDoc {
            tokens,
            nodes: sim.nodes().iter().map(|n| n.name.to_string()).collect(),
            values: sim
                .nodes()
                .iter()
                .map(|n| n.domain.iter().map(|d| d.to_string()).collect())
                .collect(),
        })
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Number of token ids, reserved ids included.
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn values(&self, node: usize) -> &[String] {
        &self.values[node]
    }
}
