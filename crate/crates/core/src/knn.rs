//! Token-level edit distance and the nearest-neighbour trace parser.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::par::Exec;
use crate::simulator::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum KnnError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("empty input")]
    EmptyInput,
    #[error("edit script does not apply: {0}")]
    BadScript(String),
}

/// A token with its character range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Split on whitespace; runs of letters, digits and `_` form one token, every
/// other character is a token by itself. Offsets are in characters.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word: Option<(String, usize)> = None;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() || c == '_' {
            match &mut word {
                Some((w, _)) => w.push(c),
                None => word = Some((c.to_string(), pos)),
            }
        } else {
            if let Some((w, s)) = word.take() {
                out.push(Token { text: w, start: s, end: pos });
            }
            if !c.is_whitespace() {
                out.push(Token {
                    text: c.to_string(),
                    start: pos,
                    end: pos + 1,
                });
            }
        }
        pos += 1;
    }
    if let Some((w, s)) = word {
        out.push(Token { text: w, start: s, end: pos });
    }
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// Tokens joined by single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EditOp {
    Keep { token: String },
    Insert { token: String },
    Delete { token: String },
    Substitute { old: String, new: String },
}

impl EditOp {
    pub fn is_keep(&self) -> bool {
        matches!(self, EditOp::Keep { .. })
    }

    /// Whether the op consumes a source token.
    pub fn consumes_source(&self) -> bool {
        !matches!(self, EditOp::Insert { .. })
    }
}

/// Ops that rewrite a source token sequence into a target sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
    pub cost: usize,
}

impl EditScript {
    pub fn apply<S: AsRef<str>>(&self, source: &[S]) -> Result<Vec<String>, KnnError> {
        let mut out = Vec::new();
        let mut i = 0;
        for op in &self.ops {
            let expect = |tok: &str, i: usize| match source.get(i) {
                Some(s) if s.as_ref() == tok => Ok(()),
                Some(s) => Err(KnnError::BadScript(format!(
                    "source token {i} is '{}', script expects '{tok}'",
                    s.as_ref()
                ))),
                None => Err(KnnError::BadScript(format!("source exhausted at token {i}"))),
            };
            match op {
                EditOp::Keep { token } => {
                    expect(token, i)?;
                    out.push(token.clone());
                    i += 1;
                }
                EditOp::Insert { token } => out.push(token.clone()),
                EditOp::Delete { token } => {
                    expect(token, i)?;
                    i += 1;
                }
                EditOp::Substitute { old, new } => {
                    expect(old, i)?;
                    out.push(new.clone());
                    i += 1;
                }
            }
        }
        if i != source.len() {
            return Err(KnnError::BadScript(format!(
                "script consumed {i} of {} source tokens",
                source.len()
            )));
        }
        Ok(out)
    }
}

/// Unit-cost Levenshtein distance between token sequences with an optimal
/// script turning `a` into `b`. Backtracking prefers keep/substitute, then
/// delete, then insert.
pub fn token_edit_distance<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> (usize, EditScript) {
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        dp[i * w] = i;
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(a[i - 1].as_ref() != b[j - 1].as_ref());
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = a[i - 1].as_ref() == b[j - 1].as_ref();
            if dp[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Keep {
                        token: a[i - 1].as_ref().to_string(),
                    }
                } else {
                    EditOp::Substitute {
                        old: a[i - 1].as_ref().to_string(),
                        new: b[j - 1].as_ref().to_string(),
                    }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Delete {
                token: a[i - 1].as_ref().to_string(),
            });
            i -= 1;
        } else {
            ops.push(EditOp::Insert {
                token: b[j - 1].as_ref().to_string(),
            });
            j -= 1;
        }
    }
    ops.reverse();
    let cost = dp[n * w + m];
    (cost, EditScript { ops, cost })
}

/// Distance only, abandoning once every cell of a row exceeds `cutoff`.
fn bounded_distance(a: &[u32], b: &[u32], cutoff: usize, row: &mut Vec<usize>) -> Option<usize> {
    if a.len().abs_diff(b.len()) > cutoff {
        return None;
    }
    row.clear();
    row.extend(0..=b.len());
    for (i, &x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        let mut best = row[0];
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            let v = (diag + usize::from(x != y)).min(up + 1).min(row[j] + 1);
            diag = up;
            row[j + 1] = v;
            best = best.min(v);
        }
        if best > cutoff {
            return None;
        }
    }
    let d = row[b.len()];
    (d <= cutoff).then_some(d)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbour {
    pub index: usize,
    pub trace: Trace,
    pub text: String,
    pub distance: usize,
}

/// Tokenized distinct texts of a dataset, for repeated queries.
pub struct KnnIndex<'d> {
    ds: &'d Dataset,
    vocab: HashMap<String, u32>,
    texts: Vec<Vec<u32>>,
    /// Record indices of every distinct text, ascending.
    records: Vec<Vec<usize>>,
}

impl<'d> KnnIndex<'d> {
    pub fn new(ds: &'d Dataset) -> Result<Self, KnnError> {
        if ds.records.is_empty() {
            return Err(KnnError::EmptyDataset);
        }
        let mut vocab = HashMap::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut texts = Vec::new();
        let mut records: Vec<Vec<usize>> = Vec::new();
        for (i, r) in ds.records.iter().enumerate() {
            let text = r.text();
            if let Some(&t) = seen.get(text) {
                records[t].push(i);
                continue;
            }
            seen.insert(text, texts.len());
            let ids = tokenize(text)
                .into_iter()
                .map(|tok| {
                    let next = vocab.len() as u32;
                    *vocab.entry(tok).or_insert(next)
                })
                .collect();
            texts.push(ids);
            records.push(vec![i]);
        }
        Ok(KnnIndex {
            ds,
            vocab,
            texts,
            records,
        })
    }

    pub fn distinct_texts(&self) -> usize {
        self.texts.len()
    }

    /// The `k` records closest to `y`, ties broken by dataset order.
    pub fn query(&self, y: &str, k: usize, exec: Exec) -> Result<Vec<Neighbour>, KnnError> {
        if k == 0 {
            return Err(KnnError::ZeroK);
        }
        let q: Vec<u32> = tokenize(y)
            .iter()
            .map(|t| self.vocab.get(t).copied().unwrap_or(u32::MAX))
            .collect();
        let chunks = chunk_bounds(self.texts.len(), exec);
        let partial = exec.map(&chunks, |&(lo, hi)| self.scan(&q, lo, hi, k));
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for part in partial {
            for (t, d) in part {
                hits.extend(self.records[t].iter().map(|&r| (d, r)));
            }
        }
        hits.sort_unstable();
        hits.truncate(k);
        Ok(hits
            .into_iter()
            .map(|(distance, index)| {
                let r = &self.ds.records[index];
                Neighbour {
                    index,
                    trace: r.trace.clone(),
                    text: r.text().to_string(),
                    distance,
                }
            })
            .collect())
    }

    /// Exact distances for every text in `lo..hi` that could still rank in the top `k`.
    fn scan(&self, q: &[u32], lo: usize, hi: usize, k: usize) -> Vec<(usize, usize)> {
        let mut row = Vec::new();
        // (distance, first record index, text), kept sorted
        let mut best: Vec<(usize, usize, usize)> = Vec::new();
        let mut kept: Vec<(usize, usize)> = Vec::new();
        for t in lo..hi {
            let cutoff = kth(&best, &self.records, k).unwrap_or(usize::MAX);
            if let Some(d) = bounded_distance(q, &self.texts[t], cutoff, &mut row) {
                let pos = best.partition_point(|e| (e.0, e.1) < (d, self.records[t][0]));
                best.insert(pos, (d, self.records[t][0], t));
                kept.push((t, d));
            }
        }
        kept
    }
}

/// Distance of the k-th best record among `best`, counting duplicates.
fn kth(best: &[(usize, usize, usize)], records: &[Vec<usize>], k: usize) -> Option<usize> {
    let mut seen = 0;
    for &(d, _, t) in best {
        seen += records[t].len();
        if seen >= k {
            return Some(d);
        }
    }
    None
}

fn chunk_bounds(n: usize, exec: Exec) -> Vec<(usize, usize)> {
    let parts = match exec {
        Exec::Sequential => 1,
        #[cfg(feature = "parallel")]
        Exec::Parallel => rayon::current_num_threads().max(1) * 4,
    };
    let size = n.div_ceil(parts).max(1);
    (0..n).step_by(size).map(|lo| (lo, (lo + size).min(n))).collect()
}

/// Nearest-neighbour parse of `y` against a simulated dataset.
pub fn knn_parse(ds: &Dataset, y: &str, k: usize, exec: Exec) -> Result<Vec<Neighbour>, KnnError> {
    KnnIndex::new(ds)?.query(y, k, exec)
}

/// Empirical CDF: one point per distinct distance.
pub fn edit_distance_cdf(distances: &[usize]) -> Result<Vec<(usize, f64)>, KnnError> {
    if distances.is_empty() {
        return Err(KnnError::EmptyInput);
    }
    let mut sorted = distances.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (i, &d) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == d => last.1 = frac,
            _ => out.push((d, frac)),
        }
    }
    Ok(out)
}
