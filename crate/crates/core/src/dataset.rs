//! Corpora of `(trace, production)` records.
//!
//! On disk a dataset is newline-delimited JSON: one header object followed by
//! one object per record with fields `trace`, `text`, `spans`, `origin` and
//! `freq`. Real student solutions are stored with an empty trace and origin
//! `"real"`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::{text_frequencies, SamplerPolicy};
use crate::simulator::{Production, Simulator, Span, Trace};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Simulated,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub trace: Trace,
    pub production: Production,
    pub origin: Origin,
    pub freq: u64,
}

impl Record {
    pub fn simulated((trace, production): (Trace, Production)) -> Self {
        Record {
            trace,
            production,
            origin: Origin::Simulated,
            freq: 1,
        }
    }

    /// A real solution: no trace, no spans.
    pub fn real(text: impl Into<String>, freq: u64) -> Self {
        Record {
            trace: Trace::default(),
            production: Production {
                text: text.into(),
                spans: Vec::new(),
            },
            origin: Origin::Real,
            freq,
        }
    }

    pub fn text(&self) -> &str {
        &self.production.text
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grammar_hash: String,
    pub policy: Option<SamplerPolicy>,
    pub seed: Option<u64>,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    gengrade_dataset: u32,
    grammar_hash: String,
    #[serde(default)]
    policy: Option<SamplerPolicy>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    trace: Trace,
    text: String,
    spans: Vec<Span>,
    origin: Origin,
    freq: u64,
}

/// Warning raised when a dataset is used with a grammar other than the one it
/// was generated from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashMismatch {
    pub dataset: String,
    pub grammar: String,
}

impl std::fmt::Display for HashMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "grammar hash mismatch: dataset was generated from {} but grammar is {}",
            short(&self.dataset),
            short(&self.grammar)
        )
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

impl Dataset {
    pub fn new(grammar_hash: String, records: Vec<Record>) -> Self {
        Dataset {
            grammar_hash,
            policy: None,
            seed: None,
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `Some` when the simulated records were generated from another grammar.
    pub fn check_grammar(&self, sim: &Simulator) -> Option<HashMismatch> {
        let has_simulated = self.records.iter().any(|r| r.origin == Origin::Simulated);
        (has_simulated && self.grammar_hash != sim.grammar_hash()).then(|| HashMismatch {
            dataset: self.grammar_hash.clone(),
            grammar: sim.grammar_hash().to_string(),
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), DatasetError> {
        let header = Header {
            gengrade_dataset: FORMAT_VERSION,
            grammar_hash: self.grammar_hash.clone(),
            policy: self.policy,
            seed: self.seed,
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = Line {
                trace: r.trace.clone(),
                text: r.production.text.clone(),
                spans: r.production.spans.clone(),
                origin: r.origin,
                freq: r.freq,
            };
            serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, DatasetError> {
        let mut lines = r.lines().enumerate();
        let header: Header = loop {
            match lines.next() {
                None => return Err(DatasetError::Empty),
                Some((i, line)) => {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                        line: i + 1,
                        message: format!("bad header: {e}"),
                    })?;
                }
            }
        };
        if header.gengrade_dataset != FORMAT_VERSION {
            return Err(DatasetError::Parse {
                line: 1,
                message: format!("unsupported format version {}", header.gengrade_dataset),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if parsed.freq == 0 {
                return Err(DatasetError::Parse {
                    line: i + 1,
                    message: "freq must be at least 1".into(),
                });
            }
            records.push(Record {
                trace: parsed.trace,
                production: Production {
                    text: parsed.text,
                    spans: parsed.spans,
                },
                origin: parsed.origin,
                freq: parsed.freq,
            });
        }
        Ok(Dataset {
            grammar_hash: header.grammar_hash,
            policy: header.policy,
            seed: header.seed,
            records,
        })
    }
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    ds.write_to(BufWriter::new(File::create(path)?))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    Dataset::read_from(BufReader::new(File::open(path)?))
}

/// Read a dataset and report whether it matches `sim`.
pub fn read_dataset_for(
    path: impl AsRef<Path>,
    sim: &Simulator,
) -> Result<(Dataset, Option<HashMismatch>), DatasetError> {
    let ds = read_dataset(path)?;
    let warning = ds.check_grammar(sim);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok((ds, warning))
}

/// Split a plain solutions file: entries are separated by lines holding
/// only `---`. Surrounding blank lines are dropped, inner layout is kept.
pub fn parse_solutions(src: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    let mut flush = |cur: &mut Vec<&str>| {
        let text = cur.join("\n");
        let text = text.trim_matches('\n');
        if !text.trim().is_empty() {
            out.push(text.to_string());
        }
        cur.clear();
    };
    for line in src.lines() {
        if line.trim_end() == "---" {
            flush(&mut cur);
        } else {
            cur.push(line);
        }
    }
    flush(&mut cur);
    out
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SolutionLine {
    Text(String),
    Object { text: String },
}

/// Solutions from `path`; `.ndjson` files hold one JSON string or
/// `{"text": ...}` object per line.
pub fn read_solutions(path: impl AsRef<Path>) -> Result<Vec<String>, DatasetError> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "ndjson") {
        let mut out = Vec::new();
        for (i, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SolutionLine = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(match parsed {
                SolutionLine::Text(t) | SolutionLine::Object { text: t } => t,
            });
        }
        Ok(out)
    } else {
        Ok(parse_solutions(&src))
    }
}

/// A solution with human-assigned feedback labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldRecord {
    pub text: String,
    pub labels: Vec<String>,
}

pub fn read_gold(path: impl AsRef<Path>) -> Result<Vec<GoldRecord>, DatasetError> {
    let src = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Body,
    Tail,
}

/// Head (k most frequent texts), tail (frequency 1 or 2) and body (the rest).
/// A text that qualifies for both head and tail goes to the head.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZipfPartition {
    pub k: usize,
    pub head: Vec<String>,
    pub body: Vec<String>,
    pub tail: Vec<String>,
}

impl ZipfPartition {
    pub fn region_of(&self, text: &str) -> Option<Region> {
        if self.head.iter().any(|t| t == text) {
            Some(Region::Head)
        } else if self.tail.iter().any(|t| t == text) {
            Some(Region::Tail)
        } else if self.body.iter().any(|t| t == text) {
            Some(Region::Body)
        } else {
            None
        }
    }

    pub fn lookup(&self) -> HashMap<&str, Region> {
        let mut map = HashMap::new();
        for (texts, region) in [(&self.head, Region::Head), (&self.body, Region::Body), (&self.tail, Region::Tail)] {
            for t in texts {
                map.insert(t.as_str(), region);
            }
        }
        map
    }
}

/// Partition distinct texts by popularity. `freqs` is in first-occurrence order;
/// equal frequencies keep that order.
pub fn partition_zipf(freqs: &[(String, u64)], k: usize) -> ZipfPartition {
    let mut merged: Vec<(String, u64)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (t, f) in freqs {
        match index.get(t.as_str()) {
            Some(&i) => merged[i].1 += f,
            None => {
                index.insert(t.as_str(), merged.len());
                merged.push((t.clone(), *f));
            }
        }
    }
    let mut order: Vec<usize> = (0..merged.len()).collect();
    order.sort_by(|&a, &b| merged[b].1.cmp(&merged[a].1).then(a.cmp(&b)));
    let mut part = ZipfPartition {
        k,
        head: Vec::new(),
        body: Vec::new(),
        tail: Vec::new(),
    };
    for (rank, i) in order.into_iter().enumerate() {
        let (text, f) = &merged[i];
        if rank < k {
            part.head.push(text.clone());
        } else if *f <= 2 {
            part.tail.push(text.clone());
        } else {
            part.body.push(text.clone());
        }
    }
    part
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DedupStats {
    pub distinct: usize,
    pub max_frequency: u64,
    pub singletons: usize,
}

/// Distinct texts, the largest text frequency and the number of texts seen once.
pub fn dedup_stats(ds: &Dataset) -> Result<DedupStats, DatasetError> {
    if ds.records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let freqs = text_frequencies(ds);
    Ok(DedupStats {
        distinct: freqs.len(),
        max_frequency: freqs.iter().map(|(_, f)| *f).max().unwrap_or(0),
        singletons: freqs.iter().filter(|(_, f)| *f == 1).count(),
    })
}
