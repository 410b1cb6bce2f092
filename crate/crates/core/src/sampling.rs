//! Sampling policies and diversity analytics.
//!
//! Three policies draw decisions at every reached node:
//!
//! * `Iid` uses the author-specified weights of the guard-satisfied rules.
//! * `Uniform` ignores weights and picks uniformly among admissible values.
//! * `Adaptive` down-weights each value by how often it has already been drawn:
//!   `w' = w * exp(-r * n * d^depth)`, where `n` is the global visit count of
//!   `(node, value)` and `depth` is the 0-based step index in the trace.
//!
//! The analytics (uniqueness curve, Good-Turing unseen mass, Zipf fit) are
//! keyed on production text.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Origin, Record};
use crate::par::Exec;
use crate::simulator::{simulate, trace_prob, ChoiceOption, ExecError, NodeId, Simulator};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("adaptive sampling needs r > 0 and 0 < d <= 1 (got r={r}, d={d})")]
    BadParameters { r: f64, d: f64 },
    #[error("empty base distribution")]
    EmptyBase,
    #[error("nonpositive base weight {0}")]
    BadWeight(f64),
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("empty dataset")]
    Empty,
    #[error("zipf fit needs at least 3 frequencies (got {0})")]
    TooFewPoints(usize),
    #[error("frequencies must be positive")]
    NonPositiveCount,
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SamplerPolicy {
    Iid,
    Uniform,
    Adaptive { r: f64, d: f64 },
}

impl SamplerPolicy {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if let SamplerPolicy::Adaptive { r, d } = *self {
            if !(r > 0.0 && r.is_finite() && d > 0.0 && d <= 1.0) {
                return Err(SamplingError::BadParameters { r, d });
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerPolicy::Iid => "iid",
            SamplerPolicy::Uniform => "uniform",
            SamplerPolicy::Adaptive { .. } => "adaptive",
        }
    }
}

/// Visit counts per `(node, value)`, accumulated over one sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisitCounts {
    counts: Vec<Vec<u64>>,
}

impl VisitCounts {
    pub fn new(sim: &Simulator) -> Self {
        VisitCounts {
            counts: sim.nodes().iter().map(|n| vec![0; n.domain.len()]).collect(),
        }
    }

    pub fn node(&self, node: NodeId) -> &[u64] {
        &self.counts[node.0]
    }

    pub fn get(&self, sim: &Simulator, node: &str, value: &str) -> Option<u64> {
        let id = sim.node_id(node)?;
        let v = sim.node(id).value_id(value)?;
        Some(self.counts[id.0][v.0])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().flatten().for_each(|c| *c = 0);
    }
}

/// Down-weighted, renormalized distribution for the adaptive policy.
///
/// Computed in log space so large counts never underflow the whole
/// distribution; every positive-weight choice keeps positive probability.
pub fn adjusted_weights(
    base: &[f64],
    counts: &[u64],
    depth: usize,
    r: f64,
    d: f64,
) -> Result<Vec<f64>, SamplingError> {
    if base.is_empty() {
        return Err(SamplingError::EmptyBase);
    }
    if !(r >= 0.0 && r.is_finite() && d > 0.0 && d <= 1.0) {
        return Err(SamplingError::BadParameters { r, d });
    }
    if let Some(&w) = base.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(SamplingError::BadWeight(w));
    }
    assert_eq!(base.len(), counts.len(), "one count per base weight");
    let decay = d.powi(depth.min(i32::MAX as usize) as i32);
    let logits: Vec<f64> = base
        .iter()
        .zip(counts)
        .map(|(w, &n)| w.ln() - r * n as f64 * decay)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = p.iter().sum();
    for x in &mut p {
        *x = (*x / total).max(f64::MIN_POSITIVE);
    }
    Ok(p)
}

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// A policy together with the visit counts it accumulates.
#[derive(Clone, Debug)]
pub struct Sampler {
    policy: SamplerPolicy,
    counts: VisitCounts,
}

impl Sampler {
    pub fn new(sim: &Simulator, policy: SamplerPolicy) -> Result<Self, SamplingError> {
        policy.validate()?;
        Ok(Sampler {
            policy,
            counts: VisitCounts::new(sim),
        })
    }

    pub fn policy(&self) -> SamplerPolicy {
        self.policy
    }

    pub fn counts(&self) -> &VisitCounts {
        &self.counts
    }

    /// Distribution over `options` at this point of the run.
    pub fn distribution(&self, node: NodeId, options: &[ChoiceOption], depth: usize) -> Vec<f64> {
        match self.policy {
            SamplerPolicy::Iid => normalize(&options.iter().map(|o| o.weight).collect::<Vec<_>>()),
            SamplerPolicy::Uniform => vec![1.0 / options.len() as f64; options.len()],
            SamplerPolicy::Adaptive { r, d } => {
                let base: Vec<f64> = options.iter().map(|o| o.weight).collect();
                let seen = self.counts.node(node);
                let counts: Vec<u64> = options.iter().map(|o| seen[o.value.0]).collect();
                adjusted_weights(&base, &counts, depth, r, d).expect("validated policy")
            }
        }
    }

    /// Draw one of `options`, recording the visit.
    pub fn pick<R: Rng + ?Sized>(
        &mut self,
        node: NodeId,
        options: &[ChoiceOption],
        depth: usize,
        rng: &mut R,
    ) -> usize {
        let i = if options.len() == 1 {
            0
        } else {
            let probs = self.distribution(node, options, depth);
            draw(&probs, rng)
        };
        self.counts.counts[node.0][options[i].value.0] += 1;
        i
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Generate `n` records in generation order.
///
/// Iid and uniform runs give every sample its own ChaCha8 stream derived from
/// `seed`, so the result does not depend on how the work is split. Adaptive
/// runs are a single sequential stream feeding one set of visit counts.
pub fn sample_dataset(
    sim: &Simulator,
    policy: SamplerPolicy,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Dataset, SamplingError> {
    if n == 0 {
        return Err(SamplingError::ZeroSamples);
    }
    policy.validate()?;
    let records: Vec<Record> = match policy {
        SamplerPolicy::Adaptive { .. } => {
            let mut sampler = Sampler::new(sim, policy)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| simulate(sim, &mut sampler, &mut rng).map(Record::simulated))
                .collect::<Result<_, _>>()?
        }
        _ => exec
            .map_range(n, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut sampler = Sampler::new(sim, policy).expect("validated policy");
                simulate(sim, &mut sampler, &mut rng).map(Record::simulated)
            })
            .into_iter()
            .collect::<Result<_, _>>()?,
    };
    let mut ds = Dataset::new(sim.grammar_hash().to_string(), records);
    ds.policy = Some(policy);
    ds.seed = Some(seed);
    Ok(ds)
}

/// `(samples so far, distinct production texts so far)` after every record.
pub fn uniqueness_curve(ds: &Dataset) -> Result<Vec<(usize, usize)>, SamplingError> {
    if ds.records.is_empty() {
        return Err(SamplingError::Empty);
    }
    let mut seen = std::collections::HashSet::new();
    Ok(ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            seen.insert(r.production.text.as_str());
            (i + 1, seen.len())
        })
        .collect())
}

/// Mean base-grammar probability of the simulated records in each
/// consecutive window of `window` records; a trailing partial window is dropped.
pub fn window_mean_prob(sim: &Simulator, ds: &Dataset, window: usize) -> Result<Vec<f64>, SamplingError> {
    let probs: Vec<f64> = simulated_only(ds)
        .map(|r| trace_prob(sim, &r.trace))
        .collect::<Result<_, _>>()?;
    if probs.is_empty() || window == 0 {
        return Err(SamplingError::Empty);
    }
    Ok(probs
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect())
}

/// Good-Turing estimate of the probability that the next sample is unseen:
/// the fraction of the prefix made of texts seen exactly once.
pub fn good_turing<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<f64, SamplingError> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut n = 0u64;
    for t in texts {
        *counts.entry(t).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(SamplingError::Empty);
    }
    let singletons = counts.values().filter(|&&c| c == 1).count();
    Ok(singletons as f64 / n as f64)
}

/// Good-Turing estimate after every prefix of the dataset.
pub fn good_turing_curve(ds: &Dataset) -> Result<Vec<(usize, f64)>, SamplingError> {
    if ds.records.is_empty() {
        return Err(SamplingError::Empty);
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut singletons = 0i64;
    Ok(ds
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let c = counts.entry(r.production.text.as_str()).or_default();
            *c += 1;
            match *c {
                1 => singletons += 1,
                2 => singletons -= 1,
                _ => {}
            }
            (i + 1, singletons as f64 / (i + 1) as f64)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZipfFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(ln rank, ln frequency)`.
///
/// Ranks follow descending frequency; equal frequencies keep input order.
pub fn zipf_fit(freqs: &[f64]) -> Result<ZipfFit, SamplingError> {
    if freqs.len() < 3 {
        return Err(SamplingError::TooFewPoints(freqs.len()));
    }
    if freqs.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(SamplingError::NonPositiveCount);
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let xs: Vec<f64> = (1..=sorted.len()).map(|r| (r as f64).ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|f| f.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(ZipfFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Frequency of every distinct production text, in first-occurrence order.
pub fn text_frequencies(ds: &Dataset) -> Vec<(String, u64)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<(String, u64)> = Vec::new();
    for r in &ds.records {
        let text = r.production.text.as_str();
        match index.get(text) {
            Some(&i) => out[i].1 += r.freq,
            None => {
                index.insert(text, out.len());
                out.push((text.to_string(), r.freq));
            }
        }
    }
    out
}

/// Keep only simulated records (real solutions carry no trace).
pub fn simulated_only(ds: &Dataset) -> impl Iterator<Item = &Record> {
    ds.records.iter().filter(|r| r.origin == Origin::Simulated)
}
