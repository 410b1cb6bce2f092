use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gru;
use super::model::{decoder_input, encode, masked_log_softmax, run, trace_steps, InferenceModel, Pair};
use super::NapError;
use crate::simulator::{ChoiceOption, ExecError, Execution, Production, Simulator, Trace};

pub const MAX_BEAM_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample { seed: u64 },
    Beam { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParseResult {
    pub trace: Trace,
    pub step_log_probs: Vec<f64>,
    pub total_log_prob: f64,
    /// The replayed production equals the input byte for byte.
    pub exact: bool,
    /// The replayed production (the nearest in-simulator neighbour).
    pub production: Production,
}

#[derive(Clone)]
struct Hyp<'s> {
    exec: Execution<'s>,
    h: Array1<f64>,
    prev: Option<(usize, usize)>,
    log_probs: Vec<f64>,
    total: f64,
}

impl<'s> Hyp<'s> {
    fn start(sim: &'s Simulator, hidden: usize) -> Self {
        Hyp {
            exec: Execution::new(sim),
            h: Array1::zeros(hidden),
            prev: None,
            log_probs: Vec::new(),
            total: 0.0,
        }
    }

    /// Admissible options at the pending node with the model's masked
    /// log-probabilities and the decoder state after this step.
    fn expand(&self, model: &InferenceModel, enc: ArrayView1<f64>) -> Result<(Vec<ChoiceOption>, Vec<f64>, Array1<f64>, usize), NapError> {
        let node = self.exec.pending().expect("expand called on a complete hypothesis");
        let options = self.exec.options().map_err(|e| match e {
            ExecError::DeadContext { node, prefix } => NapError::DeadDecode {
                step: self.exec.step_index() + 1,
                node,
                prefix,
            },
            other => NapError::Decode(other),
        })?;
        let (e, h) = (model.config.embed, model.config.hidden);
        let mut x = Array1::zeros(2 * e + h);
        decoder_input(model, self.prev, node.0, enc, &mut x.view_mut());
        let h_new = gru::step(&model.params, model.layout.decoder, x.view(), self.h.view());
        let admissible: Vec<usize> = options.iter().map(|o| o.value.0).collect();
        let (logp, arg) = masked_log_softmax(model, node.0, h_new.view(), &admissible);
        Ok((options, logp, h_new, arg))
    }

    fn commit(&mut self, option: ChoiceOption, logp: f64, h: Array1<f64>) -> Result<(), NapError> {
        let node = self.exec.pending().expect("pending node").0;
        self.exec.choose(option.rule).map_err(NapError::Decode)?;
        self.prev = Some((node, option.value.0));
        self.h = h;
        self.log_probs.push(logp);
        self.total += logp;
        Ok(())
    }

    fn into_result(self, y: &str) -> Result<ParseResult, NapError> {
        let (trace, production) = self.exec.finish().map_err(NapError::Decode)?;
        Ok(ParseResult {
            trace,
            exact: production.text == y,
            production,
            step_log_probs: self.log_probs,
            total_log_prob: self.total,
        })
    }
}

/// Grammar-constrained decoding of a trace for `y`.
pub fn parse(model: &InferenceModel, sim: &Simulator, y: &str, mode: DecodeMode) -> Result<ParseResult, NapError> {
    model.check_grammar(sim)?;
    let enc = encode(model, &model.vocab.encode(y));
    match mode {
        DecodeMode::Greedy => greedy(model, sim, enc.view(), y),
        DecodeMode::Sample { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hyp = Hyp::start(sim, model.config.hidden);
            while !hyp.exec.is_complete() {
                let (options, logp, h, _) = hyp.expand(model, enc.view())?;
                let mut u: f64 = rng.gen();
                let mut pick = logp.len() - 1;
                for (i, lp) in logp.iter().enumerate() {
                    u -= lp.exp();
                    if u < 0.0 {
                        pick = i;
                        break;
                    }
                }
                hyp.commit(options[pick], logp[pick], h)?;
            }
            hyp.into_result(y)
        }
        DecodeMode::Beam { width } => {
            if width == 0 || width > MAX_BEAM_WIDTH {
                return Err(NapError::BadBeamWidth(width));
            }
            beam(model, sim, enc.view(), y, width)
        }
    }
}

fn greedy(model: &InferenceModel, sim: &Simulator, enc: ArrayView1<f64>, y: &str) -> Result<ParseResult, NapError> {
    let mut hyp = Hyp::start(sim, model.config.hidden);
    while !hyp.exec.is_complete() {
        let (options, logp, h, arg) = hyp.expand(model, enc)?;
        hyp.commit(options[arg], logp[arg], h)?;
    }
    hyp.into_result(y)
}

/// Beam search; the greedy parse is always a candidate, so the result never
/// scores below it.
fn beam(model: &InferenceModel, sim: &Simulator, enc: ArrayView1<f64>, y: &str, width: usize) -> Result<ParseResult, NapError> {
    let greedy_result = greedy(model, sim, enc, y);
    let mut live = vec![Hyp::start(sim, model.config.hidden)];
    let mut done: Vec<Hyp> = Vec::new();
    let mut first_error = None;
    while !live.is_empty() {
        let best_done = done.iter().map(|d| d.total).fold(f64::NEG_INFINITY, f64::max);
        let mut candidates = Vec::new();
        let mut expansions = Vec::with_capacity(live.len());
        for (i, hyp) in live.iter().enumerate() {
            if hyp.total < best_done {
                expansions.push(None);
                continue;
            }
            match hyp.expand(model, enc) {
                Ok((options, logp, h, _)) => {
                    for k in 0..options.len() {
                        candidates.push((hyp.total + logp[k], i, k));
                    }
                    expansions.push(Some((options, logp, h)));
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    expansions.push(None);
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(width);
        let mut next = Vec::with_capacity(candidates.len());
        for (_, i, k) in candidates {
            let (options, logp, h) = expansions[i].as_ref().expect("expanded");
            let mut hyp = live[i].clone();
            if let Err(e) = hyp.commit(options[k], logp[k], h.clone()) {
                first_error.get_or_insert(e);
                continue;
            }
            if hyp.exec.is_complete() {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }
    let mut best: Option<ParseResult> = greedy_result.ok();
    for hyp in done {
        if best.as_ref().map_or(true, |b| hyp.total > b.total_log_prob) {
            best = Some(hyp.into_result(y)?);
        }
    }
    match (best, first_error) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("beam search ended with neither a result nor an error"),
    }
}

/// Per-step masked log-probabilities of `trace` given `y` under teacher forcing.
pub fn step_log_probs(model: &InferenceModel, sim: &Simulator, y: &str, trace: &Trace) -> Result<Vec<f64>, NapError> {
    model.check_grammar(sim)?;
    let steps = trace_steps(sim, trace).map_err(|source| NapError::InvalidTrace { record: 0, source })?;
    let tokens = model.vocab.encode(y);
    let pair = [Pair {
        text: 0,
        steps: &steps,
        weight: 1.0,
    }];
    Ok(run(model, &[&tokens], &pair, None).log_probs.swap_remove(0))
}

/// `log p(trace | y)`: the sum of [`step_log_probs`].
pub fn posterior_eval(model: &InferenceModel, sim: &Simulator, y: &str, trace: &Trace) -> Result<f64, NapError> {
    Ok(step_log_probs(model, sim, y, trace)?.iter().sum())
}
