use std::collections::HashMap;

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::gru::{self, GruIds};
use super::params::{Grads, Params};
use super::vocab::Vocabulary;
use super::{ModelConfig, NapError};
use crate::dataset::{Dataset, Origin, Record};
use crate::simulator::{ExecError, Execution, Simulator, Trace};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub encoder: Vec<GruIds>,
    pub name_emb: usize,
    pub start_emb: usize,
    pub val_emb: Vec<usize>,
    pub decoder: GruIds,
    pub head_w: Vec<usize>,
    pub head_b: Vec<usize>,
}

impl Layout {
    pub fn new(params: &mut Params, cfg: &ModelConfig, vocab: &Vocabulary) -> Self {
        let (e, h) = (cfg.embed, cfg.hidden);
        let tok_emb = params.add("token_embedding", &[vocab.token_count(), e]);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| GruIds::add(params, &format!("encoder.{l}"), if l == 0 { e } else { h }, h))
            .collect();
        let nodes = vocab.nodes();
        let name_emb = params.add("name_embedding", &[nodes.len(), e]);
        let start_emb = params.add("start_embedding", &[1, e]);
        let val_emb = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| params.add(format!("value_embedding.{n}"), &[vocab.values(i).len(), e]))
            .collect();
        let decoder = GruIds::add(params, "decoder", 2 * e + h, h);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for (i, n) in nodes.iter().enumerate() {
            head_w.push(params.add(format!("head.{n}.w"), &[vocab.values(i).len(), h]));
            head_b.push(params.add(format!("head.{n}.b"), &[vocab.values(i).len()]));
        }
        Layout {
            tok_emb,
            encoder,
            name_emb,
            start_emb,
            val_emb,
            decoder,
            head_w,
            head_b,
        }
    }
}

/// Trained or untrained parser parameters with everything needed to use them.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub grammar_hash: String,
    pub params: Params,
    pub(crate) layout: Layout,
}

impl InferenceModel {
    pub(crate) fn assemble(
        config: ModelConfig,
        vocab: Vocabulary,
        grammar_hash: String,
    ) -> (Self, ChaCha8Rng) {
        let mut params = Params::default();
        let layout = Layout::new(&mut params, &config, &vocab);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        (
            InferenceModel {
                config,
                vocab,
                grammar_hash,
                params,
                layout,
            },
            rng,
        )
    }

    /// Output size of every node's decoding head, in grammar order.
    pub fn head_sizes(&self) -> Vec<usize> {
        self.layout.head_b.iter().map(|&id| self.params.tensors[id].len()).collect()
    }

    pub fn check_grammar(&self, sim: &Simulator) -> Result<(), NapError> {
        if self.grammar_hash != sim.grammar_hash() {
            return Err(NapError::HashMismatch {
                expected: self.grammar_hash.clone(),
                found: sim.grammar_hash().to_string(),
            });
        }
        Ok(())
    }
}

/// Initialize a model for `sim` with a vocabulary drawn from `ds`.
pub fn build_model(sim: &Simulator, ds: &Dataset, cfg: &ModelConfig) -> Result<InferenceModel, NapError> {
    cfg.validate()?;
    if ds.records.iter().any(|r| r.origin == Origin::Simulated) && ds.grammar_hash != sim.grammar_hash() {
        return Err(NapError::HashMismatch {
            expected: sim.grammar_hash().to_string(),
            found: ds.grammar_hash.clone(),
        });
    }
    for r in &ds.records {
        for step in r.trace.iter() {
            let id = sim.node_id(step.node()).ok_or_else(|| NapError::UnknownNode(step.node().to_string()))?;
            if sim.node(id).value_id(step.value()).is_none() {
                return Err(NapError::UnknownValue {
                    node: step.node().to_string(),
                    value: step.value().to_string(),
                });
            }
        }
    }
    let vocab = Vocabulary::build(sim, ds.records.iter().map(|r| r.text()));
    let (mut model, mut rng) = InferenceModel::assemble(cfg.clone(), vocab, sim.grammar_hash().to_string());
    let bound = 1.0 / (cfg.hidden as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let params = &mut model.params;
    for id in 0..params.tensors.len() {
        let embedding = params.tensors[id].name.contains("embedding");
        for v in params.slice_mut(id) {
            *v = if embedding {
                normal.sample(&mut rng)
            } else {
                uniform.sample(&mut rng)
            };
        }
    }
    Ok(model)
}

/// One decision of a trace with the values the grammar admitted there.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct StepIx {
    pub node: usize,
    pub value: usize,
    pub admissible: Vec<usize>,
}

/// Replay `trace`, recording node ids, value ids and admissible value sets.
pub(crate) fn trace_steps(sim: &Simulator, trace: &Trace) -> Result<Vec<StepIx>, ExecError> {
    let mut exec = Execution::new(sim);
    let mut out = Vec::with_capacity(trace.len());
    for (i, step) in trace.iter().enumerate() {
        let invalid = |reason: String| ExecError::InvalidTrace { step: i + 1, reason };
        let node = exec
            .pending()
            .ok_or_else(|| invalid("trace too long: execution already complete".into()))?;
        let spec = sim.node(node);
        if *spec.name != *step.node() {
            return Err(invalid(format!("expected node {} but trace has {}", spec.name, step.node())));
        }
        let options = exec.options()?;
        let value = spec
            .value_id(step.value())
            .ok_or_else(|| invalid(format!("unknown value '{}' for {}", step.value(), spec.name)))?;
        let chosen = options
            .iter()
            .find(|o| o.value == value)
            .ok_or_else(|| invalid(format!("value '{}' not admissible for {}", step.value(), spec.name)))?;
        out.push(StepIx {
            node: node.0,
            value: value.0,
            admissible: options.iter().map(|o| o.value.0).collect(),
        });
        exec.choose(chosen.rule)?;
    }
    if exec.pending().is_some() {
        return Err(ExecError::InvalidTrace {
            step: trace.len() + 1,
            reason: "trace too short: execution still pending".into(),
        });
    }
    Ok(out)
}

/// Token ids and replayed steps for a set of records, deduplicated.
pub(crate) struct Prepared {
    pub texts: Vec<Vec<u32>>,
    pub traces: Vec<Vec<StepIx>>,
    pub record_text: Vec<usize>,
    pub record_trace: Vec<usize>,
}

impl Prepared {
    pub fn new(model: &InferenceModel, sim: &Simulator, records: &[&Record]) -> Result<Self, NapError> {
        let mut text_ids: HashMap<&str, usize> = HashMap::new();
        let mut trace_ids: HashMap<&Trace, usize> = HashMap::new();
        let mut p = Prepared {
            texts: Vec::new(),
            traces: Vec::new(),
            record_text: Vec::with_capacity(records.len()),
            record_trace: Vec::with_capacity(records.len()),
        };
        for (i, r) in records.iter().enumerate() {
            let t = *text_ids.entry(r.text()).or_insert_with(|| {
                p.texts.push(model.vocab.encode(r.text()));
                p.texts.len() - 1
            });
            let tr = match trace_ids.get(&r.trace) {
                Some(&id) => id,
                None => {
                    let steps =
                        trace_steps(sim, &r.trace).map_err(|source| NapError::InvalidTrace { record: i, source })?;
                    p.traces.push(steps);
                    trace_ids.insert(&r.trace, p.traces.len() - 1);
                    p.traces.len() - 1
                }
            };
            p.record_text.push(t);
            p.record_trace.push(tr);
        }
        Ok(p)
    }
}

/// A (text, trace) pair scored in a batch; `text` indexes the batch's texts.
pub(crate) struct Pair<'a> {
    pub text: usize,
    pub steps: &'a [StepIx],
    pub weight: f64,
}

pub(crate) struct RunOut {
    /// Weighted negative log-likelihood.
    pub loss: f64,
    /// Log-probability of the true value at every step of every pair.
    pub log_probs: Vec<Vec<f64>>,
    /// Whether the masked argmax equals the true value.
    pub correct: Vec<Vec<bool>>,
}

/// Masked log-softmax over `admissible`: `(log-probs, argmax position)`.
pub(crate) fn masked_log_softmax(
    model: &InferenceModel,
    node: usize,
    h: ndarray::ArrayView1<f64>,
    admissible: &[usize],
) -> (Vec<f64>, usize) {
    let p = &model.params;
    let (w, b) = (model.layout.head_w[node], model.layout.head_b[node]);
    let bias = p.slice(b);
    let logits: Vec<f64> = admissible
        .iter()
        .map(|&v| {
            let row = p.row(w, v);
            row.iter().zip(h.iter()).map(|(a, x)| a * x).sum::<f64>() + bias[v]
        })
        .collect();
    let mut arg = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[arg] {
            arg = i;
        }
    }
    let max = logits[arg];
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (logits.iter().map(|l| l - lse).collect(), arg)
}

/// Encode a batch of token sequences; returns the per-layer caches and the
/// `[B, H]` encodings.
fn encode_batch(model: &InferenceModel, texts: &[&[u32]]) -> (Vec<gru::Cache>, Array2<f64>) {
    let p = &model.params;
    let e = model.config.embed;
    let b = texts.len();
    let t = texts.iter().map(|x| x.len()).max().unwrap_or(0);
    let lens: Vec<usize> = texts.iter().map(|x| x.len()).collect();
    let mut x = Array2::zeros((t * b, e));
    for (bi, toks) in texts.iter().enumerate() {
        for (ti, &tok) in toks.iter().enumerate() {
            x.row_mut(ti * b + bi).assign(&ndarray::ArrayView1::from(p.row(model.layout.tok_emb, tok as usize)));
        }
    }
    let mut caches = Vec::with_capacity(model.layout.encoder.len());
    let mut input = x;
    for &ids in &model.layout.encoder {
        let c = gru::forward(p, ids, input, &lens);
        input = c.outputs().to_owned();
        caches.push(c);
    }
    let enc = caches.last().expect("at least one encoder layer").last().to_owned();
    (caches, enc)
}

/// The text encoding of one token sequence.
pub(crate) fn encode(model: &InferenceModel, tokens: &[u32]) -> Array1<f64> {
    encode_batch(model, &[tokens]).1.row(0).to_owned()
}

/// Decoder input for a step: previous value embedding (or the start vector),
/// name embedding of the current node, and the text encoding.
pub(crate) fn decoder_input(
    model: &InferenceModel,
    prev: Option<(usize, usize)>,
    node: usize,
    enc: ndarray::ArrayView1<f64>,
    out: &mut ndarray::ArrayViewMut1<f64>,
) {
    let p = &model.params;
    let e = model.config.embed;
    let prev_row = match prev {
        None => p.row(model.layout.start_emb, 0),
        Some((n, v)) => p.row(model.layout.val_emb[n], v),
    };
    out.slice_mut(s![..e]).assign(&ndarray::ArrayView1::from(prev_row));
    out.slice_mut(s![e..2 * e])
        .assign(&ndarray::ArrayView1::from(p.row(model.layout.name_emb, node)));
    out.slice_mut(s![2 * e..]).assign(&enc);
}

/// Teacher-forced forward pass over a batch of texts and (text, trace) pairs,
/// with gradients of the weighted NLL accumulated into `grads` when given.
pub(crate) fn run(model: &InferenceModel, texts: &[&[u32]], pairs: &[Pair], grads: Option<&mut Grads>) -> RunOut {
    let p = &model.params;
    let (e, h) = (model.config.embed, model.config.hidden);
    let (enc_caches, enc) = encode_batch(model, texts);

    let np = pairs.len();
    let td = pairs.iter().map(|q| q.steps.len()).max().unwrap_or(0);
    let lens: Vec<usize> = pairs.iter().map(|q| q.steps.len()).collect();
    let mut xd = Array2::zeros((td * np, 2 * e + h));
    for (pi, q) in pairs.iter().enumerate() {
        for (t, st) in q.steps.iter().enumerate() {
            let prev = (t > 0).then(|| (q.steps[t - 1].node, q.steps[t - 1].value));
            decoder_input(model, prev, st.node, enc.row(q.text), &mut xd.row_mut(t * np + pi));
        }
    }
    let dec = gru::forward(p, model.layout.decoder, xd, &lens);
    let outs = dec.outputs();

    let mut out = RunOut {
        loss: 0.0,
        log_probs: Vec::with_capacity(np),
        correct: Vec::with_capacity(np),
    };
    let mut d_out = grads.as_ref().map(|_| Array2::<f64>::zeros((td * np, h)));
    let mut grads = grads;
    for (pi, q) in pairs.iter().enumerate() {
        let mut lps = Vec::with_capacity(q.steps.len());
        let mut hits = Vec::with_capacity(q.steps.len());
        for (t, st) in q.steps.iter().enumerate() {
            let row = t * np + pi;
            let hrow = outs.row(row);
            let (logp, arg) = masked_log_softmax(model, st.node, hrow, &st.admissible);
            let truth = st.admissible.iter().position(|&v| v == st.value).expect("true value admissible");
            lps.push(logp[truth]);
            hits.push(arg == truth);
            out.loss -= q.weight * logp[truth];
            if let (Some(g), Some(d_out)) = (grads.as_deref_mut(), d_out.as_mut()) {
                let (wid, bid) = (model.layout.head_w[st.node], model.layout.head_b[st.node]);
                let mut drow = d_out.row_mut(row);
                for (k, &v) in st.admissible.iter().enumerate() {
                    let dl = q.weight * (logp[k].exp() - f64::from(u8::from(k == truth)));
                    g.m1(bid)[v] += dl;
                    let wrow = g.row_mut(wid, v);
                    for (gw, x) in wrow.iter_mut().zip(hrow.iter()) {
                        *gw += dl * x;
                    }
                    for (d, w) in drow.iter_mut().zip(p.row(wid, v)) {
                        *d += dl * w;
                    }
                }
            }
        }
        out.log_probs.push(lps);
        out.correct.push(hits);
    }

    let (Some(g), Some(d_out)) = (grads, d_out) else {
        return out;
    };
    let dxd = gru::backward(p, model.layout.decoder, &dec, d_out.view(), g);
    let mut denc = Array2::<f64>::zeros((texts.len(), h));
    for (pi, q) in pairs.iter().enumerate() {
        for (t, st) in q.steps.iter().enumerate() {
            let row = dxd.row(t * np + pi);
            let prev = if t == 0 {
                g.row_mut(model.layout.start_emb, 0)
            } else {
                let ps = &q.steps[t - 1];
                g.row_mut(model.layout.val_emb[ps.node], ps.value)
            };
            for (a, d) in prev.iter_mut().zip(row.slice(s![..e])) {
                *a += d;
            }
            for (a, d) in g.row_mut(model.layout.name_emb, st.node).iter_mut().zip(row.slice(s![e..2 * e])) {
                *a += d;
            }
            let mut dr = denc.row_mut(q.text);
            dr += &row.slice(s![2 * e..]);
        }
    }

    let b = texts.len();
    let t = texts.iter().map(|x| x.len()).max().unwrap_or(0);
    if t == 0 {
        return out;
    }
    let mut d = Array2::<f64>::zeros((t * b, h));
    d.slice_mut(s![(t - 1) * b.., ..]).assign(&denc);
    for (l, c) in enc_caches.iter().enumerate().rev() {
        d = gru::backward(p, model.layout.encoder[l], c, d.view(), g);
    }
    for (bi, toks) in texts.iter().enumerate() {
        for (ti, &tok) in toks.iter().enumerate() {
            let src = d.row(ti * b + bi);
            for (a, x) in g.row_mut(model.layout.tok_emb, tok as usize).iter_mut().zip(src) {
                *a += x;
            }
        }
    }
    out
}
