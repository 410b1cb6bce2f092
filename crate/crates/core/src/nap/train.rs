use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{run, trace_steps, InferenceModel, Pair, Prepared};
use super::params::Grads;
use super::NapError;
use crate::dataset::{Dataset, Origin, Record};
use crate::par::Exec;
use crate::simulator::Simulator;

/// A batch whose mean loss exceeds this many nats per step is treated as
/// divergence, as is any non-finite loss or parameter.
pub const DIVERGENCE_NATS: f64 = 1e3;

/// Distinct texts per unit of parallel work. Fixed so that gradient sums are
/// bit-identical whatever the execution mode.
const GROUP_TEXTS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean negative log-likelihood per decision, per epoch.
    pub epoch_loss: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    wd: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64, wd: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            wd,
        }
    }

    /// Adam step followed by decoupled weight decay.
    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::B1.powi(self.t);
        let bc2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            *p -= self.lr * step + self.lr * self.wd * *p;
        }
    }
}

struct BatchOut {
    grad: Vec<f64>,
    nll: f64,
    steps: f64,
}

/// Mean-NLL gradient of a batch of prepared records.
fn batch_gradient(model: &InferenceModel, prep: &Prepared, batch: &[usize], exec: Exec) -> BatchOut {
    let mut groups: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for &r in batch {
        let (text, trace) = (prep.record_text[r], prep.record_trace[r]);
        let g = *slot.entry(text).or_insert_with(|| {
            groups.push((text, Vec::new()));
            groups.len() - 1
        });
        match groups[g].1.iter_mut().find(|(t, _)| *t == trace) {
            Some((_, c)) => *c += 1.0,
            None => groups[g].1.push((trace, 1.0)),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks: Vec<&[(usize, Vec<(usize, f64)>)]> = groups.chunks(GROUP_TEXTS).collect();
    let parts = exec.map(&chunks, |chunk| {
        let texts: Vec<&[u32]> = chunk.iter().map(|(t, _)| prep.texts[*t].as_slice()).collect();
        let mut pairs = Vec::new();
        let mut steps = 0.0;
        for (slot, (_, traces)) in chunk.iter().enumerate() {
            for &(tr, count) in traces {
                steps += count * prep.traces[tr].len() as f64;
                pairs.push(Pair {
                    text: slot,
                    steps: &prep.traces[tr],
                    weight: count * scale,
                });
            }
        }
        let mut grads = Grads::zeros(&model.params);
        let out = run(model, &texts, &pairs, Some(&mut grads));
        (grads.data, out.loss, steps)
    });
    let mut total = BatchOut {
        grad: vec![0.0; model.params.len()],
        nll: 0.0,
        steps: 0.0,
    };
    for (g, loss, steps) in parts {
        for (a, b) in total.grad.iter_mut().zip(&g) {
            *a += b;
        }
        total.nll += loss / scale;
        total.steps += steps;
    }
    total
}

/// Mini-batch optimizer state over a fixed training set.
pub struct Trainer<'m> {
    model: &'m mut InferenceModel,
    prep: Prepared,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    batch: usize,
    epoch_nll: f64,
    epoch_steps: f64,
    exec: Exec,
}

impl<'m> Trainer<'m> {
    /// Prepare the simulated records of `ds` (records with a trace).
    pub fn new(model: &'m mut InferenceModel, sim: &Simulator, ds: &Dataset, exec: Exec) -> Result<Self, NapError> {
        model.check_grammar(sim)?;
        let records: Vec<&Record> = ds
            .records
            .iter()
            .filter(|r| r.origin == Origin::Simulated && !r.trace.is_empty())
            .collect();
        if records.is_empty() {
            return Err(NapError::EmptyDataset);
        }
        let prep = Prepared::new(model, sim, &records)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(1);
        let adam = Adam::new(model.params.len(), model.config.lr, model.config.weight_decay);
        Ok(Trainer {
            order: (0..records.len()).collect(),
            model,
            prep,
            adam,
            rng,
            cursor: 0,
            epoch: 0,
            batch: 0,
            epoch_nll: 0.0,
            epoch_steps: 0.0,
            exec,
        })
    }

    pub fn model(&self) -> &InferenceModel {
        self.model
    }

    /// One optimizer step; returns the batch loss in nats per decision.
    pub fn step(&mut self) -> Result<f64, NapError> {
        if self.cursor == 0 {
            self.order.shuffle(&mut self.rng);
            self.epoch_nll = 0.0;
            self.epoch_steps = 0.0;
            self.batch = 0;
        }
        let end = (self.cursor + self.model.config.batch_size).min(self.order.len());
        let out = batch_gradient(self.model, &self.prep, &self.order[self.cursor..end], self.exec);
        let loss = out.nll / out.steps;
        let diverged = || NapError::NonFiniteLoss {
            epoch: self.epoch + 1,
            batch: self.batch + 1,
            loss,
        };
        if !loss.is_finite() || loss > DIVERGENCE_NATS || !out.grad.iter().all(|g| g.is_finite()) {
            return Err(diverged());
        }
        self.adam.update(&mut self.model.params.data, &out.grad);
        if !self.model.params.all_finite() {
            return Err(diverged());
        }
        self.epoch_nll += out.nll;
        self.epoch_steps += out.steps;
        self.batch += 1;
        self.cursor = end;
        if self.cursor == self.order.len() {
            self.cursor = 0;
            self.epoch += 1;
        }
        Ok(loss)
    }

    /// Run to the end of the current epoch; returns its mean loss per decision.
    pub fn epoch(&mut self) -> Result<f64, NapError> {
        loop {
            self.step()?;
            if self.cursor == 0 {
                return Ok(self.epoch_nll / self.epoch_steps);
            }
        }
    }
}

/// Train for `model.config.epochs` epochs with teacher forcing.
pub fn train(model: &mut InferenceModel, sim: &Simulator, ds: &Dataset, exec: Exec) -> Result<TrainReport, NapError> {
    let epochs = model.config.epochs;
    let mut trainer = Trainer::new(model, sim, ds, exec)?;
    let mut report = TrainReport { epoch_loss: Vec::new() };
    for e in 0..epochs {
        let loss = trainer.epoch()?;
        log::info!("epoch {}/{}: {:.5} nats/step", e + 1, epochs, loss);
        report.epoch_loss.push(loss);
    }
    Ok(report)
}

/// Gradients smaller than this are below what central differences on an f64
/// loss can resolve at the usual step sizes.
const GRAD_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient of a record's NLL
/// and central finite differences, over `samples` parameters drawn (with a
/// `seed`ed generator) from those whose analytic gradient exceeds a small floor.
pub fn grad_check(
    model: &InferenceModel,
    sim: &Simulator,
    record: &Record,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, NapError> {
    if record.trace.is_empty() {
        return Err(NapError::EmptyTrace);
    }
    model.check_grammar(sim)?;
    let steps = trace_steps(sim, &record.trace).map_err(|source| NapError::InvalidTrace { record: 0, source })?;
    let tokens = model.vocab.encode(record.text());
    let pair = [Pair {
        text: 0,
        steps: &steps,
        weight: 1.0,
    }];
    let mut grads = Grads::zeros(&model.params);
    run(model, &[&tokens], &pair, Some(&mut grads));
    let analytic = grads.data;
    if !analytic.iter().all(|g| g.is_finite()) {
        return Err(NapError::NonFiniteGradient);
    }
    let mut candidates: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i].abs() > GRAD_FLOOR).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(samples);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in candidates {
        let orig = probe.params.data[i];
        probe.params.data[i] = orig + epsilon;
        let up = run(&probe, &[&tokens], &pair, None).loss;
        probe.params.data[i] = orig - epsilon;
        let down = run(&probe, &[&tokens], &pair, None).loss;
        probe.params.data[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        if !fd.is_finite() {
            return Err(NapError::NonFiniteGradient);
        }
        let g = analytic[i];
        worst = worst.max((g - fd).abs() / (g.abs() + fd.abs()).max(1e-8));
    }
    Ok(worst)
}

/// Teacher-forced accuracy of the masked argmax over every decision of
/// `records`.
pub fn step_accuracy(model: &InferenceModel, sim: &Simulator, records: &[&Record], exec: Exec) -> Result<f64, NapError> {
    model.check_grammar(sim)?;
    if records.is_empty() {
        return Err(NapError::EmptyDataset);
    }
    let prep = Prepared::new(model, sim, records)?;
    let idx: Vec<usize> = (0..records.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(GROUP_TEXTS).collect();
    let counts = exec.map(&chunks, |chunk| {
        let texts: Vec<&[u32]> = chunk.iter().map(|&r| prep.texts[prep.record_text[r]].as_slice()).collect();
        let pairs: Vec<Pair> = chunk
            .iter()
            .enumerate()
            .map(|(slot, &r)| Pair {
                text: slot,
                steps: &prep.traces[prep.record_trace[r]],
                weight: 1.0,
            })
            .collect();
        let out = run(model, &texts, &pairs, None);
        let flat = out.correct.iter().flatten();
        (flat.clone().filter(|&&c| c).count(), flat.count())
    });
    let (hit, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(hit as f64 / total as f64)
}

/// Accuracy on `test` of always predicting each node's most frequent value in
/// `train`.
pub fn constant_baseline_accuracy(sim: &Simulator, train: &[&Record], test: &[&Record]) -> f64 {
    let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
    for r in train {
        for s in r.trace.iter() {
            *counts.entry((s.node(), s.value())).or_default() += 1;
        }
    }
    let mut best: HashMap<&str, (&str, usize)> = HashMap::new();
    for spec in sim.nodes() {
        for v in &spec.domain {
            let c = counts.get(&(&*spec.name, &**v)).copied().unwrap_or(0);
            let e = best.entry(&spec.name).or_insert((v, c));
            if c > e.1 {
                *e = (v, c);
            }
        }
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for r in test {
        for s in r.trace.iter() {
            total += 1;
            if best.get(s.node()).is_some_and(|b| b.0 == s.value()) {
                hit += 1;
            }
        }
    }
    hit as f64 / total.max(1) as f64
}
