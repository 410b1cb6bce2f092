use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ExecError, Execution, Production, Simulator, Trace};
use crate::sampling::{Sampler, SamplerPolicy, SamplingError};

/// Run the simulator once, drawing every decision through `sampler`.
pub fn simulate<R: Rng + ?Sized>(
    sim: &Simulator,
    sampler: &mut Sampler,
    rng: &mut R,
) -> Result<(Trace, Production), ExecError> {
    let mut exec = Execution::new(sim);
    while let Some(node) = exec.pending() {
        let options = exec.options()?;
        let depth = exec.step_index();
        let pick = sampler.pick(node, &options, depth, rng);
        exec.choose(options[pick].rule)?;
    }
    exec.finish()
}

/// One-shot simulation with a fresh sampler and a ChaCha8 stream seeded from `seed`.
pub fn simulate_seeded(
    sim: &Simulator,
    seed: u64,
    policy: SamplerPolicy,
) -> Result<(Trace, Production), SamplingError> {
    let mut sampler = Sampler::new(sim, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(simulate(sim, &mut sampler, &mut rng)?)
}

/// Drive an execution with recorded decisions, calling `on_step` with the
/// guard-renormalized probability of each one.
fn drive<'s>(
    sim: &'s Simulator,
    trace: &Trace,
    mut on_step: impl FnMut(f64),
) -> Result<Execution<'s>, ExecError> {
    let mut exec = Execution::new(sim);
    for (i, step) in trace.steps.iter().enumerate() {
        let t = i + 1;
        let Some(node) = exec.pending() else {
            return Err(ExecError::InvalidTrace {
                step: t,
                reason: "trace too long: execution already complete".into(),
            });
        };
        let spec = sim.node(node);
        if *spec.name != *step.node() {
            return Err(ExecError::InvalidTrace {
                step: t,
                reason: format!("expected node {} but trace has {}", spec.name, step.node()),
            });
        }
        let options = exec.options().map_err(|e| match e {
            ExecError::DeadContext { node, .. } => ExecError::InvalidTrace {
                step: t,
                reason: format!("no rule of {node} is satisfiable here"),
            },
            other => other,
        })?;
        let chosen = spec.value_id(step.value()).and_then(|v| options.iter().find(|o| o.value == v));
        let Some(chosen) = chosen else {
            return Err(ExecError::InvalidTrace {
                step: t,
                reason: format!("value '{}' not admissible for {}", step.value(), spec.name),
            });
        };
        let total: f64 = options.iter().map(|o| o.weight).sum();
        on_step(chosen.weight / total);
        exec.choose(chosen.rule)?;
    }
    if exec.pending().is_some() {
        return Err(ExecError::InvalidTrace {
            step: trace.len() + 1,
            reason: "trace too short: execution still pending".into(),
        });
    }
    Ok(exec)
}

/// Re-execute the simulator substituting the recorded decisions.
pub fn replay(sim: &Simulator, trace: &Trace) -> Result<Production, ExecError> {
    Ok(drive(sim, trace, |_| {})?.finish()?.1)
}

/// Probability of `trace` under the author-specified distribution.
pub fn trace_prob(sim: &Simulator, trace: &Trace) -> Result<f64, ExecError> {
    let mut p = 1.0;
    drive(sim, trace, |q| p *= q)?;
    Ok(p)
}

#[derive(Clone, Debug)]
pub struct Enumerated {
    pub trace: Trace,
    pub prob: f64,
    pub production: Production,
}

/// Exhaustive depth-first traversal of every guard-satisfiable trajectory.
///
/// Sorted by descending probability, then lexicographically by trace.
pub fn enumerate_all(sim: &Simulator, limit: usize) -> Result<Vec<Enumerated>, ExecError> {
    let mut out = Vec::new();
    let mut stack = vec![(Execution::new(sim), 1.0f64)];
    while let Some((exec, p)) = stack.pop() {
        if exec.is_complete() {
            if out.len() == limit {
                return Err(ExecError::LimitExceeded { limit });
            }
            let (trace, production) = exec.finish()?;
            out.push(Enumerated {
                trace,
                prob: p,
                production,
            });
            continue;
        }
        let options = exec.options()?;
        let total: f64 = options.iter().map(|o| o.weight).sum();
        // reversed so the first option is expanded first
        for o in options.iter().rev() {
            let mut next = exec.clone();
            next.choose(o.rule)?;
            stack.push((next, p * o.weight / total));
        }
    }
    out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then_with(|| a.trace.cmp(&b.trace)));
    Ok(out)
}
