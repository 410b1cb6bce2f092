//! Gated recurrent layer over padded, time-major batches.
//!
//! Gates are laid out `[r, z, n]` along the `3H` axis:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```
//!
//! Row `t * B + b` of every `[T·B, ·]` matrix belongs to sequence `b` at time
//! `t`. Past its length a sequence keeps its hidden state unchanged, so the
//! final block of hidden states holds every sequence's last state.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Grads, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GruIds {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
}

impl GruIds {
    pub fn add(params: &mut Params, prefix: &str, input: usize, hidden: usize) -> Self {
        GruIds {
            w_ih: params.add(format!("{prefix}.w_ih"), &[3 * hidden, input]),
            w_hh: params.add(format!("{prefix}.w_hh"), &[3 * hidden, hidden]),
            b_ih: params.add(format!("{prefix}.b_ih"), &[3 * hidden]),
            b_hh: params.add(format!("{prefix}.b_hh"), &[3 * hidden]),
        }
    }
}

pub(crate) struct Cache {
    x: Array2<f64>,
    /// `(T + 1) · B` rows; block 0 is the zero initial state.
    hs: Array2<f64>,
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    hn: Array2<f64>,
    lens: Vec<usize>,
    batch: usize,
    steps: usize,
}

impl Cache {
    /// Hidden states after every step, `[T·B, H]`.
    pub fn outputs(&self) -> ArrayView2<'_, f64> {
        self.hs.slice(s![self.batch.., ..])
    }

    /// State of every sequence after its last step, `[B, H]`.
    pub fn last(&self) -> ArrayView2<'_, f64> {
        self.hs.slice(s![self.steps * self.batch.., ..])
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run the layer over `x` (`[T·B, I]`), `lens[b] ≤ T`.
pub(crate) fn forward(p: &Params, g: GruIds, x: Array2<f64>, lens: &[usize]) -> Cache {
    let batch = lens.len();
    let steps = if batch == 0 { 0 } else { x.nrows() / batch };
    let w_hh = p.v2(g.w_hh);
    let hidden = w_hh.ncols();
    let mut gi = Array2::zeros((x.nrows(), 3 * hidden));
    general_mat_mul(1.0, &x, &p.v2(g.w_ih).t(), 0.0, &mut gi);
    gi += &p.v1(g.b_ih);
    let b_hh = p.v1(g.b_hh);
    let mut hs = Array2::zeros(((steps + 1) * batch, hidden));
    let mut r = Array2::zeros((steps * batch, hidden));
    let mut z = Array2::zeros((steps * batch, hidden));
    let mut n = Array2::zeros((steps * batch, hidden));
    let mut hn = Array2::zeros((steps * batch, hidden));
    let mut gh = Array2::zeros((batch, 3 * hidden));
    for t in 0..steps {
        let (prev, mut next) = hs.multi_slice_mut((
            s![t * batch..(t + 1) * batch, ..],
            s![(t + 1) * batch..(t + 2) * batch, ..],
        ));
        general_mat_mul(1.0, &prev, &w_hh.t(), 0.0, &mut gh);
        gh += &b_hh;
        for b in 0..batch {
            let row = t * batch + b;
            if t >= lens[b] {
                next.row_mut(b).assign(&prev.row(b));
                continue;
            }
            for j in 0..hidden {
                let rj = sigmoid(gi[[row, j]] + gh[[b, j]]);
                let zj = sigmoid(gi[[row, hidden + j]] + gh[[b, hidden + j]]);
                let hnj = gh[[b, 2 * hidden + j]];
                let nj = (gi[[row, 2 * hidden + j]] + rj * hnj).tanh();
                next[[b, j]] = (1.0 - zj) * nj + zj * prev[[b, j]];
                r[[row, j]] = rj;
                z[[row, j]] = zj;
                n[[row, j]] = nj;
                hn[[row, j]] = hnj;
            }
        }
    }
    Cache {
        x,
        hs,
        r,
        z,
        n,
        hn,
        lens: lens.to_vec(),
        batch,
        steps,
    }
}

/// Backpropagate `d_out` (`[T·B, H]`, gradient of the loss with respect to
/// every output state), accumulate parameter gradients into `grads`, and
/// return the gradient with respect to the input `x`.
pub(crate) fn backward(p: &Params, g: GruIds, c: &Cache, d_out: ArrayView2<f64>, grads: &mut Grads) -> Array2<f64> {
    let (batch, steps) = (c.batch, c.steps);
    let w_hh = p.v2(g.w_hh);
    let hidden = w_hh.ncols();
    let rows = steps * batch;
    let mut dgi = Array2::zeros((rows, 3 * hidden));
    let mut dgh = Array2::zeros((rows, 3 * hidden));
    let mut dh = Array2::<f64>::zeros((batch, hidden));
    let mut direct = Array2::<f64>::zeros((batch, hidden));
    for t in (0..steps).rev() {
        dh += &d_out.slice(s![t * batch..(t + 1) * batch, ..]);
        for b in 0..batch {
            let row = t * batch + b;
            if t >= c.lens[b] {
                direct.row_mut(b).assign(&dh.row(b));
                continue;
            }
            for j in 0..hidden {
                let d = dh[[b, j]];
                let (rj, zj, nj) = (c.r[[row, j]], c.z[[row, j]], c.n[[row, j]]);
                let hp = c.hs[[t * batch + b, j]];
                direct[[b, j]] = d * zj;
                let dn = d * (1.0 - zj) * (1.0 - nj * nj);
                let dz = d * (hp - nj) * zj * (1.0 - zj);
                let dr = dn * c.hn[[row, j]] * rj * (1.0 - rj);
                dgi[[row, j]] = dr;
                dgh[[row, j]] = dr;
                dgi[[row, hidden + j]] = dz;
                dgh[[row, hidden + j]] = dz;
                dgi[[row, 2 * hidden + j]] = dn;
                dgh[[row, 2 * hidden + j]] = dn * rj;
            }
        }
        dh.assign(&direct);
        general_mat_mul(1.0, &dgh.slice(s![t * batch..(t + 1) * batch, ..]), &w_hh, 1.0, &mut dh);
    }
    let prev = c.hs.slice(s![..rows, ..]);
    general_mat_mul(1.0, &dgh.t(), &prev, 1.0, &mut grads.m2(g.w_hh));
    general_mat_mul(1.0, &dgi.t(), &c.x, 1.0, &mut grads.m2(g.w_ih));
    grads.m1(g.b_hh).scaled_add(1.0, &dgh.sum_axis(Axis(0)));
    grads.m1(g.b_ih).scaled_add(1.0, &dgi.sum_axis(Axis(0)));
    let w_ih = p.v2(g.w_ih);
    let mut dx = Array2::zeros((rows, w_ih.ncols()));
    general_mat_mul(1.0, &dgi, &w_ih, 0.0, &mut dx);
    dx
}

/// One step for a single sequence, used when decoding incrementally.
pub(crate) fn step(p: &Params, g: GruIds, x: ArrayView1<f64>, h: ArrayView1<f64>) -> Array1<f64> {
    let hidden = h.len();
    let gi = p.v2(g.w_ih).dot(&x) + p.v1(g.b_ih);
    let gh = p.v2(g.w_hh).dot(&h) + p.v1(g.b_hh);
    Array1::from_shape_fn(hidden, |j| {
        let rj = sigmoid(gi[j] + gh[j]);
        let zj = sigmoid(gi[hidden + j] + gh[hidden + j]);
        let nj = (gi[2 * hidden + j] + rj * gh[2 * hidden + j]).tanh();
        (1.0 - zj) * nj + zj * h[j]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(input: usize, hidden: usize) -> (Params, GruIds) {
        let mut p = Params::default();
        let g = GruIds::add(&mut p, "g", input, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut p.data {
            *v = rng.gen_range(-0.5..0.5);
        }
        (p, g)
    }

    #[test]
    fn batched_forward_matches_single_steps() {
        let (p, g) = layer(3, 4);
        let lens = [3, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((9, 3), |_| rng.gen_range(-1.0..1.0));
        let c = forward(&p, g, x.clone(), &lens);
        for (b, &len) in lens.iter().enumerate() {
            let mut h = Array1::zeros(4);
            for t in 0..len {
                h = step(&p, g, x.row(t * 3 + b), h.view());
            }
            for j in 0..4 {
                assert!((c.last()[[b, j]] - h[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut p, g) = layer(2, 3);
        let lens = [2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_fn((6, 2), |_| rng.gen_range(-1.0..1.0));
        let weights = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |p: &Params, x: &Array2<f64>| (&forward(p, g, x.clone(), &lens).outputs() * &weights).sum();
        let c = forward(&p, g, x.clone(), &lens);
        let mut grads = Grads::zeros(&p);
        let dx = backward(&p, g, &c, weights.view(), &mut grads);
        let analytic = grads.data.clone();
        let eps = 1e-6;
        for i in 0..p.data.len() {
            let orig = p.data[i];
            p.data[i] = orig + eps;
            let up = loss(&p, &x);
            p.data[i] = orig - eps;
            let down = loss(&p, &x);
            p.data[i] = orig;
            assert!((analytic[i] - (up - down) / (2.0 * eps)).abs() < 1e-7, "param {i}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= eps;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * eps);
            assert!((dx.as_slice().unwrap()[i] - fd).abs() < 1e-7, "input {i}");
        }
    }
}
