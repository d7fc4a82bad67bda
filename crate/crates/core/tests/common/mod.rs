#![allow(dead_code)]

pub mod fd;

use lstf_core::data::{make_windows, split_ett, Normalizer};
use lstf_core::loss::MetricAccumulator;
use lstf_core::{Graph, Result, SeriesFrame, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output element carries a
/// distinct weight into the scalar.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = random(&mut rng(seed ^ 0x5eed), g.shape(out));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-3)`: relative error with an absolute floor
/// for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error between the analytic gradient of `build` and
/// central differences, over every element of every input.
pub fn fd_max_err<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..xs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[j], numeric));
        }
    }
    worst
}

/// Test-split MSE of repeating the last lookback row over the horizon, on
/// the same normalized windows training evaluates.
pub fn repeat_last_mse(frame: &SeriesFrame, l: usize, s: usize) -> f64 {
    let splits = split_ett(frame).unwrap();
    let norm = Normalizer::fit(&splits.train).unwrap();
    let test = norm.normalize_frame(&splits.test).unwrap();
    let mut acc = MetricAccumulator::default();
    for w in make_windows(&test, l, s, 1).unwrap() {
        let last = w.lookback.row(l - 1).to_vec();
        let rows: Vec<Vec<f64>> = (0..s).map(|_| last.clone()).collect();
        acc.push(&Tensor::from_rows(&rows), &w.target).unwrap();
    }
    acc.finish().mse
}
