#![allow(dead_code, clippy::needless_range_loop)]

use promptrr_core::params::{Bound, ParamStore};
use promptrr_core::rng::Rng;
use promptrr_core::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;

pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every input
/// coordinate of a scalar function, using central differences.
pub fn fd_max_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let mut g = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |xs: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(1.0));
        }
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// receives a distinct upstream gradient.
pub fn probe<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Var<'t, f64> {
    let n = y.shape().iter().product::<usize>();
    let w = Tensor::from_fn(&y.shape(), |i| ((i * 7919 % 113) as f64 / 113.0) - 0.4 + 1.0 / (n as f64));
    y.mul(tape.constant(w)).unwrap().sum()
}

/// [`fd_max_error`] over every scalar of a parameter store.
pub fn store_fd_max_error<F>(store: &ParamStore<f64>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &Bound<'t, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let bound = store.bind(&tape, true);
    let loss = f(&tape, &bound);
    let mut g = tape.backward(loss).unwrap();
    let analytic = bound.grads(&mut g);
    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        f(&tape, &s.bind(&tape, false)).item()
    };
    let mut s = store.clone();
    let mut worst: f64 = 0.0;
    for k in 0..s.len() {
        for i in 0..s.tensors()[k].len() {
            let orig = s.tensors()[k].data()[i];
            s.tensors_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&s);
            s.tensors_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&s);
            s.tensors_mut()[k].data_mut()[i] = orig;
            let num = (up - down) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(1.0));
        }
    }
    worst
}
