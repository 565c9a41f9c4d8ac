//! Dual diffusion prompt generator.
//!
//! Training (one draw): `t ~ U{1..T}`, `ε ~ N(0, I)`,
//! `P_{t+1} = √ᾱ_t P₀ + √(1−ᾱ_t) ε`, loss `‖ε − ε_θ(P_c, P_{t+1}, t)‖²`.
//! The `t+1` subscript is only a label; the noise level is `ᾱ_t`.
//!
//! Sampling runs `t = T..1` from `P_T ~ N(0, I)`:
//! `P_{t−1} = √ᾱ_{t−1} (P_t − √(1−ᾱ_t) e) / √ᾱ_t + √(1−ᾱ_{t−1}) e` with
//! `e = ε_θ(P_c, P_t, t)` and `ᾱ_0 = 1`. A second sampler applies the plain
//! subtraction `P ← P − ε_θ(P_c, P, t)` over the same timesteps.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // f64 math methods when built without std
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::blocks::{Linear, PromptShape};
use crate::error::{Error, Result};
use crate::fpe::PromptPair;
use crate::params::{Bound, Init};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Cumulative noise schedule `ᾱ_t = Π_{s≤t} (1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// β linear from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "needs at least one step"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("schedule", "every beta must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    /// Four steps, β from 0.1 to 0.99.
    pub fn desk() -> Self {
        Self::linear(4, 0.1, 0.99).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(
                "diffusion",
                alloc::format!("timestep {} outside 1..={}", t, self.steps()),
            ));
        }
        Ok(())
    }
}

/// `√ᾱ_t · p0 + √(1−ᾱ_t) · eps`.
pub fn forward_noise<T: Real>(p0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &DiffusionSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (s, n) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
    p0.zip_map(eps, |x, e| s * x + n * e)
}

/// Anything that predicts the noise in `p_t` given the condition `p_c`.
pub trait NoisePredictor<'t, T: Real> {
    fn predict(&self, pc: Var<'t, T>, pt: Var<'t, T>, t: usize) -> Result<Var<'t, T>>;
}

/// MLP noise predictor over `[flatten(P_c), flatten(P_t), onehot(t)]`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    layers: Vec<Linear>,
    shape: PromptShape,
    steps: usize,
}

impl Denoiser {
    pub const HIDDEN_LAYERS: usize = 4;

    pub fn new<T: Real>(init: &mut Init<'_, T>, shape: PromptShape, steps: usize) -> Self {
        let n = shape.numel();
        let width = 4 * n;
        let mut layers = Vec::with_capacity(Self::HIDDEN_LAYERS + 1);
        let mut din = 2 * n + steps;
        for i in 0..Self::HIDDEN_LAYERS {
            layers.push(Linear::kaiming(init, &alloc::format!("l{}", i), din, width));
            din = width;
        }
        layers.push(Linear::new(init, "out", din, n, true));
        Denoiser { layers, shape, steps }
    }

    pub fn bind<'a, 't, T: Real>(&'a self, p: &'a Bound<'t, T>) -> BoundDenoiser<'a, 't, T> {
        BoundDenoiser { net: self, p }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, pc: Var<'t, T>, pt: Var<'t, T>, t: usize) -> Result<Var<'t, T>> {
        let want = [self.shape.tokens, self.shape.dim];
        for v in [pc, pt] {
            if v.shape() != want {
                return Err(Error::shape("denoiser", &v.shape(), &want));
            }
        }
        if t == 0 || t > self.steps {
            return Err(Error::invalid("denoiser", alloc::format!("timestep {} outside 1..={}", t, self.steps)));
        }
        let n = self.shape.numel();
        let mut onehot = vec![T::zero(); self.steps];
        onehot[t - 1] = T::one();
        let tape = pc.tape();
        let onehot = tape.constant(Tensor::new(&[self.steps], onehot)?);
        let mut h = Var::concat(&[pc.reshape(&[n])?, pt.reshape(&[n])?, onehot])?.reshape(&[1, 2 * n + self.steps])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, h)?;
            if i < last {
                h = h.leaky_relu();
            }
        }
        h.reshape(&want)
    }
}

pub struct BoundDenoiser<'a, 't, T> {
    net: &'a Denoiser,
    p: &'a Bound<'t, T>,
}

impl<'t, T: Real> NoisePredictor<'t, T> for BoundDenoiser<'_, 't, T> {
    fn predict(&self, pc: Var<'t, T>, pt: Var<'t, T>, t: usize) -> Result<Var<'t, T>> {
        self.net.forward(self.p, pc, pt, t)
    }
}

/// Mean squared error between the drawn noise and its prediction, one term
/// per frequency. Pass `p0` as tape constants to keep the target encoder
/// frozen; `pc` may carry gradients.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    p0: PromptPair<Var<'t, T>>,
    pc: PromptPair<Var<'t, T>>,
    t: usize,
    eps: &PromptPair<Tensor<T>>,
    low: &dyn NoisePredictor<'t, T>,
    high: &dyn NoisePredictor<'t, T>,
    sched: &DiffusionSchedule,
) -> Result<PromptPair<Var<'t, T>>> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (s, n) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
    let term = |p0: Var<'t, T>, pc: Var<'t, T>, eps: &Tensor<T>, net: &dyn NoisePredictor<'t, T>| -> Result<Var<'t, T>> {
        let noised = p0.scale(s).add(tape.constant(eps.map(|e| n * e)))?;
        let pred = net.predict(pc, noised, t)?;
        Ok(tape.constant(eps.clone()).sub(pred)?.square().mean())
    };
    Ok(PromptPair {
        low: term(p0.low, pc.low, &eps.low, low)?,
        high: term(p0.high, pc.high, &eps.high, high)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Deterministic implicit update (default).
    Implicit,
    /// `P ← P − ε_θ(P_c, P, t)`.
    Subtract,
}

/// One Algorithm-style chain for a single frequency.
fn chain<'t, T: Real>(
    tape: &'t Tape<T>,
    pc: Var<'t, T>,
    start: Tensor<T>,
    net: &dyn NoisePredictor<'t, T>,
    sched: &DiffusionSchedule,
    sampler: Sampler,
) -> Result<Var<'t, T>> {
    let mut p = tape.constant(start);
    for t in (1..=sched.steps()).rev() {
        let e = net.predict(pc, p, t)?;
        p = match sampler {
            Sampler::Implicit => {
                let (a, a_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
                let x0 = p
                    .sub(e.scale(T::from_f64((1.0 - a).sqrt())))?
                    .scale(T::from_f64(1.0 / a.sqrt()));
                x0.scale(T::from_f64(a_prev.sqrt()))
                    .add(e.scale(T::from_f64((1.0 - a_prev).sqrt())))?
            }
            Sampler::Subtract => p.sub(e)?,
        };
    }
    Ok(p)
}

/// Generate both prompts from the conditions. `P_T` is drawn low first, then
/// high, from a generator seeded with `seed`.
pub fn sample<'t, T: Real>(
    tape: &'t Tape<T>,
    pc: PromptPair<Var<'t, T>>,
    low: &dyn NoisePredictor<'t, T>,
    high: &dyn NoisePredictor<'t, T>,
    sched: &DiffusionSchedule,
    seed: u64,
    sampler: Sampler,
) -> Result<PromptPair<Var<'t, T>>> {
    let mut rng = Rng::new(seed);
    let start_low: Tensor<T> = rng.normal_tensor(&pc.low.shape());
    let start_high: Tensor<T> = rng.normal_tensor(&pc.high.shape());
    Ok(PromptPair {
        low: chain(tape, pc.low, start_low, low, sched, sampler)?,
        high: chain(tape, pc.high, start_high, high, sched, sampler)?,
    })
}

/// Single-frequency chain from an explicit `P_T`.
pub fn sample_from<'t, T: Real>(
    tape: &'t Tape<T>,
    pc: Var<'t, T>,
    start: Tensor<T>,
    net: &dyn NoisePredictor<'t, T>,
    sched: &DiffusionSchedule,
    sampler: Sampler,
) -> Result<Var<'t, T>> {
    chain(tape, pc, start, net, sched, sampler)
}
