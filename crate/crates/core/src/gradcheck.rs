//! Central finite-difference audit of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::pipeline::{BoundWeights, DiffusionDraw, ModelConfig, Models, Trainable, Weights, STORE_NAMES};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Upper bound on audited coordinates (at least one per tensor is kept).
    pub max_coords: usize,
    /// Bound on `|analytic − numeric| / max(1, |analytic|)`.
    pub tol: f64,
    /// Fraction of coordinates that must meet `tol`.
    pub pass_fraction: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            h: 1e-3,
            max_coords: 2000,
            tol: 1e-3,
            pass_fraction: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub total_scalars: usize,
    pub checked: usize,
    pub passed: usize,
    pub max_error: f64,
    pub worst: Option<Mismatch>,
    /// Every coordinate over tolerance.
    pub failures: Vec<Mismatch>,
    pub required_fraction: f64,
}

impl GradcheckReport {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.passed as f64 / self.checked as f64
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.fraction() >= self.required_fraction
    }
}

/// `(store, tensor, element)` triples to audit.
fn pick(weights: &Weights<f64>, cfg: &GradcheckConfig) -> Vec<(usize, usize, usize)> {
    let mut rng = Rng::new(cfg.seed);
    let mut all = Vec::new();
    let mut picked = Vec::new();
    for (s, store) in weights.stores().iter().enumerate() {
        for (k, t) in store.tensors().iter().enumerate() {
            if t.is_empty() {
                continue;
            }
            let first = rng.below(t.len());
            picked.push((s, k, first));
            all.extend((0..t.len()).filter(|&i| i != first).map(|i| (s, k, i)));
        }
    }
    let budget = cfg.max_coords.saturating_sub(picked.len());
    if all.len() <= budget {
        picked.extend(all);
    } else {
        // partial Fisher–Yates
        for j in 0..budget {
            let r = j + rng.below(all.len() - j);
            all.swap(j, r);
        }
        picked.extend_from_slice(&all[..budget]);
    }
    picked.sort_unstable();
    picked
}

/// Compare reverse-mode gradients of `loss` against central differences
/// over every parameter store.
pub fn check<F>(weights: &mut Weights<f64>, cfg: &GradcheckConfig, loss: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &BoundWeights<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Vec<_>> = {
        let tape = Tape::new();
        let bound = weights.bind(&tape, Trainable::ALL);
        let l = loss(&tape, &bound)?;
        let mut g = tape.backward(l)?;
        bound.all().iter().map(|b| b.grads(&mut g)).collect()
    };
    let eval = |w: &Weights<f64>| -> Result<f64> {
        let tape = Tape::new();
        let bound = w.bind(&tape, Trainable::NONE);
        Ok(loss(&tape, &bound)?.item())
    };
    let coords = pick(weights, cfg);
    let mut report = GradcheckReport {
        total_scalars: weights.num_scalars(),
        checked: 0,
        passed: 0,
        max_error: 0.0,
        worst: None,
        failures: Vec::new(),
        required_fraction: cfg.pass_fraction,
    };
    for (s, k, i) in coords {
        let orig = weights.stores()[s].tensors()[k].data()[i];
        weights.stores_mut()[s].tensors_mut()[k].data_mut()[i] = orig + cfg.h;
        let up = eval(weights)?;
        weights.stores_mut()[s].tensors_mut()[k].data_mut()[i] = orig - cfg.h;
        let down = eval(weights)?;
        weights.stores_mut()[s].tensors_mut()[k].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let a = analytic[s][k].data()[i];
        let error = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        let mismatch = || Mismatch {
            param: alloc::format!("{}.{}", STORE_NAMES[s], weights.stores()[s].iter().nth(k).map(|(n, _)| n).unwrap_or("?")),
            index: i,
            analytic: a,
            numeric,
            error,
        };
        if error < cfg.tol {
            report.passed += 1;
        } else {
            report.failures.push(mismatch());
        }
        if error >= report.max_error {
            report.max_error = error;
            report.worst = Some(mismatch());
        }
    }
    Ok(report)
}

/// Side of the images used by [`audit_micro`].
pub const AUDIT_SIZE: usize = 16;

/// Audit the full objective of the micro model on one random 16×16 pair.
/// Zero-initialized parameters get a small random offset first, otherwise
/// their downstream weights would receive exactly zero gradient and the
/// audit would not exercise them.
pub fn audit_micro(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let model_cfg = ModelConfig::micro();
    let (models, mut weights) = Models::build::<f64>(model_cfg, cfg.seed)?;
    let mut rng = Rng::derive(cfg.seed, 0xa0d1);
    for store in weights.stores_mut() {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                if *v == 0.0 {
                    *v = 0.05 * rng.normal();
                }
            }
        }
    }
    let s = [3, AUDIT_SIZE, AUDIT_SIZE];
    let input: Tensor<f64> = rng.uniform_tensor(&s, 0.0, 1.0);
    let gt: Tensor<f64> = rng.uniform_tensor(&s, 0.0, 1.0);
    let draw = DiffusionDraw::sample(&mut rng, model_cfg.diffusion_steps, model_cfg.prompt());
    let sampler_seed = rng.next_u64();
    check(&mut weights, cfg, |tape, w| models.audit_loss(tape, w, &input, &gt, &draw, sampler_seed))
}
