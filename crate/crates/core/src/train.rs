//! Stage loops over an in-memory set of image pairs, plus the fixed
//! evaluations used to judge them.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics;
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{ensure_finite, DiffusionDraw, Models, Stage, Trainable, Weights};
use crate::promptformer::Preset;
use crate::rng::Rng;
use crate::synth::ImagePair;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay; zero selects plain Adam.
    pub weight_decay: f64,
    /// `(t, ε)` draws averaged per sample in the diffusion terms.
    pub draws: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    pub diffusion: StageConfig,
    pub joint: StageConfig,
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => {
                let base = StageConfig {
                    iterations: 0,
                    batch_size: 8,
                    learning_rate: 1e-4,
                    weight_decay: 0.0,
                    draws: 1,
                };
                TrainConfig {
                    pretrain: StageConfig {
                        iterations: 200_000,
                        weight_decay: 1e-4,
                        ..base
                    },
                    diffusion: StageConfig {
                        iterations: 20_000,
                        ..base
                    },
                    joint: StageConfig {
                        iterations: 280_000,
                        ..base
                    },
                }
            }
            // Single-core budget: one sample per step, more noise draws to
            // steady the diffusion gradient, and a larger step for the
            // shortened diffusion stage.
            Preset::Desk => TrainConfig {
                pretrain: StageConfig {
                    iterations: 500,
                    batch_size: 1,
                    learning_rate: 1e-4,
                    weight_decay: 1e-4,
                    draws: 1,
                },
                diffusion: StageConfig {
                    iterations: 2_000,
                    batch_size: 1,
                    learning_rate: 1e-3,
                    weight_decay: 0.0,
                    draws: 16,
                },
                joint: StageConfig {
                    iterations: 1_000,
                    batch_size: 1,
                    learning_rate: 1e-4,
                    weight_decay: 0.0,
                    draws: 16,
                },
            },
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Diffusion => &self.diffusion,
            Stage::Joint => &self.joint,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageConfig {
        match stage {
            Stage::Pretrain => &mut self.pretrain,
            Stage::Diffusion => &mut self.diffusion,
            Stage::Joint => &mut self.joint,
        }
    }
}

/// Batch-mean loss terms of one optimizer step; terms a stage does not use
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub stage: Stage,
    /// One-based.
    pub step: usize,
    pub l1: f64,
    pub diff_low: f64,
    pub diff_high: f64,
}

impl StepLog {
    pub fn total(&self) -> f64 {
        self.l1 + self.diff_low + self.diff_high
    }
}

/// Cycles through the pairs in a fresh permutation each epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = rng.permutation(self.order.len());
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Run `cfg.iterations` optimizer steps of `stage`. Only the stores the stage
/// trains are touched. `on_step` sees every step; returning an error stops
/// the run.
pub fn run_stage<F>(
    models: &Models,
    weights: &mut Weights<f32>,
    pairs: &[ImagePair],
    stage: Stage,
    cfg: &StageConfig,
    seed: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepLog) -> Result<()>,
{
    if pairs.is_empty() {
        return Err(Error::invalid("train", "no training pairs"));
    }
    if cfg.batch_size == 0 || cfg.draws == 0 {
        return Err(Error::invalid("train", "batch size and draws must be positive"));
    }
    for p in pairs {
        models.check_image(&p.input)?;
    }
    let trainable = stage.trainable();
    let opt_cfg = if cfg.weight_decay > 0.0 {
        AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay)
    } else {
        AdamConfig::adam(cfg.learning_rate)
    };
    let mut opts: Vec<Adam<f32>> = weights.stores().iter().map(|s| Adam::new(opt_cfg, s)).collect();
    let mut rng = Rng::derive(seed, 0x5747_0000 + stage as u64);
    let mut order = Sampler {
        order: Vec::from_iter(0..pairs.len()),
        pos: pairs.len(),
    };
    let steps = models.cfg.diffusion_steps;
    let shape = models.cfg.prompt();
    let scale = 1.0 / cfg.batch_size as f32;
    for step in 1..=cfg.iterations {
        let tape = Tape::new();
        let bound = weights.bind(&tape, trainable);
        let mut terms: [Option<Var<'_, f32>>; 3] = [None, None, None];
        for _ in 0..cfg.batch_size {
            let pair = &pairs[order.next(&mut rng)];
            let parts = match stage {
                Stage::Pretrain => [Some(models.pretrain_loss(&tape, &bound, &pair.input, &pair.gt)?), None, None],
                Stage::Diffusion => {
                    let draws = DiffusionDraw::sample_many(&mut rng, steps, shape, cfg.draws);
                    let d = models.diffusion_losses(&tape, &bound, &pair.input, &pair.gt, &draws)?;
                    [None, Some(d.low), Some(d.high)]
                }
                Stage::Joint => {
                    let draws = DiffusionDraw::sample_many(&mut rng, steps, shape, cfg.draws);
                    let sampler_seed = rng.next_u64();
                    let j = models.joint_losses(&tape, &bound, &pair.input, &pair.gt, &draws, sampler_seed)?;
                    [Some(j.l1), Some(j.diff.low), Some(j.diff.high)]
                }
            };
            for (acc, part) in terms.iter_mut().zip(parts) {
                if let Some(v) = part {
                    *acc = Some(match acc.take() {
                        Some(a) => a.add(v)?,
                        None => v,
                    });
                }
            }
        }
        let terms = terms.map(|t| t.map(|v| v.scale(scale)));
        let value = |t: &Option<Var<'_, f32>>| t.map_or(0.0, |v| v.item() as f64);
        let log = StepLog {
            stage,
            step,
            l1: value(&terms[0]),
            diff_low: value(&terms[1]),
            diff_high: value(&terms[2]),
        };
        ensure_finite(log.total(), "training loss")?;
        let mut loss: Option<Var<'_, f32>> = None;
        for t in terms.into_iter().flatten() {
            loss = Some(match loss {
                Some(a) => a.add(t)?,
                None => t,
            });
        }
        let loss = loss.expect("every stage has a loss term");
        let mut grads = tape.backward(loss)?;
        let per_store: Vec<_> = bound.all().iter().map(|b| b.grads(&mut grads)).collect();
        drop(bound);
        for (i, (store, g)) in weights.stores_mut().into_iter().zip(per_store).enumerate() {
            if trainable.store(i) {
                if g.iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFinite("gradient"));
                }
                opts[i].step(store, &g)?;
            }
        }
        on_step(&log)?;
    }
    Ok(())
}

/// Mean L₁ of the restorations guided by pre-training prompts.
pub fn restoration_l1(models: &Models, weights: &Weights<f32>, pairs: &[ImagePair]) -> Result<f64> {
    let mut sum = 0.0;
    for p in pairs {
        let tape = Tape::new();
        let b = weights.bind(&tape, Trainable::NONE);
        sum += models.pretrain_loss(&tape, &b, &p.input, &p.gt)?.item() as f64;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Noise draws per `(pair, t)` in [`diffusion_eval`].
pub const EVAL_DRAWS: usize = 4;

/// `L_diff^l + L_diff^h` averaged over every pair, every timestep and
/// [`EVAL_DRAWS`] noise draws fixed by `seed`.
pub fn diffusion_eval(models: &Models, weights: &Weights<f32>, pairs: &[ImagePair], seed: u64) -> Result<f64> {
    let steps = models.cfg.diffusion_steps;
    let shape = models.cfg.prompt();
    let mut rng = Rng::new(seed);
    let mut sum = 0.0;
    let mut n = 0;
    for p in pairs {
        let mut draws = Vec::new();
        for t in 1..=steps {
            for _ in 0..EVAL_DRAWS {
                let mut d = DiffusionDraw::sample(&mut rng, steps, shape);
                d.t = t;
                draws.push(d);
            }
        }
        let tape = Tape::new();
        let b = weights.bind(&tape, Trainable::NONE);
        let l = models.diffusion_losses(&tape, &b, &p.input, &p.gt, &draws)?;
        sum += (l.low.item() + l.high.item()) as f64;
        n += 1;
    }
    Ok(sum / n.max(1) as f64)
}

/// Mean PSNR of the inputs and of the restorations with generated prompts.
pub fn psnr_before_after(models: &Models, weights: &Weights<f32>, pairs: &[ImagePair], seed: u64) -> Result<(f64, f64)> {
    let (mut before, mut after) = (0.0, 0.0);
    for p in pairs {
        before += metrics::psnr(&p.input, &p.gt, 1.0)?;
        after += metrics::psnr(&models.infer(weights, &p.input, seed)?, &p.gt, 1.0)?;
    }
    let n = pairs.len().max(1) as f64;
    Ok((before / n, after / n))
}
