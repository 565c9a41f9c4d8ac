//! The full model set and the per-sample objectives of each training stage.
//!
//! * pre-training: `L₁(restore(I, FPE_pre(stack)), I_gt)`
//! * diffusion: `L_diff^l + L_diff^h` with `P₀ = FPE_pre(stack)` frozen and
//!   `P_c = FPE_con(I)`
//! * joint: `L_diff^l + L_diff^h + L₁(restore(I, sample(P_c)), I_gt)`
//!
//! `stack` is `concat(I_gt, I)` by default or `I_gt` alone.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::blocks::PromptShape;
use crate::diffusion::{self, DiffusionSchedule, Denoiser, Sampler};
use crate::error::{Error, Result};
use crate::fpe::{Fpe, FpeConfig, PromptPair};
use crate::params::{Bound, Init, ParamStore};
use crate::promptformer::{Preset, PromptFormer, PromptFormerConfig};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// What the pre-training encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreInput {
    GtAndInput,
    GtOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub former: PromptFormerConfig,
    pub fpe_features: usize,
    pub fpe_res_blocks: usize,
    pub diffusion_steps: usize,
    pub beta_range: (f64, f64),
    pub sampler: Sampler,
    pub pre_input: PreInput,
    /// Treat generated prompts as constants in the restoration loss.
    pub detach_prompts: bool,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        ModelConfig {
            former: PromptFormerConfig::preset(preset),
            fpe_features: 16,
            fpe_res_blocks: 2,
            diffusion_steps: 4,
            beta_range: (0.1, 0.99),
            sampler: Sampler::Implicit,
            pre_input: PreInput::GtAndInput,
            detach_prompts: false,
        }
    }

    /// Smallest configuration that still instantiates every block type;
    /// used by the gradient audit on 16×16 inputs.
    pub fn micro() -> Self {
        let mut cfg = Self::preset(Preset::Desk);
        cfg.former.base_channels = 4;
        cfg.former.stage_blocks = [1, 1, 1, 1];
        cfg.former.stage_heads = [1, 2, 2, 2];
        cfg.former.prompt = PromptShape {
            tokens: 2,
            dim: 4,
            pool: (1, 2),
        };
        cfg.fpe_features = 4;
        cfg.fpe_res_blocks = 1;
        cfg
    }

    pub fn prompt(&self) -> PromptShape {
        self.former.prompt
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.diffusion_steps, self.beta_range.0, self.beta_range.1)
    }

    fn fpe(&self, images: usize) -> FpeConfig {
        FpeConfig {
            images,
            features: self.fpe_features,
            res_blocks: self.fpe_res_blocks,
            prompt: self.former.prompt,
        }
    }
}

/// Parameter stores of every sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub fpe_pre: ParamStore<T>,
    pub fpe_con: ParamStore<T>,
    pub former: ParamStore<T>,
    pub den_low: ParamStore<T>,
    pub den_high: ParamStore<T>,
}

/// Store names in checkpoint order.
pub const STORE_NAMES: [&str; 5] = ["fpe_pre", "fpe_con", "former", "den_low", "den_high"];

impl<T: Real> Weights<T> {
    pub fn stores(&self) -> [&ParamStore<T>; 5] {
        [&self.fpe_pre, &self.fpe_con, &self.former, &self.den_low, &self.den_high]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 5] {
        [
            &mut self.fpe_pre,
            &mut self.fpe_con,
            &mut self.former,
            &mut self.den_low,
            &mut self.den_high,
        ]
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            fpe_pre: self.fpe_pre.cast(),
            fpe_con: self.fpe_con.cast(),
            former: self.former.cast(),
            den_low: self.den_low.cast(),
            den_high: self.den_high.cast(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.stores().iter().map(|s| s.num_scalars()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: Trainable) -> BoundWeights<'t, T> {
        BoundWeights {
            fpe_pre: self.fpe_pre.bind(tape, trainable.fpe_pre),
            fpe_con: self.fpe_con.bind(tape, trainable.fpe_con),
            former: self.former.bind(tape, trainable.former),
            den_low: self.den_low.bind(tape, trainable.denoisers),
            den_high: self.den_high.bind(tape, trainable.denoisers),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub fpe_pre: bool,
    pub fpe_con: bool,
    pub former: bool,
    pub denoisers: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        fpe_pre: false,
        fpe_con: false,
        former: false,
        denoisers: false,
    };
    pub const ALL: Trainable = Trainable {
        fpe_pre: true,
        fpe_con: true,
        former: true,
        denoisers: true,
    };

    /// Which stores index `i` of [`STORE_NAMES`] trains.
    pub fn store(&self, i: usize) -> bool {
        match i {
            0 => self.fpe_pre,
            1 => self.fpe_con,
            2 => self.former,
            _ => self.denoisers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Diffusion,
    Joint,
}

impl Stage {
    pub fn trainable(self) -> Trainable {
        match self {
            Stage::Pretrain => Trainable {
                fpe_pre: true,
                former: true,
                ..Trainable::NONE
            },
            Stage::Diffusion => Trainable {
                fpe_con: true,
                denoisers: true,
                ..Trainable::NONE
            },
            Stage::Joint => Trainable {
                fpe_con: true,
                former: true,
                denoisers: true,
                ..Trainable::NONE
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Diffusion => "diffusion",
            Stage::Joint => "joint",
        }
    }
}

pub struct BoundWeights<'t, T> {
    pub fpe_pre: Bound<'t, T>,
    pub fpe_con: Bound<'t, T>,
    pub former: Bound<'t, T>,
    pub den_low: Bound<'t, T>,
    pub den_high: Bound<'t, T>,
}

impl<'t, T: Real> BoundWeights<'t, T> {
    pub fn all(&self) -> [&Bound<'t, T>; 5] {
        [&self.fpe_pre, &self.fpe_con, &self.former, &self.den_low, &self.den_high]
    }
}

/// Random draws one diffusion-loss evaluation consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw<T> {
    pub t: usize,
    pub eps: PromptPair<Tensor<T>>,
}

impl<T: Real> DiffusionDraw<T> {
    /// `count` consecutive draws.
    pub fn sample_many(rng: &mut Rng, steps: usize, shape: PromptShape, count: usize) -> Vec<Self> {
        (0..count).map(|_| Self::sample(rng, steps, shape)).collect()
    }

    /// `t ~ U{1..T}`, then low noise, then high noise.
    pub fn sample(rng: &mut Rng, steps: usize, shape: PromptShape) -> Self {
        let t = 1 + rng.below(steps);
        let s = [shape.tokens, shape.dim];
        DiffusionDraw {
            t,
            eps: PromptPair {
                low: rng.normal_tensor(&s),
                high: rng.normal_tensor(&s),
            },
        }
    }
}

/// Terms of the joint objective and the restoration they score.
#[derive(Debug, Clone, Copy)]
pub struct JointLosses<'t, T> {
    pub restored: Var<'t, T>,
    pub l1: Var<'t, T>,
    pub diff: PromptPair<Var<'t, T>>,
    pub total: Var<'t, T>,
}

#[derive(Debug, Clone)]
pub struct Models {
    pub fpe_pre: Fpe,
    pub fpe_con: Fpe,
    pub former: PromptFormer,
    pub den_low: Denoiser,
    pub den_high: Denoiser,
    pub schedule: DiffusionSchedule,
    pub cfg: ModelConfig,
}

impl Models {
    /// Build every network; each store draws from its own seeded stream.
    pub fn build<T: Real>(cfg: ModelConfig, seed: u64) -> Result<(Models, Weights<T>)> {
        let schedule = cfg.schedule()?;
        let pre_images = match cfg.pre_input {
            PreInput::GtAndInput => 2,
            PreInput::GtOnly => 1,
        };
        let mut stores: [ParamStore<T>; 5] = core::array::from_fn(|_| ParamStore::new());
        let mut rngs: [Rng; 5] = core::array::from_fn(|i| Rng::derive(seed, i as u64));
        let [s0, s1, s2, s3, s4] = &mut stores;
        let [r0, r1, r2, r3, r4] = &mut rngs;
        let fpe_pre = Fpe::new(&mut Init::new(s0, r0), cfg.fpe(pre_images))?;
        let fpe_con = Fpe::new(&mut Init::new(s1, r1), cfg.fpe(1))?;
        let former = PromptFormer::new(&mut Init::new(s2, r2), cfg.former)?;
        let den_low = Denoiser::new(&mut Init::new(s3, r3), cfg.prompt(), cfg.diffusion_steps);
        let den_high = Denoiser::new(&mut Init::new(s4, r4), cfg.prompt(), cfg.diffusion_steps);
        let [fpe_pre_w, fpe_con_w, former_w, den_low_w, den_high_w] = stores;
        Ok((
            Models {
                fpe_pre,
                fpe_con,
                former,
                den_low,
                den_high,
                schedule,
                cfg,
            },
            Weights {
                fpe_pre: fpe_pre_w,
                fpe_con: fpe_con_w,
                former: former_w,
                den_low: den_low_w,
                den_high: den_high_w,
            },
        ))
    }

    /// Input stack of the pre-training encoder.
    pub fn pre_stack<T: Real>(&self, input: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cfg.pre_input {
            PreInput::GtAndInput => Tensor::concat0(&[gt, input]),
            PreInput::GtOnly => Ok(gt.clone()),
        }
    }

    pub fn check_image<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let m = self.former.config().size_multiple().max(2);
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(m) || !s[2].is_multiple_of(m) {
            return Err(Error::invalid(
                "image",
                alloc::format!("expected 3×H×W with H, W multiples of {}, got {:?}", m, s),
            ));
        }
        Ok(())
    }

    pub fn pretrain_prompts<'t, T: Real>(
        &self,
        w: &BoundWeights<'t, T>,
        input: &Tensor<T>,
        gt: &Tensor<T>,
    ) -> Result<PromptPair<Var<'t, T>>> {
        self.fpe_pre.encode(&w.fpe_pre, &self.pre_stack(input, gt)?)
    }

    /// Mean absolute error of the restoration guided by pre-training prompts.
    pub fn pretrain_loss<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        input: &Tensor<T>,
        gt: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        let prompts = self.pretrain_prompts(w, input, gt)?;
        let x = tape.constant(input.clone());
        let out = self.former.restore(&w.former, x, prompts)?;
        l1(tape, out, gt)
    }

    /// Diffusion loss averaged over `draws`; the encoders run once.
    pub fn diffusion_losses<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        input: &Tensor<T>,
        gt: &Tensor<T>,
        draws: &[DiffusionDraw<T>],
    ) -> Result<PromptPair<Var<'t, T>>> {
        let p0 = self.pretrain_prompts(w, input, gt)?;
        let pc = self.fpe_con.encode(&w.fpe_con, input)?;
        self.diffusion_losses_with(tape, w, p0, pc, draws)
    }

    fn diffusion_losses_with<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        p0: PromptPair<Var<'t, T>>,
        pc: PromptPair<Var<'t, T>>,
        draws: &[DiffusionDraw<T>],
    ) -> Result<PromptPair<Var<'t, T>>> {
        if draws.is_empty() {
            return Err(Error::invalid("diffusion", "needs at least one draw"));
        }
        let low = self.den_low.bind(&w.den_low);
        let high = self.den_high.bind(&w.den_high);
        let mut acc: Option<PromptPair<Var<'t, T>>> = None;
        for d in draws {
            let l = diffusion::diffusion_loss(tape, p0, pc, d.t, &d.eps, &low, &high, &self.schedule)?;
            acc = Some(match acc {
                None => l,
                Some(a) => PromptPair {
                    low: a.low.add(l.low)?,
                    high: a.high.add(l.high)?,
                },
            });
        }
        let acc = acc.expect("non-empty");
        let k = T::from_f64(1.0 / draws.len() as f64);
        Ok(PromptPair {
            low: acc.low.scale(k),
            high: acc.high.scale(k),
        })
    }

    /// Prompts generated from the conditional encoder by the diffusion chains.
    pub fn generate<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        pc: PromptPair<Var<'t, T>>,
        seed: u64,
    ) -> Result<PromptPair<Var<'t, T>>> {
        let low = self.den_low.bind(&w.den_low);
        let high = self.den_high.bind(&w.den_high);
        diffusion::sample(tape, pc, &low, &high, &self.schedule, seed, self.cfg.sampler)
    }

    pub fn joint_losses<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        input: &Tensor<T>,
        gt: &Tensor<T>,
        draws: &[DiffusionDraw<T>],
        seed: u64,
    ) -> Result<JointLosses<'t, T>> {
        let p0 = self.pretrain_prompts(w, input, gt)?;
        let pc = self.fpe_con.encode(&w.fpe_con, input)?;
        let diff = self.diffusion_losses_with(tape, w, p0, pc, draws)?;
        let mut prompts = self.generate(tape, w, pc, seed)?;
        if self.cfg.detach_prompts {
            prompts = prompts.values().constants(tape);
        }
        let out = self.former.restore(&w.former, tape.constant(input.clone()), prompts)?;
        let l1 = l1(tape, out, gt)?;
        let total = diff.low.add(diff.high)?.add(l1)?;
        Ok(JointLosses {
            restored: out,
            l1,
            diff,
            total,
        })
    }

    /// Restore one image with generated prompts.
    pub fn infer<T: Real>(&self, weights: &Weights<T>, input: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        self.check_image(input)?;
        let tape = Tape::new();
        let w = weights.bind(&tape, Trainable::NONE);
        let pc = self.fpe_con.encode(&w.fpe_con, input)?;
        let prompts = self.generate(&tape, &w, pc, seed)?;
        let out = self.former.restore(&w.former, tape.constant(input.clone()), prompts)?;
        Ok(out.value())
    }

    /// Smooth objective touching every parameter store, for gradient audits:
    /// squared restoration error under both prompt sources plus both
    /// diffusion terms.
    pub fn audit_loss<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        w: &BoundWeights<'t, T>,
        input: &Tensor<T>,
        gt: &Tensor<T>,
        draw: &DiffusionDraw<T>,
        seed: u64,
    ) -> Result<Var<'t, T>> {
        let x = tape.constant(input.clone());
        let target = tape.constant(gt.clone());
        let pre = self.pretrain_prompts(w, input, gt)?;
        let a = self.former.restore(&w.former, x, pre)?.sub(target)?.square().mean();
        let pc = self.fpe_con.encode(&w.fpe_con, input)?;
        let diff = self.diffusion_losses_with(tape, w, pre, pc, core::slice::from_ref(draw))?;
        let generated = self.generate(tape, w, pc, seed)?;
        let b = self.former.restore(&w.former, x, generated)?.sub(target)?.square().mean();
        a.add(b)?.add(diff.low)?.add(diff.high)
    }
}

/// Mean absolute error against a fixed target.
pub fn l1<'t, T: Real>(tape: &'t Tape<T>, out: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    Ok(out.sub(tape.constant(target.clone()))?.abs().mean())
}

/// Check a loss is finite before it reaches the optimizer.
pub fn ensure_finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}
