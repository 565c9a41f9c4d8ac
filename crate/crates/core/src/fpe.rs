//! Frequency prompt encoder.
//!
//! Each RGB image of the input stack is Haar-split; the low-frequency bands
//! feed one convolutional branch and the high-frequency bands another. Each
//! branch ends in global average pooling and two linear layers, so the
//! prompts have a fixed token shape regardless of image size.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::blocks::{Conv, Linear, PromptShape};
use crate::error::{Error, Result};
use crate::params::{Bound, Init};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::wavelet;

/// Low- and high-frequency prompts, as tensors or as tape variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptPair<V> {
    pub low: V,
    pub high: V,
}

impl<'t, T: Real> PromptPair<Var<'t, T>> {
    pub fn values(&self) -> PromptPair<Tensor<T>> {
        PromptPair {
            low: self.low.value(),
            high: self.high.value(),
        }
    }
}

impl<T: Real> PromptPair<Tensor<T>> {
    pub fn constants<'t>(&self, tape: &'t Tape<T>) -> PromptPair<Var<'t, T>> {
        PromptPair {
            low: tape.constant(self.low.clone()),
            high: tape.constant(self.high.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpeConfig {
    /// Number of RGB images stacked in the input.
    pub images: usize,
    pub features: usize,
    pub res_blocks: usize,
    pub prompt: PromptShape,
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

#[derive(Debug, Clone)]
struct Branch {
    stem: Conv,
    blocks: Vec<ResBlock>,
    head1: Linear,
    head2: Linear,
}

impl Branch {
    fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cfg: &FpeConfig) -> Self {
        let f = cfg.features;
        let n = cfg.prompt.numel();
        let stem = Conv::new(init, "stem", cin, f, 3, 1);
        let blocks = (0..cfg.res_blocks)
            .map(|i| {
                let mut s = init.scope(&alloc::format!("res{}", i));
                ResBlock {
                    c1: Conv::new(&mut s, "conv1", f, f, 3, 1),
                    c2: Conv::new(&mut s, "conv2", f, f, 3, 1),
                }
            })
            .collect();
        Branch {
            stem,
            blocks,
            head1: Linear::new(init, "head1", f, n, true),
            head2: Linear::new(init, "head2", n, n, true),
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, shape: PromptShape) -> Result<Var<'t, T>> {
        let mut h = self.stem.forward(p, x)?;
        for b in &self.blocks {
            let r = b.c2.forward(p, b.c1.forward(p, h)?.leaky_relu())?;
            h = h.add(r)?;
        }
        let c = h.shape()[0];
        let pooled = h.adaptive_avg_pool(1, 1)?.reshape(&[1, c])?;
        let z = self.head1.forward(p, pooled)?.leaky_relu();
        self.head2.forward(p, z)?.reshape(&[shape.tokens, shape.dim])
    }
}

#[derive(Debug, Clone)]
pub struct Fpe {
    low: Branch,
    high: Branch,
    cfg: FpeConfig,
}

impl Fpe {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: FpeConfig) -> Result<Self> {
        if cfg.images == 0 || cfg.features == 0 {
            return Err(Error::invalid("fpe", "needs at least one image and one feature"));
        }
        Ok(Fpe {
            low: Branch::new(&mut init.scope("low"), 3 * cfg.images, &cfg),
            high: Branch::new(&mut init.scope("high"), 9 * cfg.images, &cfg),
            cfg,
        })
    }

    pub fn config(&self) -> &FpeConfig {
        &self.cfg
    }

    /// Wavelet-split a `[3k × H × W]` stack into the `[3k × H/2 × W/2]` low
    /// and `[9k × H/2 × W/2]` high branch inputs.
    pub fn split_input<T: Real>(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = images.shape();
        if s.len() != 3 || s[0] != 3 * self.cfg.images {
            return Err(Error::shape("fpe", s, &[3 * self.cfg.images]));
        }
        let mut lows = Vec::with_capacity(self.cfg.images);
        let mut highs = Vec::with_capacity(self.cfg.images);
        for i in 0..self.cfg.images {
            let (lf, hf) = wavelet::split_freq(&images.slice0(3 * i, 3)?)?;
            lows.push(lf);
            highs.push(hf);
        }
        let lows: Vec<&Tensor<T>> = lows.iter().collect();
        let highs: Vec<&Tensor<T>> = highs.iter().collect();
        Ok((Tensor::concat0(&lows)?, Tensor::concat0(&highs)?))
    }

    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, images: &Tensor<T>) -> Result<PromptPair<Var<'t, T>>> {
        let (lf, hf) = self.split_input(images)?;
        let tape = p.vars().first().map(|v| v.tape()).ok_or_else(|| Error::invalid("fpe", "unbound parameters"))?;
        self.encode_bands(p, tape.constant(lf), tape.constant(hf))
    }

    /// Encode pre-split bands; the low branch never sees the high bands.
    pub fn encode_bands<'t, T: Real>(&self, p: &Bound<'t, T>, lf: Var<'t, T>, hf: Var<'t, T>) -> Result<PromptPair<Var<'t, T>>> {
        Ok(PromptPair {
            low: self.low.forward(p, lf, self.cfg.prompt)?,
            high: self.high.forward(p, hf, self.cfg.prompt)?,
        })
    }
}
