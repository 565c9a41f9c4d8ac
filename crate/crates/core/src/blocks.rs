//! Prompt-guided transformer units.
//!
//! * [`Mdta`]: channel-wise ("transposed") multi-head attention.
//! * [`Gdfn`]: GELU-gated depthwise-conv feed-forward network.
//! * [`Piim`]: prompt interaction (cross-attention between pooled features
//!   and prompt tokens, then prompt-conditioned re-standardization) followed
//!   by prompt injection (per-channel scale and shift).
//! * [`Tpb`]: `X' = X + PMSA(LN X, P)`, `X_out = X' + PFFN(LN X', P)`, where
//!   PMSA / PFFN are MDTA / GDFN with a PIIM between the norm and the body.
//!
//! With the PIIM disabled, PMSA and PFFN run exactly the MDTA and GDFN code
//! paths.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId};
use crate::real::Real;

/// Epsilon of every normalization in the blocks.
pub const NORM_EPS: f64 = 1e-5;

/// Token-matrix geometry shared by every prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptShape {
    /// Number of prompt tokens `n_p`.
    pub tokens: usize,
    /// Width of each token `d_p`.
    pub dim: usize,
    /// Spatial grid the host feature is pooled to; one token per cell, so
    /// `pool.0 * pool.1 == tokens`.
    pub pool: (usize, usize),
}

impl PromptShape {
    pub fn new(tokens: usize, dim: usize, pool: (usize, usize)) -> Result<Self> {
        if tokens == 0 || dim == 0 || pool.0 * pool.1 != tokens {
            return Err(Error::invalid(
                "prompt_shape",
                alloc::format!("pool grid {:?} must hold exactly {} tokens", pool, tokens),
            ));
        }
        Ok(PromptShape { tokens, dim, pool })
    }

    pub fn numel(&self) -> usize {
        self.tokens * self.dim
    }
}

impl Default for PromptShape {
    fn default() -> Self {
        PromptShape {
            tokens: 4,
            dim: 16,
            pool: (2, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiimMode {
    /// Interaction and injection.
    Full,
    /// Injection of the standardized prompt only.
    InjectOnly,
    /// No prompt; PMSA/PFFN reduce to MDTA/GDFN.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPlacement {
    Both,
    MsaOnly,
    FfnOnly,
    None,
}

impl PromptPlacement {
    fn msa(self) -> bool {
        matches!(self, PromptPlacement::Both | PromptPlacement::MsaOnly)
    }
    fn ffn(self) -> bool {
        matches!(self, PromptPlacement::Both | PromptPlacement::FfnOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpbConfig {
    pub channels: usize,
    pub heads: usize,
    pub piim_mode: PiimMode,
    pub placement: PromptPlacement,
    pub ffn_expansion: f64,
    pub prompt: PromptShape,
}

impl TpbConfig {
    pub fn new(channels: usize, heads: usize, prompt: PromptShape) -> Self {
        TpbConfig {
            channels,
            heads,
            piim_mode: PiimMode::Full,
            placement: PromptPlacement::Both,
            ffn_expansion: 2.0,
            prompt,
        }
    }

    pub fn with_mode(mut self, mode: PiimMode) -> Self {
        self.piim_mode = mode;
        self
    }

    pub fn with_placement(mut self, placement: PromptPlacement) -> Self {
        self.placement = placement;
        self
    }

    fn hidden(&self) -> usize {
        ((self.channels as f64 * self.ffn_expansion) as usize).max(1)
    }
}

/// Token-wise affine map `x·W + b`; `W` is `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let mut s = init.scope(name);
        let w = s.uniform("weight", &[din, dout], din);
        let b = bias.then(|| s.zeros("bias", &[dout]));
        Linear { w, b }
    }

    /// Weights scaled for a following leaky relu.
    pub fn kaiming<T: Real>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.kaiming("weight", &[din, dout], din, crate::kernels::LEAKY_SLOPE);
        let b = Some(s.zeros("bias", &[dout]));
        Linear { w, b }
    }

    /// Same layout with all weights zero.
    pub fn zeroed<T: Real>(init: &mut Init<'_, T>, name: &str, din: usize, dout: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.zeros("weight", &[din, dout]);
        let b = Some(s.zeros("bias", &[dout]));
        Linear { w, b }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p[self.w])?;
        match self.b {
            Some(b) => y.add_axis(p[b], 1),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1x1 {
    w: ParamId,
    b: ParamId,
}

impl Conv1x1 {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut s = init.scope(name);
        Conv1x1 {
            w: s.uniform("weight", &[cout, cin], cin),
            b: s.zeros("bias", &[cout]),
        }
    }

    pub fn zeroed<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut s = init.scope(name);
        Conv1x1 {
            w: s.zeros("weight", &[cout, cin]),
            b: s.zeros("bias", &[cout]),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv1x1(p[self.w], Some(p[self.b]))
    }
}

#[derive(Debug, Clone)]
pub struct DwConv {
    w: ParamId,
    b: ParamId,
}

impl DwConv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        let mut s = init.scope(name);
        DwConv {
            w: s.uniform("weight", &[c, 3, 3], 9),
            b: s.zeros("bias", &[c]),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.dwconv3x3(p[self.w])?.add_axis(p[self.b], 0)
    }
}

/// Dense k×k convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        Conv {
            w: s.uniform("weight", &[cout, cin, k, k], cin * k * k),
            b: s.zeros("bias", &[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn zeroed<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut s = init.scope(name);
        Conv {
            w: s.zeros("weight", &[cout, cin, k, k]),
            b: s.zeros("bias", &[cout]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p[self.w], self.stride, self.pad)?.add_axis(p[self.b], 0)
    }
}

/// Layer norm with learnable gain and bias over one axis.
#[derive(Debug, Clone)]
pub struct Norm {
    gain: ParamId,
    bias: ParamId,
    axis: usize,
}

impl Norm {
    /// Over channels of a C×H×W feature.
    pub fn channels<T: Real>(init: &mut Init<'_, T>, name: &str, c: usize) -> Self {
        Self::with_axis(init, name, c, 0)
    }

    /// Over the width of each row of an n×d token matrix.
    pub fn tokens<T: Real>(init: &mut Init<'_, T>, name: &str, d: usize) -> Self {
        Self::with_axis(init, name, d, 1)
    }

    fn with_axis<T: Real>(init: &mut Init<'_, T>, name: &str, n: usize, axis: usize) -> Self {
        let mut s = init.scope(name);
        Norm {
            gain: s.full("gain", &[n], 1.0),
            bias: s.zeros("bias", &[n]),
            axis,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.axis, p[self.gain], p[self.bias], NORM_EPS)
    }
}

/// Multi-dconv head transposed attention.
#[derive(Debug, Clone)]
pub struct Mdta {
    norm: Norm,
    qkv: Conv1x1,
    qkv_dw: DwConv,
    proj: Conv1x1,
    temperature: ParamId,
    heads: usize,
    channels: usize,
}

impl Mdta {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::invalid(
                "mdta",
                alloc::format!("{} heads do not divide {} channels", heads, channels),
            ));
        }
        Ok(Mdta {
            norm: Norm::channels(init, "norm", channels),
            qkv: Conv1x1::new(init, "qkv", channels, 3 * channels),
            qkv_dw: DwConv::new(init, "qkv_dw", 3 * channels),
            proj: Conv1x1::new(init, "proj", channels, channels),
            temperature: init.full("temperature", &[heads], 1.0),
            heads,
            channels,
        })
    }

    pub fn norm(&self) -> &Norm {
        &self.norm
    }

    pub fn proj_weight(&self) -> ParamId {
        self.proj.weight()
    }

    pub fn temperature(&self) -> ParamId {
        self.temperature
    }

    /// Per-head channel attention matrices `softmax(Q̂ K̂ᵀ / α)`, each
    /// `(C/heads) × (C/heads)`, for an already normalized input.
    pub fn attention_maps<'t, T: Real>(&self, p: &Bound<'t, T>, xn: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        Ok(self.attend(p, xn)?.1)
    }

    #[allow(clippy::type_complexity)]
    fn attend<'t, T: Real>(&self, p: &Bound<'t, T>, xn: Var<'t, T>) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let s = xn.shape();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::shape("mdta", &s, &[self.channels]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let qkv = self.qkv_dw.forward(p, self.qkv.forward(p, xn)?)?.reshape(&[3 * c, h * w])?;
        let ch = c / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = qkv.slice(head * ch, ch)?;
            let k = qkv.slice(c + head * ch, ch)?;
            let v = qkv.slice(2 * c + head * ch, ch)?;
            let alpha = p[self.temperature].slice(head, 1)?;
            let m = q.matmul(k.transpose()?)?.div_scalar(alpha)?.softmax();
            outs.push(m.matmul(v)?);
            maps.push(m);
        }
        let att = if outs.len() == 1 { outs[0] } else { Var::concat(&outs)? };
        Ok((att.reshape(&[c, h, w])?, maps))
    }

    /// `W_1x1 · Att(Q̂, K̂, V̂)` for an already normalized (and possibly
    /// prompt-modulated) input.
    pub fn branch<'t, T: Real>(&self, p: &Bound<'t, T>, xn: Var<'t, T>) -> Result<Var<'t, T>> {
        let (att, _) = self.attend(p, xn)?;
        self.proj.forward(p, att)
    }

    /// `W_1x1 · Att(LN x) + x`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let xn = self.norm.forward(p, x)?;
        x.add(self.branch(p, xn)?)
    }
}

/// Gated-dconv feed-forward network.
#[derive(Debug, Clone)]
pub struct Gdfn {
    norm: Norm,
    proj_in: Conv1x1,
    dw: DwConv,
    proj_out: Conv1x1,
    hidden: usize,
}

impl Gdfn {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, hidden: usize) -> Self {
        Gdfn {
            norm: Norm::channels(init, "norm", channels),
            proj_in: Conv1x1::new(init, "proj_in", channels, 2 * hidden),
            dw: DwConv::new(init, "dw", 2 * hidden),
            proj_out: Conv1x1::new(init, "proj_out", hidden, channels),
            hidden,
        }
    }

    pub fn norm(&self) -> &Norm {
        &self.norm
    }

    pub fn proj_out_weight(&self) -> ParamId {
        self.proj_out.weight()
    }

    /// `φ(W³ W¹ x) ⊙ (W³ W¹ x)` over the two halves of the expanded feature.
    pub fn gate<'t, T: Real>(&self, p: &Bound<'t, T>, xn: Var<'t, T>) -> Result<Var<'t, T>> {
        let t = self.dw.forward(p, self.proj_in.forward(p, xn)?)?;
        let a = t.slice(0, self.hidden)?;
        let b = t.slice(self.hidden, self.hidden)?;
        a.gelu().mul(b)
    }

    pub fn branch<'t, T: Real>(&self, p: &Bound<'t, T>, xn: Var<'t, T>) -> Result<Var<'t, T>> {
        self.proj_out.forward(p, self.gate(p, xn)?)
    }

    /// `W_1x1 · Gate(LN x) + x`.
    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let xn = self.norm.forward(p, x)?;
        x.add(self.branch(p, xn)?)
    }
}

/// `linear → token layer norm → leaky relu → linear`, producing γ or β.
#[derive(Debug, Clone)]
struct PromptMlp {
    l1: Linear,
    norm: Norm,
    l2: Linear,
}

impl PromptMlp {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, d: usize) -> Self {
        let mut s = init.scope(name);
        PromptMlp {
            l1: Linear::new(&mut s, "l1", d, d, true),
            norm: Norm::tokens(&mut s, "norm", d),
            l2: Linear::zeroed(&mut s, "l2", d, d),
        }
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.norm.forward(p, self.l1.forward(p, x)?)?.leaky_relu();
        self.l2.forward(p, h)
    }
}

/// Cross-attention half of the PIIM.
#[derive(Debug, Clone)]
struct Interaction {
    embed1: Linear,
    embed2: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    temperature: ParamId,
    f_gamma: PromptMlp,
    f_beta: PromptMlp,
}

/// Prompt interaction and injection module.
#[derive(Debug, Clone)]
pub struct Piim {
    interaction: Option<Interaction>,
    w1: Linear,
    w2: Linear,
    shape: PromptShape,
    channels: usize,
}

impl Piim {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, shape: PromptShape, interact: bool) -> Self {
        let d = shape.dim;
        let interaction = interact.then(|| Interaction {
            embed1: Linear::new(init, "embed1", channels, d, true),
            embed2: Linear::new(init, "embed2", d, d, true),
            wq: Linear::new(init, "wq", d, d, false),
            wk: Linear::new(init, "wk", d, d, false),
            wv: Linear::new(init, "wv", d, d, false),
            temperature: init.full("temperature", &[1], 1.0),
            f_gamma: PromptMlp::new(init, "f_gamma", d),
            f_beta: PromptMlp::new(init, "f_beta", d),
        });
        Piim {
            interaction,
            w1: Linear::new(init, "w1", shape.numel(), channels, true),
            w2: Linear::new(init, "w2", shape.numel(), channels, true),
            shape,
            channels,
        }
    }

    pub fn interacts(&self) -> bool {
        self.interaction.is_some()
    }

    pub fn w1_weight(&self) -> ParamId {
        self.w1.weight()
    }

    fn check_prompt<T: Real>(&self, prompt: Var<'_, T>) -> Result<()> {
        let s = prompt.shape();
        if s != [self.shape.tokens, self.shape.dim] {
            return Err(Error::shape("piim", &s, &[self.shape.tokens, self.shape.dim]));
        }
        Ok(())
    }

    /// Pool `x` to one token per grid cell and embed to the prompt shape.
    fn embed<'t, T: Real>(&self, it: &Interaction, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ph, pw) = self.shape.pool;
        let tokens = x
            .adaptive_avg_pool(ph, pw)?
            .reshape(&[self.channels, self.shape.tokens])?
            .transpose()?;
        let h = it.embed1.forward(p, tokens)?.leaky_relu();
        it.embed2.forward(p, h)
    }

    /// Adaptive pooling over the token axis back to `n_p` rows; the identity
    /// when the attention output already has prompt shape.
    fn adap<'t, T: Real>(&self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = a.shape();
        if s[0] == self.shape.tokens {
            return Ok(a);
        }
        a.reshape(&[1, s[0], s[1]])?
            .adaptive_avg_pool(self.shape.tokens, s[1])?
            .reshape(&[self.shape.tokens, s[1]])
    }

    /// Token attention matrix `softmax(Q Kᵀ / α)` (rows sum to one).
    pub fn attention<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        let it = self
            .interaction
            .as_ref()
            .ok_or_else(|| Error::invalid("piim", "module was built without interaction"))?;
        self.check_prompt(prompt)?;
        let xh = self.embed(it, p, x)?;
        let q = it.wq.forward(p, xh)?;
        let k = it.wk.forward(p, prompt)?;
        Ok(q.matmul(k.transpose()?)?.div_scalar(p[it.temperature])?.softmax())
    }

    /// Refined prompt `P_r`. Without interaction this is the per-token
    /// standardization of `P`.
    pub fn interact<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_prompt(prompt)?;
        let Some(it) = &self.interaction else {
            return prompt.normalize(1, NORM_EPS);
        };
        let xh = self.embed(it, p, x)?;
        let q = it.wq.forward(p, xh)?;
        let k = it.wk.forward(p, prompt)?;
        let v = it.wv.forward(p, xh)?;
        let a = q.matmul(k.transpose()?)?.div_scalar(p[it.temperature])?.softmax();
        let refined = self.adap(a.matmul(v)?)?;
        let gamma = it.f_gamma.forward(p, prompt)?;
        let beta = it.f_beta.forward(p, prompt)?;
        refined
            .normalize(1, NORM_EPS)?
            .mul(gamma.add_scalar(T::one()))?
            .add(beta)
    }

    /// `X' = (W₁ P_r) ⊙ X + W₂ P_r` with the two length-C vectors broadcast
    /// over space.
    pub fn inject<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, refined: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = x.shape();
        if xs.len() != 3 || xs[0] != self.channels {
            return Err(Error::shape("piim_inject", &xs, &[self.channels]));
        }
        let flat = refined.reshape(&[1, self.shape.numel()])?;
        let scale = self.w1.forward(p, flat)?.reshape(&[self.channels])?;
        let shift = self.w2.forward(p, flat)?.reshape(&[self.channels])?;
        x.mul_axis(scale, 0)?.add_axis(shift, 0)
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        let refined = self.interact(p, x, prompt)?;
        self.inject(p, x, refined)
    }
}

/// Transformer-based prompt block.
#[derive(Debug, Clone)]
pub struct Tpb {
    msa: Mdta,
    msa_piim: Option<Piim>,
    ffn: Gdfn,
    ffn_piim: Option<Piim>,
}

impl Tpb {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &TpbConfig) -> Result<Self> {
        let interact = cfg.piim_mode == PiimMode::Full;
        let enabled = cfg.piim_mode != PiimMode::Off;
        let msa = Mdta::new(&mut init.scope("msa"), cfg.channels, cfg.heads)?;
        let msa_piim = (enabled && cfg.placement.msa())
            .then(|| Piim::new(&mut init.scope("msa_piim"), cfg.channels, cfg.prompt, interact));
        let ffn = Gdfn::new(&mut init.scope("ffn"), cfg.channels, cfg.hidden());
        let ffn_piim = (enabled && cfg.placement.ffn())
            .then(|| Piim::new(&mut init.scope("ffn_piim"), cfg.channels, cfg.prompt, interact));
        Ok(Tpb {
            msa,
            msa_piim,
            ffn,
            ffn_piim,
        })
    }

    pub fn mdta(&self) -> &Mdta {
        &self.msa
    }

    pub fn gdfn(&self) -> &Gdfn {
        &self.ffn
    }

    pub fn msa_piim(&self) -> Option<&Piim> {
        self.msa_piim.as_ref()
    }

    pub fn ffn_piim(&self) -> Option<&Piim> {
        self.ffn_piim.as_ref()
    }

    /// `x + W·Att(PIIM(LN x, P))`.
    pub fn pmsa<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        let xn = self.msa.norm().forward(p, x)?;
        let xn = match &self.msa_piim {
            Some(piim) => piim.forward(p, xn, prompt)?,
            None => xn,
        };
        x.add(self.msa.branch(p, xn)?)
    }

    /// `x + W·Gate(PIIM(LN x, P))`.
    pub fn pffn<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>, prompt: Var<'t, T>) -> Result<Var<'t, T>> {
        let xn = self.ffn.norm().forward(p, x)?;
        let xn = match &self.ffn_piim {
            Some(piim) => piim.forward(p, xn, prompt)?,
            None => xn,
        };
        x.add(self.ffn.branch(p, xn)?)
    }

    /// `msa_prompt` conditions the attention half, `ffn_prompt` the feed-forward half.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        msa_prompt: Var<'t, T>,
        ffn_prompt: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mid = self.pmsa(p, x, msa_prompt)?;
        self.pffn(p, mid, ffn_prompt)
    }
}
