//! The prompt-guided restoration network.
//!
//! ```text
//! input ─ conv3×3 ─ extractor TPBs ─ enc0 ─↓─ enc1 ─↓─ enc2 ─↓─ latent
//!                                     │        │        │          │
//!                                     └─ dec0 ─↑─ dec1 ─↑─ dec2 ─↑─┘
//!        dec0 ─ reconstruction TPBs ─ conv3×3 (zero init) ─ + input ─ output
//! ```
//!
//! Downsampling is a stride-2 3×3 conv doubling channels; upsampling is
//! nearest-neighbour 2× followed by a 1×1 conv halving them, and the matching
//! encoder output is added back. Extractor and reconstruction blocks only
//! inject the prompt; trunk blocks also run the interaction step.

use alloc::vec::Vec;

use crate::autodiff::Var;
use crate::blocks::{Conv, Conv1x1, PiimMode, PromptPlacement, PromptShape, Tpb, TpbConfig};
use crate::error::{Error, Result};
use crate::fpe::PromptPair;
use crate::params::{Bound, Init};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

/// Which prompt conditions which half of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRouting {
    /// Low-frequency prompt into attention, high-frequency into feed-forward.
    LfMsaHfFfn,
    /// The sum of both prompts into every PIIM.
    BothEverywhere,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptFormerConfig {
    pub base_channels: usize,
    pub stage_blocks: [usize; 4],
    pub stage_heads: [usize; 4],
    pub prompt: PromptShape,
    pub routing: PromptRouting,
    pub piim_mode: PiimMode,
    pub placement: PromptPlacement,
    pub ffn_expansion: f64,
    pub extractor_blocks: usize,
    pub reconstruction_blocks: usize,
}

impl PromptFormerConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => PromptFormerConfig {
                base_channels: 48,
                stage_blocks: [4, 6, 6, 8],
                stage_heads: [1, 2, 4, 8],
                ..Self::preset(Preset::Desk)
            },
            Preset::Desk => PromptFormerConfig {
                base_channels: 16,
                stage_blocks: [1, 2, 2, 2],
                stage_heads: [1, 2, 2, 4],
                prompt: PromptShape::default(),
                routing: PromptRouting::LfMsaHfFfn,
                piim_mode: PiimMode::Full,
                placement: PromptPlacement::Both,
                ffn_expansion: 2.0,
                extractor_blocks: 1,
                reconstruction_blocks: 1,
            },
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stage_blocks.len() - 1)
    }

    fn tpb(&self, level: usize, mode: PiimMode) -> TpbConfig {
        TpbConfig {
            channels: self.base_channels << level,
            heads: self.stage_heads[level],
            piim_mode: mode,
            placement: self.placement,
            ffn_expansion: self.ffn_expansion,
            prompt: self.prompt,
        }
    }

    fn outer_mode(&self) -> PiimMode {
        match self.piim_mode {
            PiimMode::Off => PiimMode::Off,
            _ => PiimMode::InjectOnly,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptFormer {
    embed: Conv,
    extractor: Vec<Tpb>,
    encoders: Vec<Vec<Tpb>>,
    downs: Vec<Conv>,
    latent: Vec<Tpb>,
    ups: Vec<Conv1x1>,
    decoders: Vec<Vec<Tpb>>,
    reconstruction: Vec<Tpb>,
    output: Conv,
    cfg: PromptFormerConfig,
}

fn stack<T: Real>(init: &mut Init<'_, T>, name: &str, n: usize, cfg: &TpbConfig) -> Result<Vec<Tpb>> {
    let mut s = init.scope(name);
    (0..n)
        .map(|i| Tpb::new(&mut s.scope(&alloc::format!("{}", i)), cfg))
        .collect()
}

impl PromptFormer {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: PromptFormerConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let levels = cfg.stage_blocks.len();
        let embed = Conv::new(init, "embed", 3, c, 3, 1);
        let extractor = stack(init, "extractor", cfg.extractor_blocks, &cfg.tpb(0, cfg.outer_mode()))?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels - 1 {
            encoders.push(stack(init, &alloc::format!("enc{}", l), cfg.stage_blocks[l], &cfg.tpb(l, cfg.piim_mode))?);
            downs.push(Conv::new(init, &alloc::format!("down{}", l), c << l, c << (l + 1), 3, 2));
        }
        let latent = stack(init, "latent", cfg.stage_blocks[levels - 1], &cfg.tpb(levels - 1, cfg.piim_mode))?;
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for l in (0..levels - 1).rev() {
            ups.push(Conv1x1::new(init, &alloc::format!("up{}", l), c << (l + 1), c << l));
            decoders.push(stack(init, &alloc::format!("dec{}", l), cfg.stage_blocks[l], &cfg.tpb(l, cfg.piim_mode))?);
        }
        let reconstruction = stack(init, "reconstruction", cfg.reconstruction_blocks, &cfg.tpb(0, cfg.outer_mode()))?;
        let output = Conv::zeroed(init, "output", c, 3, 3);
        Ok(PromptFormer {
            embed,
            extractor,
            encoders,
            downs,
            latent,
            ups,
            decoders,
            reconstruction,
            output,
            cfg,
        })
    }

    pub fn config(&self) -> &PromptFormerConfig {
        &self.cfg
    }

    /// Every block in execution order.
    pub fn blocks(&self) -> impl Iterator<Item = &Tpb> {
        self.extractor
            .iter()
            .chain(self.encoders.iter().flatten())
            .chain(&self.latent)
            .chain(self.decoders.iter().flatten())
            .chain(&self.reconstruction)
    }

    fn run<'t, T: Real>(
        blocks: &[Tpb],
        p: &Bound<'t, T>,
        mut x: Var<'t, T>,
        prompts: (Var<'t, T>, Var<'t, T>),
    ) -> Result<Var<'t, T>> {
        for b in blocks {
            x = b.forward(p, x, prompts.0, prompts.1)?;
        }
        Ok(x)
    }

    /// Restore a 3×H×W image. Output values are not clamped.
    pub fn restore<'t, T: Real>(&self, p: &Bound<'t, T>, input: Var<'t, T>, prompts: PromptPair<Var<'t, T>>) -> Result<Var<'t, T>> {
        let s = input.shape();
        let m = self.cfg.size_multiple();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("restore", &s, &[3]));
        }
        if !s[1].is_multiple_of(m) || !s[2].is_multiple_of(m) {
            return Err(Error::invalid(
                "restore",
                alloc::format!("spatial size {}x{} is not a multiple of {}", s[1], s[2], m),
            ));
        }
        let routed = match self.cfg.routing {
            PromptRouting::LfMsaHfFfn => (prompts.low, prompts.high),
            PromptRouting::BothEverywhere => {
                let both = prompts.low.add(prompts.high)?;
                (both, both)
            }
        };
        let mut x = self.embed.forward(p, input)?;
        x = Self::run(&self.extractor, p, x, routed)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            x = Self::run(enc, p, x, routed)?;
            skips.push(x);
            x = down.forward(p, x)?;
        }
        x = Self::run(&self.latent, p, x, routed)?;
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per level");
            x = up.forward(p, x.upsample2()?)?.add(skip)?;
            x = Self::run(dec, p, x, routed)?;
        }
        x = Self::run(&self.reconstruction, p, x, routed)?;
        input.add(self.output.forward(p, x)?)
    }
}
