//! Run configuration read from TOML. Every key is optional; anything left
//! out comes from the preset.
//!
//! ```toml
//! preset = "desk"            # or "paper"
//! seed = 7
//! patch_size = 64            # training crops; multiple of 8
//! log_every = 50             # console log period in steps
//! reinit_former = false      # start the joint stage from a fresh restorer
//!
//! [model]
//! base_channels = 16
//! stage_blocks = [1, 2, 2, 2]
//! stage_heads = [1, 2, 2, 4]
//! prompt_tokens = 4
//! prompt_dim = 16
//! prompt_pool = [2, 2]
//! routing = "lf_msa_hf_ffn"  # or "both_everywhere"
//! piim_mode = "full"         # "inject_only", "off"
//! placement = "both"         # "msa_only", "ffn_only", "none"
//! ffn_expansion = 2.0
//! fpe_features = 16
//! fpe_res_blocks = 2
//! diffusion_steps = 4
//! beta_start = 0.1
//! beta_end = 0.99
//! sampler = "implicit"       # or "subtract"
//! pre_input = "gt_and_input" # or "gt_only"
//! detach_prompts = false
//!
//! [pretrain]                 # likewise [diffusion] and [joint]
//! iterations = 500
//! batch_size = 1
//! learning_rate = 1e-4
//! weight_decay = 1e-4
//! draws = 1
//! ```

use std::path::Path;

use anyhow::{ensure, Context};
use serde::{Deserialize, Serialize};

use promptrr_core::blocks::{PiimMode, PromptPlacement, PromptShape};
use promptrr_core::diffusion::Sampler;
use promptrr_core::pipeline::{ModelConfig, PreInput};
use promptrr_core::promptformer::{Preset, PromptRouting};
use promptrr_core::train::{StageConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Paper,
    #[default]
    Desk,
}

impl From<PresetName> for Preset {
    fn from(p: PresetName) -> Self {
        match p {
            PresetName::Paper => Preset::Paper,
            PresetName::Desk => Preset::Desk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    LfMsaHfFfn,
    BothEverywhere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Piim {
    Full,
    InjectOnly,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Both,
    MsaOnly,
    FfnOnly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerName {
    Implicit,
    Subtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreInputName {
    GtAndInput,
    GtOnly,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_channels: Option<usize>,
    pub stage_blocks: Option<[usize; 4]>,
    pub stage_heads: Option<[usize; 4]>,
    pub prompt_tokens: Option<usize>,
    pub prompt_dim: Option<usize>,
    pub prompt_pool: Option<(usize, usize)>,
    pub routing: Option<Routing>,
    pub piim_mode: Option<Piim>,
    pub placement: Option<Placement>,
    pub ffn_expansion: Option<f64>,
    pub fpe_features: Option<usize>,
    pub fpe_res_blocks: Option<usize>,
    pub diffusion_steps: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub sampler: Option<SamplerName>,
    pub pre_input: Option<PreInputName>,
    pub detach_prompts: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub iterations: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub draws: Option<usize>,
}

impl StageSection {
    fn apply(&self, s: &mut StageConfig) {
        s.iterations = self.iterations.unwrap_or(s.iterations);
        s.batch_size = self.batch_size.unwrap_or(s.batch_size);
        s.learning_rate = self.learning_rate.unwrap_or(s.learning_rate);
        s.weight_decay = self.weight_decay.unwrap_or(s.weight_decay);
        s.draws = self.draws.unwrap_or(s.draws);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<PresetName>,
    pub seed: Option<u64>,
    pub patch_size: Option<usize>,
    pub log_every: Option<usize>,
    pub reinit_former: Option<bool>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: StageSection,
    #[serde(default)]
    pub diffusion: StageSection,
    #[serde(default)]
    pub joint: StageSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: PresetName,
    pub seed: u64,
    pub patch_size: usize,
    pub log_every: usize,
    pub reinit_former: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Preset defaults, then the file, then command-line overrides.
    pub fn resolve(file: &FileConfig, preset: Option<PresetName>, seed: Option<u64>) -> anyhow::Result<Self> {
        let preset = preset.or(file.preset).unwrap_or_default();
        let mut model = ModelConfig::preset(preset.into());
        let mut train = TrainConfig::preset(preset.into());
        let m = &file.model;
        let f = &mut model.former;
        f.base_channels = m.base_channels.unwrap_or(f.base_channels);
        f.stage_blocks = m.stage_blocks.unwrap_or(f.stage_blocks);
        f.stage_heads = m.stage_heads.unwrap_or(f.stage_heads);
        f.ffn_expansion = m.ffn_expansion.unwrap_or(f.ffn_expansion);
        if m.prompt_tokens.is_some() || m.prompt_dim.is_some() || m.prompt_pool.is_some() {
            f.prompt = PromptShape::new(
                m.prompt_tokens.unwrap_or(f.prompt.tokens),
                m.prompt_dim.unwrap_or(f.prompt.dim),
                m.prompt_pool.unwrap_or(f.prompt.pool),
            )?;
        }
        if let Some(r) = m.routing {
            f.routing = match r {
                Routing::LfMsaHfFfn => PromptRouting::LfMsaHfFfn,
                Routing::BothEverywhere => PromptRouting::BothEverywhere,
            };
        }
        if let Some(p) = m.piim_mode {
            f.piim_mode = match p {
                Piim::Full => PiimMode::Full,
                Piim::InjectOnly => PiimMode::InjectOnly,
                Piim::Off => PiimMode::Off,
            };
        }
        if let Some(p) = m.placement {
            f.placement = match p {
                Placement::Both => PromptPlacement::Both,
                Placement::MsaOnly => PromptPlacement::MsaOnly,
                Placement::FfnOnly => PromptPlacement::FfnOnly,
                Placement::None => PromptPlacement::None,
            };
        }
        model.fpe_features = m.fpe_features.unwrap_or(model.fpe_features);
        model.fpe_res_blocks = m.fpe_res_blocks.unwrap_or(model.fpe_res_blocks);
        model.diffusion_steps = m.diffusion_steps.unwrap_or(model.diffusion_steps);
        model.beta_range = (
            m.beta_start.unwrap_or(model.beta_range.0),
            m.beta_end.unwrap_or(model.beta_range.1),
        );
        if let Some(s) = m.sampler {
            model.sampler = match s {
                SamplerName::Implicit => Sampler::Implicit,
                SamplerName::Subtract => Sampler::Subtract,
            };
        }
        if let Some(p) = m.pre_input {
            model.pre_input = match p {
                PreInputName::GtAndInput => PreInput::GtAndInput,
                PreInputName::GtOnly => PreInput::GtOnly,
            };
        }
        model.detach_prompts = m.detach_prompts.unwrap_or(model.detach_prompts);
        file.pretrain.apply(&mut train.pretrain);
        file.diffusion.apply(&mut train.diffusion);
        file.joint.apply(&mut train.joint);

        let default_patch = match preset {
            PresetName::Paper => 128,
            PresetName::Desk => 64,
        };
        let cfg = RunConfig {
            preset,
            seed: seed.or(file.seed).unwrap_or(7),
            patch_size: file.patch_size.unwrap_or(default_patch),
            log_every: file.log_every.unwrap_or(50),
            reinit_former: file.reinit_former.unwrap_or(false),
            model,
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        let m = self.model.former.size_multiple().max(2);
        ensure!(
            self.patch_size > 0 && self.patch_size.is_multiple_of(m),
            "patch_size {} must be a positive multiple of {m}",
            self.patch_size
        );
        ensure!(self.log_every > 0, "log_every must be positive");
        for (name, s) in [
            ("pretrain", &self.train.pretrain),
            ("diffusion", &self.train.diffusion),
            ("joint", &self.train.joint),
        ] {
            ensure!(
                s.batch_size > 0 && s.draws > 0 && s.learning_rate > 0.0 && s.weight_decay >= 0.0,
                "[{name}] needs positive batch_size, draws and learning_rate"
            );
        }
        self.model.schedule()?;
        Ok(())
    }

    /// Digest of everything that fixes the parameter layout and behaviour
    /// of the model.
    pub fn model_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(format!("{:?}", self.model).as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_preset() {
        let cfg = RunConfig::resolve(&FileConfig::default(), None, None).unwrap();
        assert_eq!(cfg.model, ModelConfig::preset(Preset::Desk));
        assert_eq!(cfg.train, TrainConfig::preset(Preset::Desk));
        assert_eq!((cfg.seed, cfg.patch_size), (7, 64));
    }

    #[test]
    fn overrides_apply_in_order() {
        let file: FileConfig = toml::from_str(
            r#"
            preset = "paper"
            seed = 3
            [model]
            routing = "both_everywhere"
            piim_mode = "off"
            [diffusion]
            iterations = 12
            "#,
        )
        .unwrap();
        let cfg = RunConfig::resolve(&file, None, Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.preset, PresetName::Paper);
        assert_eq!(cfg.model.former.base_channels, 48);
        assert_eq!(cfg.model.former.routing, PromptRouting::BothEverywhere);
        assert_eq!(cfg.model.former.piim_mode, PiimMode::Off);
        assert_eq!(cfg.train.diffusion.iterations, 12);
        assert_eq!(cfg.patch_size, 128);
        let desk = RunConfig::resolve(&file, Some(PresetName::Desk), None).unwrap();
        assert_eq!(desk.model.former.base_channels, 16);
        assert_ne!(cfg.model_hash(), desk.model_hash());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = |s: &str| {
            let file: FileConfig = toml::from_str(s).unwrap();
            RunConfig::resolve(&file, None, None).is_err()
        };
        assert!(bad("patch_size = 60"));
        assert!(bad("[model]\nprompt_pool = [3, 1]"));
        assert!(bad("[joint]\nbatch_size = 0"));
        assert!(bad("[model]\nbeta_end = 1.0"));
        assert!(toml::from_str::<FileConfig>("unknown = 1").is_err());
    }
}
