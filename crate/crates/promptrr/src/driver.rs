//! Stage runs with logging, metrics files and checkpoints.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::Serialize;

use promptrr_core::pipeline::{Models, Stage, Weights, STORE_NAMES};
use promptrr_core::synth::ImagePair;
use promptrr_core::train::{run_stage, StepLog};

use crate::checkpoint::Checkpoint;
use crate::config::{PresetName, RunConfig};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize)]
struct MetricsLine<'a> {
    stage: &'a str,
    step: usize,
    l1: f64,
    ldiff_l: f64,
    ldiff_h: f64,
    total: f64,
}

pub fn stage_from_name(name: &str) -> Option<Stage> {
    [Stage::Pretrain, Stage::Diffusion, Stage::Joint].into_iter().find(|s| s.name() == name)
}

/// The stage whose checkpoint a stage starts from.
pub fn previous(stage: Stage) -> Option<Stage> {
    match stage {
        Stage::Pretrain => None,
        Stage::Diffusion => Some(Stage::Pretrain),
        Stage::Joint => Some(Stage::Diffusion),
    }
}

pub fn preset_name(p: PresetName) -> &'static str {
    match p {
        PresetName::Paper => "paper",
        PresetName::Desk => "desk",
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub first: StepLog,
    pub last: StepLog,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// A model with its weights and the stage they were last trained in.
pub struct Session {
    pub cfg: RunConfig,
    pub models: Models,
    pub weights: Weights<f32>,
    pub stage: Option<Stage>,
}

impl Session {
    pub fn new(cfg: RunConfig) -> anyhow::Result<Self> {
        let (models, weights) = Models::build::<f32>(cfg.model, cfg.seed)?;
        Ok(Session {
            cfg,
            models,
            weights,
            stage: None,
        })
    }

    /// Restore a session. The checkpoint must come from the same preset and
    /// model configuration.
    pub fn load(cfg: RunConfig, path: &Path) -> anyhow::Result<Self> {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let meta = |k: &str| ckpt.meta.get(k).map(String::as_str).unwrap_or("");
        ensure!(
            meta("preset") == preset_name(cfg.preset),
            "checkpoint {} was trained with preset {:?}, not {:?}",
            path.display(),
            meta("preset"),
            preset_name(cfg.preset)
        );
        ensure!(
            meta("config_hash") == cfg.model_hash(),
            "checkpoint {} was trained with a different model configuration",
            path.display()
        );
        let stage = stage_from_name(meta("stage"));
        let mut s = Session::new(cfg)?;
        ckpt.load_into(&mut s.weights)?;
        s.stage = stage;
        Ok(s)
    }

    pub fn checkpoint(&self, iteration: usize) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("preset".into(), preset_name(self.cfg.preset).into());
        meta.insert("stage".into(), self.stage.map_or("init", |s| s.name()).into());
        meta.insert("iteration".into(), iteration.to_string());
        meta.insert("seed".into(), self.cfg.seed.to_string());
        meta.insert("config_hash".into(), self.cfg.model_hash());
        Checkpoint::from_weights(&self.weights, meta)
    }

    /// Train `stage`, writing `<stage>.metrics.jsonl` and `<stage>.ckpt` to
    /// `out_dir` and a log line every `log_every` steps to `log`.
    pub fn train(
        &mut self,
        stage: Stage,
        pairs: &[ImagePair],
        out_dir: &Path,
        log: &mut dyn Write,
    ) -> anyhow::Result<StageReport> {
        if self.stage != previous(stage) {
            bail!(
                "{} starts from a {} checkpoint, these weights are from {}",
                stage.name(),
                previous(stage).map_or("fresh model", |s| s.name()),
                self.stage.map_or("a fresh model", |s| s.name())
            );
        }
        if stage == Stage::Joint && self.cfg.reinit_former {
            self.weights.former = Models::build::<f32>(self.cfg.model, self.cfg.seed)?.1.former;
        }
        std::fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join(format!("{}.metrics.jsonl", stage.name()));
        let mut metrics = BufWriter::new(File::create(&metrics_path)?);
        let trainable = stage.trainable();
        let frozen: Vec<_> = (0..STORE_NAMES.len())
            .filter(|&i| !trainable.store(i))
            .map(|i| (i, self.weights.stores()[i].clone()))
            .collect();
        let cfg = *self.cfg.train.stage(stage);
        let every = self.cfg.log_every;
        let mut first = None;
        let mut last = None;
        let mut io_err = None;
        writeln!(log, "{:>6} {:>10} {:>10} {:>10} {:>10}", "step", "L1", "Ldiff_l", "Ldiff_h", "total")?;
        run_stage(&self.models, &mut self.weights, pairs, stage, &cfg, self.cfg.seed, |l| {
            first.get_or_insert(*l);
            last = Some(*l);
            let line = MetricsLine {
                stage: stage.name(),
                step: l.step,
                l1: l.l1,
                ldiff_l: l.diff_low,
                ldiff_h: l.diff_high,
                total: l.total(),
            };
            let mut emit = || -> std::io::Result<()> {
                serde_json::to_writer(&mut metrics, &line)?;
                writeln!(metrics)?;
                if l.step % every == 0 || l.step == cfg.iterations {
                    writeln!(
                        log,
                        "{:>6} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
                        l.step,
                        l.l1,
                        l.diff_low,
                        l.diff_high,
                        l.total()
                    )?;
                }
                Ok(())
            };
            if let Err(e) = emit() {
                io_err = Some(e);
                return Err(promptrr_core::Error::InvalidArgument {
                    op: "train",
                    msg: "writing logs failed".into(),
                });
            }
            Ok(())
        })
        .map_err(|e| match io_err.take() {
            Some(io) => anyhow::Error::from(io),
            None => e.into(),
        })?;
        metrics.flush()?;
        for (i, before) in frozen {
            let same = before
                .tensors()
                .iter()
                .zip(self.weights.stores()[i].tensors())
                .all(|(a, b)| a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())));
            ensure!(same, "frozen parameters of {} changed during {}", STORE_NAMES[i], stage.name());
        }
        self.stage = Some(stage);
        let ckpt_path = out_dir.join(format!("{}.ckpt", stage.name()));
        self.checkpoint(cfg.iterations).save(&ckpt_path)?;
        let (first, last) = match (first, last) {
            (Some(f), Some(l)) => (f, l),
            _ => bail!("{} ran no steps", stage.name()),
        };
        Ok(StageReport {
            first,
            last,
            checkpoint: ckpt_path,
            metrics: metrics_path,
        })
    }
}
