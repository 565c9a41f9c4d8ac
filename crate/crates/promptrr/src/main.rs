use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context};
use clap::{Args, Parser, Subcommand};

use promptrr::config::{FileConfig, PresetName, RunConfig};
use promptrr::dataset;
use promptrr::driver::{previous, Session};
use promptrr::infer::restore;
use promptrr::ppm;
use promptrr_core::gradcheck::{audit_micro, GradcheckConfig};
use promptrr_core::metrics::{psnr, ssim};
use promptrr_core::pipeline::Stage;

#[derive(Parser)]
#[command(name = "promptrr", version, about = "Frequency-prompt guided reflection removal")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetName>,
    /// Where checkpoints, metrics and synthesized data go.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory of NNNN_input.ppm / NNNN_gt.ppm pairs [default: <out-dir>/pairs]
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ResumeArg {
    /// Checkpoint of the previous stage [default: <out-dir>/<previous stage>.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic training pairs to <out-dir>/pairs.
    Synth {
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Side length; defaults to the configured patch size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Stage 1: prompt pre-training with ground-truth prompts.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
    },
    /// Stage 2: train the conditional encoder and the denoisers.
    TrainDiffusion {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        resume: ResumeArg,
    },
    /// Stage 3: joint fine-tuning with generated prompts.
    TrainJoint {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        resume: ResumeArg,
    },
    /// Restore one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Ground truth for the metrics line.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Mean PSNR/SSIM of inputs and restorations over a paired directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Finite-difference audit of the gradients of the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 2000)]
        max_coords: usize,
    },
}

fn resolve(g: &Global) -> anyhow::Result<RunConfig> {
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    RunConfig::resolve(&file, g.preset, g.seed)
}

fn data_dir(g: &Global, d: &DataArg) -> PathBuf {
    d.data.clone().unwrap_or_else(|| g.out_dir.join("pairs"))
}

fn train(g: &Global, stage: Stage, data: &DataArg, resume: Option<&ResumeArg>) -> anyhow::Result<()> {
    let cfg = resolve(g)?;
    let pairs = dataset::read_pairs(&data_dir(g, data))?;
    let pairs = dataset::crop_pairs(&pairs, cfg.patch_size)?;
    let mut session = match previous(stage) {
        None => Session::new(cfg)?,
        Some(prev) => {
            let path = resume
                .and_then(|r| r.checkpoint.clone())
                .unwrap_or_else(|| g.out_dir.join(format!("{}.ckpt", prev.name())));
            Session::load(cfg, &path)?
        }
    };
    let t0 = Instant::now();
    let stdout = std::io::stdout();
    let report = session.train(stage, &pairs, &g.out_dir, &mut stdout.lock())?;
    println!(
        "{} done in {:.1}s: total {:.5} -> {:.5}; checkpoint {}; metrics {}",
        stage.name(),
        t0.elapsed().as_secs_f64(),
        report.first.total(),
        report.last.total(),
        report.checkpoint.display(),
        report.metrics.display()
    );
    Ok(())
}

fn load_session(g: &Global, ckpt: &Path) -> anyhow::Result<Session> {
    Session::load(resolve(g)?, ckpt)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let g = &cli.global;
    match &cli.cmd {
        Cmd::Synth { count, size } => {
            let cfg = resolve(g)?;
            let size = size.unwrap_or(cfg.patch_size);
            let dir = g.out_dir.join("pairs");
            dataset::write_pairs(&dir, &dataset::synth_pairs(*count, size, cfg.seed)?)?;
            println!("wrote {count} pairs of {size}×{size} to {}", dir.display());
        }
        Cmd::Pretrain { data } => train(g, Stage::Pretrain, data, None)?,
        Cmd::TrainDiffusion { data, resume } => train(g, Stage::Diffusion, data, Some(resume))?,
        Cmd::TrainJoint { data, resume } => train(g, Stage::Joint, data, Some(resume))?,
        Cmd::Infer {
            checkpoint,
            input,
            output,
            gt,
        } => {
            let s = load_session(g, checkpoint)?;
            let x = ppm::read(input).with_context(|| format!("reading {}", input.display()))?;
            let y = restore(&s.models, &s.weights, &x, s.cfg.seed)?;
            ppm::write(output, &y)?;
            let mut line = serde_json::json!({
                "input": input.display().to_string(),
                "output": output.display().to_string(),
                "seed": s.cfg.seed,
            });
            if let Some(gt) = gt {
                let b = ppm::read(gt)?;
                line["psnr_input"] = psnr(&x, &b, 1.0)?.into();
                line["psnr"] = psnr(&y, &b, 1.0)?.into();
                line["ssim"] = ssim(&y, &b)?.into();
            }
            println!("{line}");
        }
        Cmd::Eval { checkpoint, data } => {
            let s = load_session(g, checkpoint)?;
            let pairs = dataset::read_pairs(&data_dir(g, data))?;
            let mut sums = [0.0f64; 4];
            for p in &pairs {
                let y = restore(&s.models, &s.weights, &p.input, s.cfg.seed)?;
                sums[0] += psnr(&p.input, &p.gt, 1.0)?;
                sums[1] += psnr(&y, &p.gt, 1.0)?;
                sums[2] += ssim(&p.input, &p.gt)?;
                sums[3] += ssim(&y, &p.gt)?;
            }
            let n = pairs.len() as f64;
            println!(
                "{}",
                serde_json::json!({
                    "pairs": pairs.len(),
                    "psnr_input": sums[0] / n,
                    "psnr": sums[1] / n,
                    "ssim_input": sums[2] / n,
                    "ssim": sums[3] / n,
                })
            );
        }
        Cmd::Gradcheck { max_coords } => {
            ensure!(*max_coords > 0, "max_coords must be positive");
            let cfg = GradcheckConfig {
                max_coords: *max_coords,
                seed: g.seed.unwrap_or(0),
                ..Default::default()
            };
            let t0 = Instant::now();
            let r = audit_micro(&cfg)?;
            println!(
                "checked {} of {} parameters: {} within {:e} ({:.2}%), max error {:.3e}, {:.1}s",
                r.checked,
                r.total_scalars,
                r.passed,
                cfg.tol,
                100.0 * r.fraction(),
                r.max_error,
                t0.elapsed().as_secs_f64()
            );
            for f in r.failures.iter().take(10) {
                println!("  {}[{}]: analytic {:.6e} numeric {:.6e}", f.param, f.index, f.analytic, f.numeric);
            }
            return Ok(r.ok());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::from(2)
        }
    }
}
