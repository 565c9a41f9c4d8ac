use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3
patch_size = 16
log_every = 2

[model]
base_channels = 4
stage_blocks = [1, 1, 1, 1]
stage_heads = [1, 2, 2, 2]
prompt_tokens = 2
prompt_dim = 4
prompt_pool = [1, 2]
fpe_features = 4
fpe_res_blocks = 1

[pretrain]
iterations = 4

[diffusion]
iterations = 3

[joint]
iterations = 2
"#;

fn promptrr(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_promptrr"))
        .args(["--config", "run.toml", "--out-dir", "out"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = promptrr(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_run_through_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();

    ok(dir, &["synth", "--count", "2", "--size", "20"]);
    assert!(dir.join("out/pairs/0001_gt.ppm").exists());

    // later stages need the earlier checkpoints
    assert_eq!(promptrr(dir, &["train-joint"]).status.code(), Some(2));

    let log = ok(dir, &["pretrain"]);
    assert_eq!(log.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 2);
    ok(dir, &["train-diffusion"]);
    ok(dir, &["train-joint"]);
    for stage in ["pretrain", "diffusion", "joint"] {
        assert!(dir.join(format!("out/{stage}.ckpt")).exists());
        let metrics = std::fs::read_to_string(dir.join(format!("out/{stage}.metrics.jsonl"))).unwrap();
        assert!(metrics.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    }

    let infer = |name: &str| {
        let line = ok(
            dir,
            &[
                "infer",
                "--checkpoint",
                "out/joint.ckpt",
                "--input",
                "out/pairs/0000_input.ppm",
                "--gt",
                "out/pairs/0000_gt.ppm",
                "--output",
                name,
            ],
        );
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert!(v["psnr"].is_f64() && v["ssim"].is_f64());
        std::fs::read(dir.join(name)).unwrap()
    };
    assert_eq!(infer("a.ppm"), infer("b.ppm"));

    let eval: serde_json::Value = serde_json::from_str(ok(dir, &["eval", "--checkpoint", "out/joint.ckpt"]).trim()).unwrap();
    assert_eq!(eval["pairs"], 2);

    let wrong = promptrr(dir, &["--preset", "paper", "eval", "--checkpoint", "out/joint.ckpt"]);
    assert_eq!(wrong.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("preset"));
}

#[test]
fn gradcheck_command_reports() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "").unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--max-coords", "1"]);
    assert!(out.starts_with("checked "), "{out}");
}

#[test]
fn bad_config_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "patch_size = 12\n").unwrap();
    let out = promptrr(tmp.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
}
