//! End-to-end tests of the `quilt` binary: determinism, refusal paths,
//! manifests, and reproducibility from config snapshots.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn quilt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quilt"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn quilt");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn quilt");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded: {cmd:?}"
    );
    out
}

fn tiny_config(task: &str, dir: &Path) -> PathBuf {
    let (patch_len, stride, token_patch, sampler_max) = match task {
        "bump2d" => (16, 16, 4, 80.0),
        _ => (8, 4, 2, 20.0),
    };
    let text = format!(
        r#"
task = "{task}"
seed = 11
dataset_size = 8

[grid]
patch_len = {patch_len}
stride = {stride}
l_train = 2
l_test = 3

[base]
hidden = 8
blocks = 1
fourier_dim = 2

[train_base]
lr = 1e-3
batch_size = 4
epochs = 2
sigma_log_mean = -1.0
sigma_log_std = 1.0
cond_dropout = 0.1
ema_decay = 0.99
lr_final_scale = 1.0

[coord]
arch = "vit"
token_patch = {token_patch}
hidden = 8
depth = 1
heads = 2
mlp_ratio = 2
theta_base = 1e4
fourier_dim = 2
rnn_hidden_channels = 4
rnn_conv_hidden = 8
rnn_kernel = 3

[train_coord]
lr = 1e-3
batch_size = 4
epochs = 1
sigma_log_mean = -1.0
sigma_log_std = 1.0
cond_dropout = 0.1
ema_decay = 0.99
lr_final_scale = 1.0

[sampler]
steps = 6
sigma_min = 1e-4
sigma_max = {sampler_max}
rho = 7.0
churn = 0.0
order = 2

[eval]
n_samples = 4
w_dde = 20.0
w_rrr = 4.0
oracle_radius = 2.0
oracle_tau = 0.5
separation = "euclidean"
separation_threshold = 0.15
reference_size = 4
"#
    );
    let path = dir.join(format!("{task}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn train_base_is_deterministic_and_loss_csv_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("gaussian-oracle", dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(quilt().args(["train-base", "--config"]).arg(&cfg).arg("--out").arg(&a));
    run_ok(quilt().args(["train-base", "--config"]).arg(&cfg).arg("--out").arg(&b));
    assert_eq!(read(&a.join("base_loss.csv")), read(&b.join("base_loss.csv")));
    assert_eq!(read(&a.join("base.ckpt")), read(&b.join("base.ckpt")));

    let text = String::from_utf8(read(&a.join("base_loss.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,loss"));
    for (i, line) in lines.enumerate() {
        let epoch: usize = line.split(',').next().unwrap().parse().unwrap();
        assert_eq!(epoch, i, "epoch index must be monotone");
    }
    // a config snapshot sits next to the outputs
    assert!(a.join("config.toml").exists());
}

#[test]
fn train_coord_requires_base_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("gaussian-oracle", dir.path());
    let out = run_err(
        quilt()
            .args(["train-coord", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join("c")),
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--base-ckpt"), "stderr: {stderr}");
}

fn train_tiny(task: &str, dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = tiny_config(task, dir);
    let base_dir = dir.join(format!("{task}_base"));
    run_ok(quilt().args(["train-base", "--config"]).arg(&cfg).arg("--out").arg(&base_dir));
    let coord_dir = dir.join(format!("{task}_coord"));
    run_ok(
        quilt()
            .args(["train-coord", "--config"])
            .arg(&cfg)
            .arg("--base-ckpt")
            .arg(base_dir.join("base_ema.ckpt"))
            .arg("--out")
            .arg(&coord_dir),
    );
    (
        cfg,
        base_dir.join("base_ema.ckpt"),
        coord_dir.join("coord_ema.ckpt"),
    )
}

#[test]
fn sample_rejects_incompatible_method_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, _) = train_tiny("gaussian-oracle", dir.path());

    // concat at L=2: object length 12 is not a multiple of the patch
    // length 8, so this must fail before sampling
    let out_dir = dir.path().join("bad");
    let out = run_err(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "concat", "--L", "2", "--n", "2", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(&out_dir),
    );
    assert!(!out_dir.join("samples.csv").exists(), "no outputs expected");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("multiple"), "stderr: {stderr}");

    // the guidance-sum method needs a conditional task
    run_err(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "rrr", "--L", "2", "--n", "2", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(dir.path().join("bad2")),
    );

    // dde requires a coordinator checkpoint
    run_err(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "dde", "--L", "3", "--n", "2", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(dir.path().join("bad3")),
    );
}

#[test]
fn bump_sampling_writes_manifest_with_guidance_and_conditionings() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, _) = train_tiny("bump2d", dir.path());

    // concatenation is undefined for the replicated multi-conditioning task
    run_err(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "concat", "--L", "2", "--n", "2", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(dir.path().join("cc")),
    );

    let out_dir = dir.path().join("rrr3");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args([
                "--method", "rrr", "--L", "3", "--w", "4", "--n", "3", "--base-ckpt",
            ])
            .arg(&base)
            .arg("--out")
            .arg(&out_dir),
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&out_dir.join("manifest.json"))).unwrap();
    assert_eq!(manifest["method"], "rrr");
    assert_eq!(manifest["l"], 3);
    assert_eq!(manifest["guidance_w"], 4.0);
    assert_eq!(manifest["sample_seeds"].as_array().unwrap().len(), 3);
    let conds = manifest["conditionings"].as_array().unwrap();
    assert_eq!(conds.len(), 3);
    assert!(conds.iter().all(|c| c.as_array().unwrap().len() == 3));
    // graymap files exist for the image task
    assert!(out_dir.join("sample_0000.pgm").exists());
}

#[test]
fn identical_seeds_share_initial_noise_across_methods() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, coord) = train_tiny("bump2d", dir.path());
    // with a pass-through-ish coordinator the trajectories differ, but the
    // first sampling step sees the same prior draw; easiest check: w=0
    // guidance dde equals multidiffusion under the same seed at L=1
    let d1 = dir.path().join("dde_w0");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args([
                "--method", "dde", "--L", "1", "--w", "0", "--n", "2", "--base-ckpt",
            ])
            .arg(&base)
            .arg("--coord-ckpt")
            .arg(&coord)
            .arg("--out")
            .arg(&d1),
    );
    let d2 = dir.path().join("md_l1");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "multidiffusion", "--L", "1", "--n", "2", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(&d2),
    );
    // same conditioning sets and same per-sample seeds
    let m1: serde_json::Value = serde_json::from_slice(&read(&d1.join("manifest.json"))).unwrap();
    let m2: serde_json::Value = serde_json::from_slice(&read(&d2.join("manifest.json"))).unwrap();
    assert_eq!(m1["sample_seeds"], m2["sample_seeds"]);
    assert_eq!(m1["conditionings"], m2["conditionings"]);
}

#[test]
fn eval_rerun_is_bitwise_identical_and_checkpoints_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, coord) = train_tiny("gaussian-oracle", dir.path());
    let base_bytes = read(&base);
    let coord_bytes = read(&coord);

    let s = dir.path().join("s");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args(["--method", "dde", "--L", "3", "--n", "4", "--base-ckpt"])
            .arg(&base)
            .arg("--coord-ckpt")
            .arg(&coord)
            .arg("--out")
            .arg(&s),
    );
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    run_ok(
        quilt()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--samples")
            .arg(&s)
            .arg("--out")
            .arg(&e1),
    );
    run_ok(
        quilt()
            .args(["eval", "--config"])
            .arg(&cfg)
            .arg("--samples")
            .arg(&s)
            .arg("--out")
            .arg(&e2),
    );
    assert_eq!(read(&e1.join("metrics.csv")), read(&e2.join("metrics.csv")));

    // no stage mutated the checkpoints it read
    assert_eq!(base_bytes, read(&base));
    assert_eq!(coord_bytes, read(&coord));
}

#[test]
fn sample_reruns_identically_from_its_config_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, _) = train_tiny("gaussian-oracle", dir.path());
    let s1 = dir.path().join("s1");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(&cfg)
            .args([
                "--method",
                "multidiffusion",
                "--L",
                "3",
                "--n",
                "3",
                "--steps",
                "5",
                "--base-ckpt",
            ])
            .arg(&base)
            .arg("--out")
            .arg(&s1),
    );
    // rerun from the snapshot (which captured the --steps override), with
    // no extra flags
    let s2 = dir.path().join("s2");
    run_ok(
        quilt()
            .args(["sample", "--config"])
            .arg(s1.join("config.toml"))
            .args(["--method", "multidiffusion", "--L", "3", "--n", "3", "--base-ckpt"])
            .arg(&base)
            .arg("--out")
            .arg(&s2),
    );
    assert_eq!(read(&s1.join("samples.csv")), read(&s2.join("samples.csv")));
}

#[test]
fn compare_joins_rows_sorted_by_l() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, base, _) = train_tiny("gaussian-oracle", dir.path());
    let mut eval_dirs = Vec::new();
    for l in [3usize, 2] {
        let s = dir.path().join(format!("s{l}"));
        run_ok(
            quilt()
                .args(["sample", "--config"])
                .arg(&cfg)
                .args(["--method", "multidiffusion", "--n", "3", "--base-ckpt"])
                .arg(&base)
                .args(["--L", &l.to_string()])
                .arg("--out")
                .arg(&s),
        );
        let e = dir.path().join(format!("e{l}"));
        run_ok(
            quilt()
                .args(["eval", "--config"])
                .arg(&cfg)
                .arg("--samples")
                .arg(&s)
                .arg("--out")
                .arg(&e),
        );
        eval_dirs.push(e);
    }
    let cmp = dir.path().join("cmp");
    run_ok(
        quilt()
            .arg("compare")
            .arg("--inputs")
            .arg(&eval_dirs[0])
            .arg("--inputs")
            .arg(&eval_dirs[1])
            .arg("--out")
            .arg(&cmp),
    );
    let text = String::from_utf8(read(&cmp.join("compare.csv"))).unwrap();
    let ls: Vec<usize> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mut sorted = ls.clone();
    sorted.sort_unstable();
    assert_eq!(ls, sorted, "rows must be sorted by L");
    assert!(ls.contains(&2) && ls.contains(&3));
}

#[test]
fn output_root_env_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config("gaussian-oracle", dir.path());
    run_ok(
        quilt()
            .env("QUILT_OUT", dir.path())
            .args(["train-base", "--config"])
            .arg(&cfg)
            .args(["--out", "nested/run"]),
    );
    assert!(dir.path().join("nested/run/base.ckpt").exists());
}
