use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tsfp_core::io::read_dataset;

const TINY: &str = r#"
[data]
length = 128
n_train = 12
n_val = 6
n_test = 6
motif_len_min = 10
motif_len_max = 16

[model]
patch_size = 16
k = 2
d = 8
n_heads = 2
encoder_layers = 1
decoder_layers = 1
ffn_ratio = 2

[train]
max_epochs = 2
finetune_max_epochs = 2
batch_size = 4
"#;

fn tsfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsfp")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        p(&self.path("tiny.toml")).to_string()
    }

    fn generate(&self, out: &str) -> Output {
        tsfp(&["generate-data", "--config", &self.config(), "--out", p(&self.path(out))])
    }
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(code(&tsfp(&["--help"])), 0);
    assert_eq!(code(&tsfp(&["pretrain", "--bogus"])), 1);
    assert_eq!(code(&tsfp(&["finetune", "--out", "x", "--data", "y", "--mode", "nope"])), 1);
}

#[test]
fn default_config_lists_every_section() {
    let out = tsfp(&["default-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for section in ["[data]", "[model]", "[objective]", "[train]", "mask_ratio", "lambda", "patch_size"] {
        assert!(text.contains(section), "missing {section}");
    }
}

#[test]
fn generate_data_is_balanced_reproducible_and_idempotent() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.generate("a")), 0);
    for (split, n) in [("train", 12), ("val", 6), ("test", 6)] {
        let file = read_dataset(&ws.path("a").join(format!("{split}.tsfp"))).unwrap();
        assert_eq!(file.samples.len(), n);
        for c in 0..3 {
            assert_eq!(file.samples.iter().filter(|s| s.label == Some(c)).count(), n / 3);
        }
    }
    let manifest = fs::read(ws.path("a/manifest.json")).unwrap();
    let again = ws.generate("a");
    assert_eq!(code(&again), 0);
    assert!(stderr(&again).contains("up to date"));
    assert_eq!(fs::read(ws.path("a/manifest.json")).unwrap(), manifest);

    assert_eq!(code(&ws.generate("b")), 0);
    for split in ["train", "val", "test"] {
        let name = format!("{split}.tsfp");
        assert_eq!(fs::read(ws.path("a").join(&name)).unwrap(), fs::read(ws.path("b").join(&name)).unwrap());
    }

    let other_seed = tsfp(&["generate-data", "--config", &ws.config(), "--seed", "9", "--out", p(&ws.path("a"))]);
    assert_eq!(code(&other_seed), 1, "{}", stderr(&other_seed));
    let forced = tsfp(&["generate-data", "--config", &ws.config(), "--seed", "9", "--out", p(&ws.path("a")), "--force"]);
    assert_eq!(code(&forced), 0);
    assert_ne!(fs::read(ws.path("a/train.tsfp")).unwrap(), fs::read(ws.path("b/train.tsfp")).unwrap());
}

#[test]
fn malformed_config_leaves_no_files() {
    let ws = Workspace::new();
    for (name, text) in [
        ("typo.toml", "[model]\ndd = 4\n"),
        ("invalid.toml", "[model]\nd = 6\nn_heads = 4\n"),
        ("syntax.toml", "[model\n"),
    ] {
        fs::write(ws.path(name), text).unwrap();
        let out = tsfp(&["generate-data", "--config", p(&ws.path(name)), "--out", p(&ws.path("never"))]);
        assert_eq!(code(&out), 1, "{name}: {}", stderr(&out));
        assert!(!ws.path("never").exists());
    }
    let out = tsfp(&["generate-data", "--config", p(&ws.path("invalid.toml")), "--out", p(&ws.path("never"))]);
    assert!(stderr(&out).contains("n_heads"), "{}", stderr(&out));
}

#[test]
fn train_evaluate_and_probe_pipeline() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.generate("data")), 0);
    let data = ws.path("data");
    let cfg = ws.config();

    let scratch_pretrain = tsfp(&["pretrain", "--config", &cfg, "--data", p(&data), "--mode", "scratch", "--out", p(&ws.path("x"))]);
    assert_eq!(code(&scratch_pretrain), 1);

    let pre = tsfp(&["pretrain", "--config", &cfg, "--data", p(&data), "--mode", "rec_div", "--out", p(&ws.path("pre"))]);
    assert_eq!(code(&pre), 0, "{}", stderr(&pre));
    let curve = fs::read_to_string(ws.path("pre/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let missing = tsfp(&["finetune", "--config", &cfg, "--data", p(&data), "--mode", "rec", "--out", p(&ws.path("ft"))]);
    assert_eq!(code(&missing), 1);
    let wrong_mode = tsfp(&[
        "finetune", "--config", &cfg, "--data", p(&data), "--mode", "rec", "--checkpoint", p(&ws.path("pre")), "--out",
        p(&ws.path("ft")),
    ]);
    assert_eq!(code(&wrong_mode), 1, "{}", stderr(&wrong_mode));
    assert!(!ws.path("ft").exists());

    let ft = tsfp(&[
        "finetune", "--config", &cfg, "--data", p(&data), "--mode", "rec_div", "--checkpoint", p(&ws.path("pre")), "--out",
        p(&ws.path("ft")),
    ]);
    assert_eq!(code(&ft), 0, "{}", stderr(&ft));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("ft/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n"], 6);

    let scratch = tsfp(&["finetune", "--config", &cfg, "--data", p(&data), "--mode", "scratch", "--labels-per-class", "2", "--out", p(&ws.path("scratch"))]);
    assert_eq!(code(&scratch), 0, "{}", stderr(&scratch));

    let ev = tsfp(&["evaluate", "--model", p(&ws.path("ft")), "--data", p(&data), "--out", p(&ws.path("ev"))]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    assert_eq!(fs::read(ws.path("ev/metrics.json")).unwrap(), fs::read(ws.path("ft/metrics.json")).unwrap());

    let probe = tsfp(&["probe", "--model", p(&ws.path("ft")), "--data", p(&data), "--out", p(&ws.path("probe"))]);
    assert_eq!(code(&probe), 0, "{}", stderr(&probe));
    let alpha = fs::read_to_string(ws.path("probe/alpha.csv")).unwrap();
    let rows: Vec<&str> = alpha.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let sum: f64 = row.split(',').skip(3).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let attention = fs::read_to_string(ws.path("probe/attention.csv")).unwrap();
    assert_eq!(attention.lines().count(), 1 + 6 * 2 * 8);
    let summary = fs::read_to_string(ws.path("probe/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.starts_with("class,n,argmax_token"));
}

#[test]
fn verify_theory_writes_six_verdicts_and_canary_fails() {
    let ws = Workspace::new();
    let out = tsfp(&["verify-theory", "--seed", "3", "--out", p(&ws.path("theory"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bundle: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("theory/theory.json")).unwrap()).unwrap();
    let verdicts = bundle["verdicts"].as_array().unwrap();
    assert_eq!(verdicts.len(), 6);
    assert!(verdicts.iter().all(|v| v["passes"] == true));
    assert_eq!(bundle["all_pass"], true);

    let canary = tsfp(&["verify-theory", "--seed", "3", "--canary", "--out", p(&ws.path("canary"))]);
    assert_eq!(code(&canary), 3);
    let bundle: serde_json::Value = serde_json::from_slice(&fs::read(ws.path("canary/theory.json")).unwrap()).unwrap();
    assert_eq!(bundle["verdicts"][0]["name"], "hadamard");
    assert_eq!(bundle["verdicts"][0]["passes"], false);
    // cached failures keep their exit code
    assert_eq!(code(&tsfp(&["verify-theory", "--seed", "3", "--canary", "--out", p(&ws.path("canary"))])), 3);
}
