use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use tsfp_core::io::{self, format_f64, load_checkpoint, read_dataset, save_checkpoint, write_atomic, DataFile};
use tsfp_core::model::Model;
use tsfp_core::synthetic::{generate_dataset, TimeSeriesSample};
use tsfp_core::theory;
use tsfp_core::training::{
    derive_seed, disentanglement_probe, evaluate, finetune, label_scarce_subset, pretrain, streams, AblationMode,
    UnlabeledSet,
};

use crate::config::RunConfig;
use crate::manifest::{check_out_dir, read_manifest, Freshness, RunKey};
use crate::CliError;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const THEORY_FAILED: i32 = 3;

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsfp"))
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_json(out: &Path, name: &str, value: &impl Serialize) -> Result<String, CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(runtime)?;
    write_atomic(&out.join(name), &bytes).map_err(runtime)?;
    Ok(name.to_string())
}

fn write_text(out: &Path, name: &str, text: &str) -> Result<String, CliError> {
    write_atomic(&out.join(name), text.as_bytes()).map_err(runtime)?;
    Ok(name.to_string())
}

/// Output of a command body: artifacts written and the exit code to report.
struct Done {
    artifacts: Vec<String>,
    exit_code: i32,
}

impl Done {
    fn ok(artifacts: Vec<String>) -> Self {
        Self { artifacts, exit_code: 0 }
    }
}

/// Skips the body when `out` already holds this run; otherwise runs it and
/// writes the resolved config and the manifest.
fn execute(out: &Path, key: RunKey, force: bool, body: impl FnOnce(&Path) -> Result<Done, CliError>) -> Result<i32, CliError> {
    if check_out_dir(out, &key, force)? == Freshness::UpToDate {
        let previous = read_manifest(out)?;
        eprintln!("{}: up to date ({}), nothing to do", out.display(), &previous.input_hash[..12]);
        return Ok(previous.exit_code);
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    let started = crate::manifest::now();
    let mut done = body(out)?;
    done.artifacts.push(write_text(out, "config.toml", &key.config.to_toml())?);
    let manifest = key.finish(started, done.artifacts, done.exit_code);
    crate::manifest::write_manifest(out, &manifest)?;
    Ok(manifest.exit_code)
}

fn load_split(dir: &Path, split: &str) -> Result<DataFile, CliError> {
    let path = split_path(dir, split);
    read_dataset(&path).map_err(|e| match e {
        io::IoError::Fs { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })
}

pub fn generate_data(cfg: RunConfig, out: &Path, force: bool) -> Result<i32, CliError> {
    let key = RunKey::new("generate-data", &cfg, cfg.data.seed, json!({}), &[])?;
    let data_cfg = cfg.data.clone();
    let n_classes = cfg.model.n_classes;
    execute(out, key, force, |out| {
        let data = generate_dataset(&data_cfg).map_err(runtime)?;
        let mut artifacts = Vec::new();
        for (split, samples) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
            io::write_dataset(&split_path(out, split), samples, n_classes, Some(&data_cfg)).map_err(runtime)?;
            artifacts.push(format!("{split}.tsfp"));
        }
        Ok(Done::ok(artifacts))
    })
}

fn split_inputs(data: &Path, splits: &[&'static str]) -> Vec<(&'static str, PathBuf)> {
    splits.iter().map(|s| (*s, split_path(data, s))).collect()
}

fn check_inputs(inputs: &[(&str, PathBuf)]) -> Result<(), CliError> {
    for (role, path) in inputs {
        if !path.exists() {
            return Err(CliError::Config(format!("missing {role} input {}", path.display())));
        }
    }
    Ok(())
}

pub fn pretrain_cmd(cfg: RunConfig, data: &Path, out: &Path, force: bool) -> Result<i32, CliError> {
    if cfg.train.mode == AblationMode::Scratch {
        return Err(CliError::Config("scratch mode has no pre-training stage".into()));
    }
    let inputs = split_inputs(data, &["train", "val"]);
    check_inputs(&inputs)?;
    let key = RunKey::new("pretrain", &cfg, cfg.train.seed, json!({}), &inputs)?;
    execute(out, key, force, |out| {
        let train = load_split(data, "train")?;
        let val = load_split(data, "val")?;
        let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.train.seed, streams::INIT, 0)).map_err(runtime)?;
        let report = pretrain(
            &mut model,
            &UnlabeledSet::from_samples(&train.samples),
            &UnlabeledSet::from_samples(&val.samples),
            &cfg.objective,
            &cfg.train,
        )
        .map_err(runtime)?;
        save_checkpoint(out, &model, &cfg.objective).map_err(runtime)?;
        let mut csv = String::from("epoch,train_rec,train_div,train_total,val_rec,val_div,val_total\n");
        for e in &report.epochs {
            let cols = [e.train_rec, e.train_div, e.train_total, e.val_rec, e.val_div, e.val_total].map(format_f64);
            csv.push_str(&format!("{},{}\n", e.epoch, cols.join(",")));
        }
        eprintln!(
            "pretrain: {} epochs, best epoch {} (val total {})",
            report.epochs.len(),
            report.best_epoch,
            report.best_val_total
        );
        Ok(Done::ok(vec![
            io::CHECKPOINT_MANIFEST.into(),
            io::CHECKPOINT_BLOB.into(),
            write_json(out, "pretrain_report.json", &report)?,
            write_text(out, "loss_curve.csv", &csv)?,
        ]))
    })
}

pub struct FinetuneArgs {
    pub checkpoint: Option<PathBuf>,
    pub labels_per_class: Option<usize>,
}

pub fn finetune_cmd(mut cfg: RunConfig, data: &Path, out: &Path, args: FinetuneArgs, force: bool) -> Result<i32, CliError> {
    let mut inputs = split_inputs(data, &SPLITS);
    match (cfg.train.mode, &args.checkpoint) {
        (AblationMode::Scratch, Some(_)) => {
            return Err(CliError::Config("scratch mode fine-tunes from random initialization; drop --checkpoint".into()))
        }
        (AblationMode::Scratch, None) => {}
        (mode, None) => {
            return Err(CliError::Config(format!(
                "mode {} needs a pre-trained --checkpoint",
                mode.name()
            )))
        }
        (mode, Some(dir)) => {
            let previous = read_manifest(dir)?;
            if previous.command != "pretrain" || previous.config.train.mode != mode {
                return Err(CliError::Config(format!(
                    "checkpoint in {} comes from {} with mode {}, expected a {} pre-training",
                    dir.display(),
                    previous.command,
                    previous.config.train.mode.name(),
                    mode.name()
                )));
            }
            cfg.model = previous.config.model.clone();
            inputs.push(("checkpoint", dir.join(io::CHECKPOINT_BLOB)));
        }
    }
    check_inputs(&inputs)?;
    let key = RunKey::new(
        "finetune",
        &cfg,
        cfg.train.seed,
        json!({ "labels_per_class": args.labels_per_class }),
        &inputs,
    )?;
    execute(out, key, force, |out| {
        let mut model = match &args.checkpoint {
            Some(dir) => load_checkpoint(dir).map_err(runtime)?.model,
            None => Model::new(cfg.model.clone(), derive_seed(cfg.train.seed, streams::INIT, 0)).map_err(runtime)?,
        };
        let train = load_split(data, "train")?;
        let val = load_split(data, "val")?;
        let test = load_split(data, "test")?;
        let labeled: Vec<TimeSeriesSample> = match args.labels_per_class {
            Some(n) => label_scarce_subset(&train.samples, n, cfg.model.n_classes, cfg.train.seed).map_err(runtime)?,
            None => train.samples,
        };
        let report = finetune(&mut model, &labeled, &val.samples, &cfg.objective, &cfg.train).map_err(runtime)?;
        let metrics = evaluate(&model, &test.samples).map_err(runtime)?;
        save_checkpoint(out, &model, &cfg.objective).map_err(runtime)?;
        let mut csv = String::from("epoch,train_loss,val_accuracy,val_f1\n");
        for e in &report.epochs {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch,
                format_f64(e.train_loss),
                format_f64(e.val.accuracy),
                format_f64(e.val.f1)
            ));
        }
        eprintln!(
            "finetune: best epoch {} (val F1 {}), test accuracy {}, test F1 {}",
            report.best_epoch, report.best_val_f1, metrics.accuracy, metrics.f1
        );
        Ok(Done::ok(vec![
            io::CHECKPOINT_MANIFEST.into(),
            io::CHECKPOINT_BLOB.into(),
            write_json(out, "finetune_report.json", &report)?,
            write_json(out, "metrics.json", &metrics)?,
            write_text(out, "finetune_curve.csv", &csv)?,
        ]))
    })
}

fn model_inputs(model: &Path, data: &Path, split: &'static str) -> Result<(RunConfig, Vec<(&'static str, PathBuf)>), CliError> {
    let previous = read_manifest(model)?;
    let inputs = vec![(split, split_path(data, split)), ("checkpoint", model.join(io::CHECKPOINT_BLOB))];
    check_inputs(&inputs)?;
    Ok((previous.config, inputs))
}

pub fn evaluate_cmd(model_dir: &Path, data: &Path, split: &'static str, out: &Path, force: bool) -> Result<i32, CliError> {
    let (cfg, inputs) = model_inputs(model_dir, data, split)?;
    let key = RunKey::new("evaluate", &cfg, cfg.train.seed, json!({ "split": split }), &inputs)?;
    execute(out, key, force, |out| {
        let model = load_checkpoint(model_dir).map_err(runtime)?.model;
        let samples = load_split(data, split)?.samples;
        let metrics = evaluate(&model, &samples).map_err(runtime)?;
        eprintln!("evaluate: accuracy {}, F1 {}", metrics.accuracy, metrics.f1);
        Ok(Done::ok(vec![write_json(out, "metrics.json", &metrics)?]))
    })
}

pub fn verify_theory(seed: u64, canary: bool, out: &Path, force: bool) -> Result<i32, CliError> {
    let cfg = RunConfig::default();
    let key = RunKey::new("verify-theory", &cfg, seed, json!({ "canary": canary }), &[])?;
    execute(out, key, force, |out| {
        let bundle = theory::run_all(seed, canary).map_err(runtime)?;
        for v in &bundle.verdicts {
            eprintln!("{:<24} {}", v.name, if v.passes { "pass" } else { "FAIL" });
        }
        let artifacts = vec![write_json(out, "theory.json", &bundle)?];
        Ok(Done {
            artifacts,
            exit_code: if bundle.all_pass { 0 } else { THEORY_FAILED },
        })
    })
}

pub fn probe_cmd(model_dir: &Path, data: &Path, split: &'static str, out: &Path, force: bool) -> Result<i32, CliError> {
    let (cfg, inputs) = model_inputs(model_dir, data, split)?;
    let key = RunKey::new("probe", &cfg, cfg.train.seed, json!({ "split": split }), &inputs)?;
    execute(out, key, force, |out| {
        let model = load_checkpoint(model_dir).map_err(runtime)?.model;
        let samples = load_split(data, split)?.samples;
        let report = disentanglement_probe(&model, &samples).map_err(runtime)?;
        let k = report.k;
        let patch = model.config.patch_size;

        let mut alpha = String::from("index,label,predicted");
        for t in 0..k {
            alpha.push_str(&format!(",alpha_{t}"));
        }
        alpha.push('\n');
        let mut attention = String::from("index,label,token,patch,start,end,coverage,weight\n");
        for s in &report.samples {
            let cols: Vec<String> = s.alpha.iter().map(|&a| format_f64(a)).collect();
            alpha.push_str(&format!("{},{},{},{}\n", s.index, s.label, s.predicted, cols.join(",")));
            let len = samples[s.index].len;
            for t in 0..k {
                for (p, w) in s.attention.row(t).iter().enumerate() {
                    let start = p * patch;
                    let end = ((p + 1) * patch).min(len);
                    attention.push_str(&format!(
                        "{},{},{t},{p},{start},{end},{},{}\n",
                        s.index,
                        s.label,
                        format_f64(s.coverage[p]),
                        format_f64(*w)
                    ));
                }
            }
        }
        let mut summary = String::from("class,n,argmax_token,inside_mass,interval_fraction,localizes");
        for t in 0..k {
            summary.push_str(&format!(",mean_alpha_{t}"));
        }
        summary.push('\n');
        for c in &report.classes {
            let opt = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
            let cols: Vec<String> = c.mean_alpha.iter().map(|&a| format_f64(a)).collect();
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.class,
                c.n,
                c.argmax_token,
                opt(c.inside_mass),
                opt(c.interval_fraction),
                c.localizes().map(|b| b.to_string()).unwrap_or_default(),
                cols.join(",")
            ));
        }
        eprintln!(
            "probe: drop/oscillation tokens distinct: {}, localizes: {}",
            report.drop_oscillation_distinct, report.localizes
        );
        let overview = json!({
            "k": k,
            "classes": report.classes,
            "drop_oscillation_distinct": report.drop_oscillation_distinct,
            "localizes": report.localizes,
        });
        Ok(Done::ok(vec![
            write_text(out, "alpha.csv", &alpha)?,
            write_text(out, "attention.csv", &attention)?,
            write_text(out, "summary.csv", &summary)?,
            write_json(out, "probe.json", &overview)?,
        ]))
    })
}
