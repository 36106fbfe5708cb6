use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use flat_core::data::{generate_synthetic, load_image_folder, sample_k_shot, save_image_folder, ImageDataset, SplitSpec};
use flat_core::data::folder::SPLIT_SPEC_FILE;
use flat_core::evaluation::{evaluate_setting, pixel_nearest_neighbor_accuracy, run_episodes, EvalReport};
use flat_core::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FlatModel};
use flat_core::seed::{self, tag};
use flat_core::training::{finetune, pretrain_with, EpochMetrics, TrainState};
use flat_core::{Exec, FlatError, Result};
use serde_json::json;

use crate::config::{ProtocolKind, RunConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FlatError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FlatError::io(path, e))
}

fn dataset(cfg: &RunConfig) -> Result<ImageDataset> {
    let enc = &cfg.model.encoder;
    let d = match &cfg.data.dir {
        Some(dir) => {
            let spec = SplitSpec::read(dir.join(SPLIT_SPEC_FILE))?;
            load_image_folder(dir, &spec, enc.input_channels, enc.input_size)?
        }
        None => generate_synthetic(&cfg.data.synthetic)?,
    };
    let want = [enc.input_channels, enc.input_size, enc.input_size];
    if d.geometry() != want {
        return Err(FlatError::config(
            "model.encoder.input_size",
            format!("the encoder expects {want:?} images, the dataset has {:?}", d.geometry()),
        ));
    }
    Ok(d)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| FlatError::config("checkpoint", "this command needs --checkpoint DIR"))
}

fn emit(metrics: &EpochMetrics, log: &mut File, path: &Path) -> Result<()> {
    let line = serde_json::to_string(metrics).expect("metrics serialize");
    println!("{line}");
    writeln!(log, "{line}").map_err(|e| FlatError::io(path, e))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let syn = &cfg.data.synthetic;
    let d = generate_synthetic(syn)?;
    save_image_folder(&d, &cfg.out, syn.test_fraction)?;
    let n_way = d.n_novel().min(5);
    let n_query = (syn.examples_per_class - 1).min(15);
    let nn = pixel_nearest_neighbor_accuracy(&d, n_way, n_query, 200, syn.seed)?;
    let info = json!({
        "images": d.len(),
        "base_classes": d.n_base(),
        "novel_classes": d.n_novel(),
        "geometry": d.geometry(),
        "seed": syn.seed,
        "pixel_nn_accuracy": { "n_way": n_way, "k_shot": 1, "n_query": n_query, "episodes": 200, "mean": nn },
    });
    let text = serde_json::to_string_pretty(&info).expect("info serializes");
    write_file(&cfg.out.join("dataset_info.json"), &text)?;
    println!("{}", serde_json::to_string(&info).expect("info serializes"));
    Ok(())
}

fn pretrain_meta(state: &TrainState) -> CheckpointMeta {
    CheckpointMeta {
        seed: state.seed,
        epoch: state.epoch,
        extra: json!({
            "stage": "pretrain",
            "step": state.step,
            "best_epoch": state.best.map(|b| b.0),
            "best_value": state.best.map(|b| b.1),
        }),
    }
}

fn state_from(ck: &Checkpoint) -> Result<TrainState> {
    let opt = ck.optimizer.clone().ok_or_else(|| FlatError::State("the checkpoint carries no optimizer state".into()))?;
    let extra = &ck.meta.extra;
    let best = match (extra["best_epoch"].as_u64(), extra["best_value"].as_f64()) {
        (Some(e), Some(v)) => Some((e as usize, v)),
        _ => None,
    };
    Ok(TrainState {
        epoch: ck.meta.epoch,
        step: extra["step"].as_u64().unwrap_or(0) as usize,
        seed: ck.meta.seed,
        optimizer: opt,
        last: Default::default(),
        best,
    })
}

/// Resuming must not silently change the run: everything but the epoch
/// budget has to match the configuration the run started with.
fn check_resume_config(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out.join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| FlatError::io(&path, e))?;
    let saved: RunConfig =
        serde_json::from_str(&text).map_err(|e| FlatError::config("resume", format!("{}: {e}", path.display())))?;
    let mut a = saved.pretrain.clone();
    a.epochs = cfg.pretrain.epochs;
    if a != cfg.pretrain || saved.model != cfg.model || saved.data != cfg.data {
        return Err(FlatError::config("resume", format!("the configuration differs from the one in {}", path.display())));
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, resume: bool, exec: Exec) -> Result<()> {
    cfg.pretrain.validate()?;
    cfg.model.encoder.validate()?;
    let data = dataset(cfg)?;
    create_dir(&cfg.out)?;
    let last_dir = cfg.out.join("last");
    let (mut model, mut state) = if resume {
        check_resume_config(cfg)?;
        let ck = load_checkpoint(&last_dir)?;
        let state = state_from(&ck)?;
        (ck.model, state)
    } else {
        (FlatModel::new(cfg.model.clone(), data.n_base(), cfg.pretrain.seed)?, TrainState::new(&cfg.pretrain)?)
    };
    write_file(&cfg.out.join(RESOLVED_CONFIG), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let metrics_path = cfg.out.join(METRICS);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&metrics_path)
        .map_err(|e| FlatError::io(&metrics_path, e))?;
    let best_dir = cfg.out.join("best");
    pretrain_with(&mut model, &data, &cfg.pretrain, &mut state, exec, |m, model, state, better| {
        let meta = pretrain_meta(state);
        save_checkpoint(model, Some(&state.optimizer), &meta, &last_dir)?;
        if better {
            save_checkpoint(model, Some(&state.optimizer), &meta, &best_dir)?;
        }
        emit(m, &mut log, &metrics_path)
    })?;
    save_checkpoint(&model, Some(&state.optimizer), &pretrain_meta(&state), cfg.out.join("final"))
}

pub fn finetune_cmd(cfg: &RunConfig, exec: Exec) -> Result<()> {
    cfg.finetune.validate()?;
    let ck = load_checkpoint(checkpoint_path(cfg)?)?;
    let data = dataset(cfg)?;
    if let Some(n) = ck.model.n_base() {
        if n != data.n_base() {
            return Err(FlatError::Data(format!("checkpoint has {n} base rows, the dataset {} base classes", data.n_base())));
        }
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(RESOLVED_CONFIG), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let ft = &cfg.finetune;
    let shots = sample_k_shot(&data, ft.k_shot, &mut seed::stream(ft.seed, &[tag::FINETUNE, tag::SUPPORT]))?;
    let mut model = ck.model;
    let metrics = finetune(&mut model, &data, &shots.support, ft, exec)?;
    let metrics_path = cfg.out.join(METRICS);
    let mut log = File::create(&metrics_path).map_err(|e| FlatError::io(&metrics_path, e))?;
    for m in &metrics {
        emit(m, &mut log, &metrics_path)?;
    }
    let meta = CheckpointMeta {
        seed: ft.seed,
        epoch: ft.epochs,
        extra: json!({ "stage": "finetune", "setting": ft.setting, "k_shot": ft.k_shot, "support": shots.support }),
    };
    save_checkpoint(&model, None, &meta, cfg.out.join("model"))
}

pub fn evaluate(cfg: &RunConfig, exec: Exec) -> Result<EvalReport> {
    let ck_path: PathBuf = checkpoint_path(cfg)?.to_path_buf();
    let setting = match cfg.protocol.kind {
        ProtocolKind::Setting => Some(cfg.protocol.setting.ok_or_else(|| {
            FlatError::config("protocol.setting", "required when protocol.kind is `setting` (use --setting)")
        })?),
        ProtocolKind::Episodic => None,
    };
    let ck = load_checkpoint(&ck_path)?;
    let data = dataset(cfg)?;
    let report = match setting {
        None => run_episodes(&ck.model, &data, &cfg.protocol.episodes, exec)?,
        Some(s) => {
            let k = ck.meta.extra["k_shot"].as_u64().map_or(cfg.finetune.k_shot, |k| k as usize);
            evaluate_setting(&ck.model, &data, s, k)?
        }
    };
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(RESOLVED_CONFIG), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&cfg.out.join(REPORT), &text)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(report)
}
