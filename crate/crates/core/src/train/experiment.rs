//! End-to-end experiment runs: data, split, model, training, report, checkpoint.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::ExperimentConfig;
use super::dataset::{load_records, samples_for, split_records, PairRecord, Sample};
use super::trainer::{evaluate, train, History, TrainOptions};
use crate::backbone::archive::load_archive;
use crate::catalog::DatasetSplit;
use crate::error::{Error, Result};
use crate::eval::{metrics_for, write_reports, MetricsReport};
use crate::fusion::ModelSpec;
use crate::nn::ParamStore;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const SPLIT_FILE: &str = "split.json";

pub struct ExperimentResult {
    pub report: MetricsReport,
    pub history: History,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

/// Records, split and per-part samples for a configuration.
pub struct PreparedData {
    pub records: Vec<PairRecord>,
    pub split: DatasetSplit,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let records = load_records(cfg)?;
    if records.is_empty() {
        return Err(Error::Invalid("no labeled pairs to train on".into()));
    }
    let split = split_records(&records, cfg.ratio()?, cfg.seed)?;
    let train = samples_for(cfg.experiment, &records, &split.train_ids);
    let val = samples_for(cfg.experiment, &records, &split.val_ids);
    Ok(PreparedData {
        records,
        split,
        train,
        val,
    })
}

/// Fresh parameters for `cfg`, with pretrained backbone weights installed and
/// backbones frozen as configured.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<(ModelSpec, ParamStore<f32>)> {
    let spec = cfg.model_spec();
    let mut store = spec.init_params::<f32>(cfg.seed)?;
    if let Some(w) = &cfg.backbone.weights {
        let archive = load_archive::<f32>(cfg.resolve(w))?;
        let report = spec.install_backbone(&mut store, &archive)?;
        if !report.unused.is_empty() {
            log::warn!("{} unused tensors in backbone archive", report.unused.len());
        }
    }
    if cfg.freeze_backbone() {
        let n = spec.freeze_backbones(&mut store);
        log::info!("froze {n} backbone tensors");
    }
    Ok((spec, store))
}

/// Train `cfg` and write the log, metrics report, split and best checkpoint to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = prepare_data(cfg)?;
    let split_path = out.join(SPLIT_FILE);
    std::fs::write(&split_path, serde_json::to_string_pretty(&data.split)? + "\n")
        .map_err(|e| Error::io(&split_path, e))?;
    let (spec, store) = initial_params(cfg)?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let opts = TrainOptions::from_config(cfg);
    let outcome = train(&spec, store, &data.records, &data.train, &data.val, &opts, Some(&mut log))?;
    drop(log);
    let ckpt = out.join(CHECKPOINT_DIR);
    save_checkpoint(&ckpt, cfg, outcome.best_epoch, &outcome.best_metrics, &outcome.best)?;
    let metrics_path = out.join(METRICS_FILE);
    let f = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    write_reports(f, std::slice::from_ref(&outcome.best_metrics))?;
    Ok(ExperimentResult {
        report: outcome.best_metrics,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        checkpoint: ckpt.clone(),
        artifacts: vec![split_path, log_path, metrics_path, ckpt],
    })
}

/// Score a checkpoint on the records whose ids are in `ids`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, records: &[PairRecord], ids: &[String]) -> Result<MetricsReport> {
    let cfg = &ckpt.meta.config;
    let samples = samples_for(cfg.experiment, records, ids);
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    let m = evaluate(&ckpt.spec, &ckpt.params, records, &samples, &cfg.transform, cfg.batch_size)?;
    let mut report = metrics_for(&m)?;
    report.model = cfg.model_name();
    report.config_hash = ckpt.meta.config_hash.clone();
    report.alpha = ckpt.spec.alpha(&ckpt.params);
    Ok(report)
}
