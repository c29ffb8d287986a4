//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use svdamage::annotation::{AnnotationService, PairInfo};
use svdamage::catalog::{self, split::parse_ratio, split_dataset, DatasetSplit};
use svdamage::data::{preprocess, SyntheticDatasetSpec};
use svdamage::eval::{read_reports, render_table, write_reports, MetricsReport};
use svdamage::gradcam::{export, export_stem, grad_cam, HeatmapConfig};
use svdamage::train::dataset::{load_records, read_labels, split_records};
use svdamage::train::experiment::METRICS_FILE;
use svdamage::train::{
    evaluate_checkpoint, export_synthetic, find_record, load_checkpoint, run_experiment, ExperimentConfig,
};
use svdamage::{DamageLabel, Error, Result};

use crate::manifest::RunManifest;
use crate::{Command, Corpus, Part};

fn emit(manifest: &mut RunManifest, path: PathBuf) {
    println!("{}", path.display());
    manifest.outputs.push(path);
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn dispatch(cmd: &Command, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    match cmd {
        Command::Ingest { manifest: input } => ingest(input, dir, manifest),
        Command::Pair { catalog, max_distance } => pair(catalog, *max_distance, dir, manifest),
        Command::Split {
            labels,
            pairs,
            ratio,
            seed,
        } => split(labels, pairs.as_deref(), ratio, *seed, dir, manifest),
        Command::Synth { count, spec, seed } => synth(*count, spec.as_deref(), *seed, dir, manifest),
        Command::Train { config } => train(config, dir, manifest),
        Command::Eval {
            checkpoint,
            split,
            part,
        } => eval(checkpoint, split.as_deref(), *part, dir, manifest),
        Command::Gradcam {
            checkpoint,
            pair_id,
            class,
            layer,
            alpha,
            colormap,
        } => {
            let cfg = HeatmapConfig {
                target_layer: layer.clone(),
                target_class: *class,
                alpha: *alpha,
                colormap: *colormap,
            };
            gradcam(checkpoint, pair_id, &cfg, dir, manifest)
        }
        Command::AnnotateServe {
            port,
            host,
            label_log,
            corpus,
            static_dir,
        } => annotate_serve(
            std::net::SocketAddr::new(*host, *port),
            label_log,
            corpus,
            static_dir.clone(),
            dir,
            manifest,
        ),
        Command::AnnotateExport { label_log, corpus } => annotate_export(label_log, corpus, dir, manifest),
        Command::Report { inputs } => report(inputs, dir, manifest),
    }
}

fn ingest(input: &Path, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (cat, rejected) = catalog::load_catalog(input)?;
    let out = dir.join("catalog.csv");
    let mut w = create(&out)?;
    catalog::write_catalog(&mut w, cat.images())?;
    finish(w, &out)?;
    let rej = dir.join("rejections.txt");
    let text: String = rejected.iter().map(|r| format!("{r}\n")).collect();
    write_text(&rej, &text)?;
    let (pre, post) = cat.counts();
    eprintln!(
        "{} images ({pre} pre, {post} post), {} rows rejected",
        cat.len(),
        rejected.len()
    );
    emit(manifest, out);
    emit(manifest, rej);
    Ok(())
}

fn pair(input: &Path, max_distance: f64, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let (cat, rejected) = catalog::load_catalog(input)?;
    for r in &rejected {
        log::warn!("{r}");
    }
    let (pairs, report) = catalog::pair_images(&cat, max_distance)?;
    let out = dir.join("pairs.jsonl");
    let mut w = create(&out)?;
    catalog::write_pairs(&mut w, &pairs)?;
    finish(w, &out)?;
    let rep = dir.join("pairing_report.txt");
    write_text(&rep, &report.render(pairs.len()))?;
    eprintln!(
        "{} pairs, {} posts discarded beyond {max_distance} m",
        pairs.len(),
        report.discarded.len()
    );
    emit(manifest, out);
    emit(manifest, rep);
    Ok(())
}

fn split(
    labels: &Path,
    pairs: Option<&Path>,
    ratio: &str,
    seed: u64,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    manifest.seed = Some(seed);
    let ratio = parse_ratio(ratio)?;
    let mut labels = read_labels(open(labels)?)?;
    if let Some(p) = pairs {
        let listed: std::collections::BTreeSet<String> =
            catalog::read_pairs(open(p)?)?.into_iter().map(|p| p.pair_id).collect();
        let before = labels.len();
        labels.retain(|id, _| listed.contains(id));
        if labels.len() < before {
            log::warn!("{} labeled pairs are not in the pair list", before - labels.len());
        }
    }
    let items: Vec<(String, DamageLabel)> = labels.into_iter().collect();
    let (split, warnings) = split_dataset(&items, ratio, seed)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let out = dir.join("split.json");
    write_text(&out, &(serde_json::to_string_pretty(&split)? + "\n"))?;
    eprintln!("{} train, {} val", split.train_ids.len(), split.val_ids.len());
    emit(manifest, out);
    Ok(())
}

fn synth(count: usize, spec: Option<&Path>, seed: u64, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    manifest.seed = Some(seed);
    if count == 0 {
        return Err(Error::Invalid("count must be positive".into()));
    }
    let spec: SyntheticDatasetSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text)?
        }
        None => SyntheticDatasetSpec::default(),
    };
    let used = dir.join("synth_spec.json");
    write_text(&used, &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    let ex = export_synthetic(&spec, seed, count, dir)?;
    eprintln!("{} synthetic pairs", ex.count);
    for p in [used, ex.manifest, ex.pairs, ex.labels, ex.images, ex.masks] {
        emit(manifest, p);
    }
    Ok(())
}

fn train(config: &Path, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    manifest.config_hash = Some(cfg.hash());
    manifest.seed = Some(cfg.seed);
    let result = run_experiment(&cfg, dir)?;
    eprint!("{}", render_table(std::slice::from_ref(&result.report)));
    eprintln!("best epoch {}", result.best_epoch);
    for p in result.artifacts {
        emit(manifest, p);
    }
    Ok(())
}

fn eval(checkpoint: &Path, split: Option<&Path>, part: Part, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = &ckpt.meta.config;
    manifest.config_hash = Some(ckpt.meta.config_hash.clone());
    manifest.seed = Some(cfg.seed);
    let records = load_records(cfg)?;
    let split: DatasetSplit = match split {
        Some(p) => serde_json::from_reader(open(p)?)?,
        None => split_records(&records, cfg.ratio()?, cfg.seed)?,
    };
    let ids = match part {
        Part::Train => split.train_ids,
        Part::Val => split.val_ids,
        Part::All => records.iter().map(|r| r.pair_id.clone()).collect(),
    };
    let report = evaluate_checkpoint(&ckpt, &records, &ids)?;
    let out = dir.join(METRICS_FILE);
    let mut w = create(&out)?;
    write_reports(&mut w, std::slice::from_ref(&report))?;
    finish(w, &out)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    emit(manifest, out);
    Ok(())
}

fn gradcam(checkpoint: &Path, pair_id: &str, cfg: &HeatmapConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::Invalid(format!("alpha {} is outside [0, 1]", cfg.alpha)));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let exp = &ckpt.meta.config;
    manifest.config_hash = Some(ckpt.meta.config_hash.clone());
    manifest.seed = Some(exp.seed);
    let record = find_record(exp, pair_id)?;
    let pre = if ckpt.spec.needs_pre() {
        Some(preprocess(&record.pre, &exp.transform)?)
    } else {
        None
    };
    let post = preprocess(&record.post, &exp.transform)?;
    let heatmap = grad_cam(&ckpt.spec, &ckpt.params, pre.as_ref(), &post, cfg)?;
    let class = DamageLabel::from_index(heatmap.class)
        .map(|l| l.name().to_string())
        .unwrap_or_else(|| heatmap.class.to_string());
    let model = match exp.model {
        Some(m) => m.name().to_string(),
        None => exp.model_name().to_lowercase(),
    };
    let stem = export_stem(pair_id, &model, &class);
    let (png, pfm) = export(dir, &stem, &record.pre, &record.post, &heatmap, cfg)?;
    eprintln!("layer {}, class {class}, true label {}", heatmap.layer, record.label);
    if let Some(mask) = &record.mask {
        if let Ok((inside, outside)) = heatmap.mask_means(mask) {
            eprintln!("heatmap mean inside mask {inside:.4}, outside {outside:.4}");
        }
    }
    emit(manifest, png);
    emit(manifest, pfm);
    Ok(())
}

fn open_service(label_log: &Path, corpus: &Corpus) -> Result<AnnotationService> {
    let (cat, rejected) = catalog::load_catalog(&corpus.catalog)?;
    for r in &rejected {
        log::warn!("{r}");
    }
    let pairs = catalog::read_pairs(open(&corpus.pairs)?)?;
    let infos = PairInfo::from_catalog(&pairs, &cat)?;
    if corpus.annotators.iter().any(|a| a.trim().is_empty()) {
        return Err(Error::Invalid("annotator ids must be non-empty".into()));
    }
    AnnotationService::open(infos, &corpus.annotators, &corpus.adjudicators, label_log)
}

fn annotate_serve(
    addr: std::net::SocketAddr,
    label_log: &Path,
    corpus: &Corpus,
    static_dir: Option<PathBuf>,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let svc = Arc::new(open_service(label_log, corpus)?);
    emit(manifest, label_log.to_path_buf());
    // Written now as well, since the server normally ends by signal.
    manifest.write(dir)?;
    crate::serve::serve(svc, static_dir, addr, |bound| {
        println!("listening on http://{bound}");
        let _ = std::io::stdout().flush();
    })
}

fn annotate_export(label_log: &Path, corpus: &Corpus, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    if !label_log.exists() {
        return Err(Error::Invalid(format!("label log {} does not exist", label_log.display())));
    }
    let svc = open_service(label_log, corpus)?;
    let out = dir.join("labels.csv");
    let mut w = create(&out)?;
    let summary = svc.export_labels(&mut w)?;
    finish(w, &out)?;
    let sum = dir.join("export_summary.json");
    write_text(&sum, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    eprintln!(
        "{} pairs exported, {} in conflict, {} unlabeled",
        summary.exported, summary.conflicts, summary.unlabeled
    );
    emit(manifest, out);
    emit(manifest, sum);
    Ok(())
}

/// Metrics files named directly, or `metrics.jsonl` inside run directories.
fn report(inputs: &[PathBuf], dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut reports: Vec<MetricsReport> = Vec::new();
    for input in inputs {
        let file = if input.is_dir() { input.join(METRICS_FILE) } else { input.clone() };
        if !file.exists() {
            return Err(Error::Invalid(format!("no metrics file at {}", file.display())));
        }
        reports.extend(read_reports(open(&file)?)?);
    }
    let table = render_table(&reports);
    let out = dir.join("report.txt");
    write_text(&out, &table)?;
    print!("{table}");
    emit(manifest, out);
    Ok(())
}
