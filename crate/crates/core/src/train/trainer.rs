//! Mini-batch training with AdamW, cosine annealing and best-epoch selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{assemble, Batch, PairRecord, Sample};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::cosine_lr;
use crate::autograd::{Graph, Var};
use crate::data::TransformConfig;
use crate::error::{Error, Result};
use crate::eval::{metrics_for, ConfusionMatrix, MetricsReport};
use crate::fusion::head::argmax;
use crate::fusion::{FusionStrategy, ModelSpec};
use crate::nn::{Binder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
    pub class_weighting: bool,
    /// Assemble batches on the training thread instead of a prefetch thread.
    pub strict: bool,
    pub transform: TransformConfig,
    /// Stamped into every metrics report.
    pub model_name: String,
    pub config_hash: String,
}

impl TrainOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr_max: cfg.lr_max(),
            lr_min: cfg.lr_min,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            class_weighting: cfg.class_weighting,
            strict: cfg.strict_determinism,
            transform: cfg.transform.clone(),
            model_name: cfg.model_name(),
            config_hash: cfg.hash(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation accuracy.
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_metrics: MetricsReport,
    /// Parameters after the last epoch.
    pub last: ParamStore<f32>,
    pub history: History,
}

/// Final backbone features of each sample, computed once when every backbone
/// parameter is frozen and inputs are not augmented.
struct FeatureCache {
    pre: Option<Vec<Tensor<f32>>>,
    post: Vec<Tensor<f32>>,
}

fn backbones_frozen(spec: &ModelSpec, store: &ParamStore<f32>) -> bool {
    let mut any = false;
    for (name, p) in store.iter() {
        if spec.backbone_prefixes().iter().any(|pre| name.starts_with(pre)) {
            any = true;
            if !p.frozen {
                return false;
            }
        }
    }
    any
}

fn feature_taps(spec: &ModelSpec) -> (Option<&'static str>, &'static str) {
    match spec.strategy() {
        None | Some(FusionStrategy::ChannelConcat) => (None, "main.features"),
        Some(_) => (Some("pre.features"), "post.features"),
    }
}

fn encode(
    spec: &ModelSpec,
    store: &ParamStore<f32>,
    records: &[PairRecord],
    samples: &[Sample],
    transform: &TransformConfig,
    batch_size: usize,
) -> Result<FeatureCache> {
    let (pre_tap, post_tap) = feature_taps(spec);
    let mut cache = FeatureCache {
        pre: pre_tap.map(|_| Vec::with_capacity(samples.len())),
        post: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = assemble(records, chunk, transform, None)?;
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let pre = batch.pre.map(|t| g.constant(t));
        let post = g.constant(batch.post);
        let out = spec.forward(&mut g, &mut b, pre, post)?;
        let split = |v: Var, into: &mut Vec<Tensor<f32>>| {
            let t = g.value(v);
            for i in 0..t.dim(0) {
                let s = t.slice_leading(i, i + 1);
                let shape = s.shape()[1..].to_vec();
                into.push(s.reshape(&shape).expect("same size"));
            }
        };
        if let (Some(tap), Some(dst)) = (pre_tap, cache.pre.as_mut()) {
            split(out.taps[tap], dst);
        }
        split(out.taps[post_tap], &mut cache.post);
    }
    Ok(cache)
}

enum Inputs<'a> {
    Images(Batch),
    Features {
        cache: &'a FeatureCache,
        idx: Vec<usize>,
        labels: Vec<usize>,
    },
}

impl Inputs<'_> {
    fn labels(&self) -> &[usize] {
        match self {
            Inputs::Images(b) => &b.labels,
            Inputs::Features { labels, .. } => labels,
        }
    }
}

fn logits_of(spec: &ModelSpec, g: &mut Graph<f32>, b: &mut Binder<'_, f32>, inputs: &Inputs<'_>) -> Result<Var> {
    match inputs {
        Inputs::Images(batch) => {
            let pre = batch.pre.as_ref().map(|t| g.constant(t.clone()));
            let post = g.constant(batch.post.clone());
            Ok(spec.forward(g, b, pre, post)?.logits)
        }
        Inputs::Features { cache, idx, .. } => {
            let gather = |v: &[Tensor<f32>]| Tensor::stack(&idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
            let pre = match &cache.pre {
                Some(p) => Some(g.constant(gather(p)?)),
                None => None,
            };
            let post = g.constant(gather(&cache.post)?);
            Ok(spec.fuse_and_classify(g, b, pre, post)?.logits)
        }
    }
}

/// Inverse-frequency class weights, normalized so a balanced set gets all ones.
pub fn class_weights(samples: &[Sample], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        counts[s.label] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { n / (classes as f64 * c as f64) })
        .collect()
}

/// Confusion matrix of `store` on `samples`, without augmentation.
pub fn evaluate(
    spec: &ModelSpec,
    store: &ParamStore<f32>,
    records: &[PairRecord],
    samples: &[Sample],
    transform: &TransformConfig,
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(spec.num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs = Inputs::Images(assemble(records, chunk, transform, None)?);
        predict_into(spec, store, &inputs, &mut m)?;
    }
    Ok(m)
}

fn predict_into(spec: &ModelSpec, store: &ParamStore<f32>, inputs: &Inputs<'_>, m: &mut ConfusionMatrix) -> Result<()> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let logits = logits_of(spec, &mut g, &mut b, inputs)?;
    let v = g.value(logits);
    let k = spec.num_classes;
    for (row, &t) in v.data().chunks(k).zip(inputs.labels()) {
        let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        m.record(t, argmax(&row))?;
    }
    Ok(())
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        let line = serde_json::to_string(rec)?;
        writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
    }
    Ok(())
}

/// Train every non-frozen parameter of `store` on `train`, scoring each
/// epoch on `val`, and keep the epoch with the best validation accuracy.
pub fn train(
    spec: &ModelSpec,
    mut store: ParamStore<f32>,
    records: &[PairRecord],
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(format!(
            "need non-empty splits, got {} train and {} validation samples",
            train.len(),
            val.len()
        )));
    }
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let k = spec.num_classes;
    let weights = class_weights(train, k);
    for (c, n) in (0..k).map(|c| (c, train.iter().filter(|s| s.label == c).count())) {
        if n == 0 {
            log::warn!("class {c} has no training samples");
        }
    }
    let weights = opts.class_weighting.then_some(weights);
    let cached = backbones_frozen(spec, &store) && !opts.transform.augments();
    let (train_cache, val_cache) = if cached {
        log::info!("backbones frozen and inputs fixed: caching features");
        (
            Some(encode(spec, &store, records, train, &opts.transform, opts.batch_size)?),
            Some(encode(spec, &store, records, val, &opts.transform, opts.batch_size)?),
        )
    } else {
        (None, None)
    };

    let per_epoch = train.len().div_ceil(opts.batch_size);
    let total = per_epoch * opts.epochs;
    let mut opt = AdamW::<f32>::new(AdamWConfig {
        weight_decay: opts.weight_decay,
        ..AdamWConfig::default()
    });
    let mut history = History::default();
    let mut best: Option<(ParamStore<f32>, usize, MetricsReport)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let plan: Vec<Vec<usize>> = order.chunks(opts.batch_size).map(<[usize]>::to_vec).collect();
        let mut epoch_loss = 0.0;

        let mut run_step = |inputs: Inputs<'_>| -> Result<()> {
            let lr = cosine_lr(step, total, opts.lr_max, opts.lr_min)?;
            let mut g = Graph::new();
            let (loss, grads) = {
                let mut b = Binder::new(&store);
                let logits = logits_of(spec, &mut g, &mut b, &inputs)?;
                let loss = g.cross_entropy(logits, inputs.labels(), weights.as_deref())?;
                let value = g.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: step, loss: value, lr });
                }
                let grads = g.backward(loss)?;
                (value, b.collect(&grads))
            };
            opt.step(&mut store, &grads, lr)?;
            let rec = StepRecord { step, epoch, lr, loss };
            write_log(&mut log, &LogRecord::Step(rec.clone()))?;
            history.steps.push(rec);
            epoch_loss += loss;
            step += 1;
            Ok(())
        };

        if let Some(cache) = &train_cache {
            for idx in &plan {
                run_step(Inputs::Features {
                    cache,
                    idx: idx.clone(),
                    labels: idx.iter().map(|&i| train[i].label).collect(),
                })?;
            }
        } else {
            let batch_of = |idx: &[usize]| {
                let s: Vec<Sample> = idx.iter().map(|&i| train[i]).collect();
                assemble(records, &s, &opts.transform, Some((opts.seed, epoch)))
            };
            if opts.strict {
                for idx in &plan {
                    run_step(Inputs::Images(batch_of(idx)?))?;
                }
            } else {
                std::thread::scope(|scope| -> Result<()> {
                    let (tx, rx) = sync_channel::<Result<Batch>>(2);
                    let plan = &plan;
                    let batch_of = &batch_of;
                    scope.spawn(move || {
                        for idx in plan {
                            if tx.send(batch_of(idx)).is_err() {
                                break;
                            }
                        }
                    });
                    for batch in rx {
                        run_step(Inputs::Images(batch?))?;
                    }
                    Ok(())
                })?;
            }
        }

        let mut m = ConfusionMatrix::new(k);
        match &val_cache {
            Some(cache) => {
                for chunk in (0..val.len()).collect::<Vec<_>>().chunks(opts.batch_size) {
                    let inputs = Inputs::Features {
                        cache,
                        idx: chunk.to_vec(),
                        labels: chunk.iter().map(|&i| val[i].label).collect(),
                    };
                    predict_into(spec, &store, &inputs, &mut m)?;
                }
            }
            None => m = evaluate(spec, &store, records, val, &opts.transform, opts.batch_size)?,
        }
        let mut metrics = metrics_for(&m)?;
        metrics.model = opts.model_name.clone();
        metrics.config_hash = opts.config_hash.clone();
        metrics.alpha = spec.alpha(&store);
        let rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / plan.len() as f64,
            metrics: metrics.clone(),
            alpha: metrics.alpha,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val accuracy {:.4}",
            rec.train_loss,
            metrics.accuracy
        );
        write_log(&mut log, &LogRecord::Epoch(rec.clone()))?;
        if let Some(w) = log.as_mut() {
            w.flush().map_err(|e| Error::io("<training log>", e))?;
        }
        history.epochs.push(rec);
        if best.as_ref().is_none_or(|(_, _, b)| metrics.accuracy > b.accuracy) {
            best = Some((store.clone(), epoch, metrics));
        }
    }
    let (best, best_epoch, best_metrics) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metrics,
        last: store,
        history,
    })
}

/// Per-parameter snapshot used to check which tensors changed.
pub fn snapshot(store: &ParamStore<f32>) -> BTreeMap<String, Vec<f32>> {
    store.iter().map(|(n, p)| (n.to_string(), p.value.data().to_vec())).collect()
}
