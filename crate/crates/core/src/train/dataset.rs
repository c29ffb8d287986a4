//! Labeled pairs, experiment views and batch assembly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::catalog::{self, split_dataset, DatasetSplit};
use crate::data::{augment_pair, preprocess, Mask, PixelImage, SyntheticDatasetSpec, TransformConfig};
use crate::error::{Error, Result};
use crate::label::DamageLabel;
use crate::tensor::Tensor;

use super::config::{DataSource, Experiment, ExperimentConfig};

#[derive(Clone, Debug)]
pub struct PairRecord {
    pub pair_id: String,
    pub pre: PixelImage,
    pub post: PixelImage,
    pub label: DamageLabel,
    /// Damage region of the post image, when known.
    pub mask: Option<Mask>,
}

/// Identifier of synthetic pair `index`.
pub fn synthetic_id(index: usize) -> String {
    format!("synth-{index:05}")
}

pub fn synthetic_records(spec: &SyntheticDatasetSpec, seed: u64, count: usize) -> Result<Vec<PairRecord>> {
    (0..count)
        .map(|i| {
            let (_, p) = spec.generate(seed, i as u64)?;
            Ok(PairRecord {
                pair_id: synthetic_id(i),
                pre: p.pre,
                post: p.post,
                label: p.label,
                mask: Some(p.mask),
            })
        })
        .collect()
}

/// Read a `pair_id,label` CSV.
pub fn read_labels<R: Read>(reader: R) -> Result<BTreeMap<String, DamageLabel>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["pair_id", "label"] {
        return Err(Error::Invalid(format!("label file header {header:?} is not [pair_id, label]")));
    }
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().trim().to_string();
        let label: DamageLabel = rec.get(1).unwrap_or_default().parse()?;
        if !label.is_damage() {
            return Err(Error::Invalid(format!("pair `{id}` labeled {label}; only damage classes are allowed")));
        }
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::Invalid(format!("pair `{id}` labeled twice")));
        }
    }
    Ok(out)
}

pub fn write_labels<W: Write>(writer: W, labels: &BTreeMap<String, DamageLabel>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pair_id", "label"])?;
    for (id, l) in labels {
        w.write_record([id.as_str(), l.name()])?;
    }
    w.flush().map_err(|e| Error::io("<labels>", e))
}

/// Load every labeled pair named in the pair list. Unlabeled pairs are skipped.
pub fn catalog_records(
    manifest: &Path,
    pairs: &Path,
    labels: &Path,
    image_root: Option<&Path>,
    masks: Option<&Path>,
) -> Result<Vec<PairRecord>> {
    let (cat, _) = catalog::load_catalog(manifest)?;
    let pf = std::fs::File::open(pairs).map_err(|e| Error::io(pairs, e))?;
    let pairs = catalog::read_pairs(std::io::BufReader::new(pf))?;
    let lf = std::fs::File::open(labels).map_err(|e| Error::io(labels, e))?;
    let labels = read_labels(lf)?;
    let root = image_root
        .map(Path::to_path_buf)
        .or_else(|| manifest.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let load = |id: &str| -> Result<PixelImage> {
        let img = cat
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("pair references unknown image `{id}`")))?;
        let p = Path::new(&img.uri);
        PixelImage::load(if p.is_absolute() { p.to_path_buf() } else { root.join(p) })
    };
    let mut out = Vec::new();
    let mut unlabeled = 0;
    for pair in &pairs {
        let Some(&label) = labels.get(&pair.pair_id) else {
            unlabeled += 1;
            continue;
        };
        let mask = match masks {
            Some(dir) => {
                let p = dir.join(format!("{}.png", pair.pair_id));
                if p.exists() {
                    Some(Mask::load(p)?)
                } else {
                    None
                }
            }
            None => None,
        };
        out.push(PairRecord {
            pair_id: pair.pair_id.clone(),
            pre: load(&pair.pre_id)?,
            post: load(&pair.post_id)?,
            label,
            mask,
        });
    }
    if unlabeled > 0 {
        log::warn!("{unlabeled} pairs have no consensus label and were skipped");
    }
    out.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    Ok(out)
}

/// Load the records an experiment configuration points at.
pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<PairRecord>> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => synthetic_records(&d.synthetic, d.seed, d.count),
        DataSource::Catalog => {
            let need = |p: &Option<std::path::PathBuf>, key: &str| {
                p.as_deref()
                    .map(|p| cfg.resolve(p))
                    .ok_or_else(|| Error::Config(format!("{key} is required")))
            };
            let root = d.image_root.as_deref().map(|p| cfg.resolve(p));
            let masks = d.masks.as_deref().map(|p| cfg.resolve(p));
            catalog_records(
                &need(&d.catalog, "data.catalog")?,
                &need(&d.pairs, "data.pairs")?,
                &need(&d.labels, "data.labels")?,
                root.as_deref(),
                masks.as_deref(),
            )
        }
    }
}

/// The record `pair_id` of a configuration's data. Synthetic pairs are
/// rendered on their own rather than with the whole dataset.
pub fn find_record(cfg: &ExperimentConfig, pair_id: &str) -> Result<PairRecord> {
    let d = &cfg.data;
    if d.source == DataSource::Synthetic {
        let index = pair_id
            .strip_prefix("synth-")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&i| i < d.count && synthetic_id(i) == pair_id)
            .ok_or_else(|| Error::Invalid(format!("unknown pair `{pair_id}`")))?;
        let (_, p) = d.synthetic.generate(d.seed, index as u64)?;
        return Ok(PairRecord {
            pair_id: pair_id.to_string(),
            pre: p.pre,
            post: p.post,
            label: p.label,
            mask: Some(p.mask),
        });
    }
    load_records(cfg)?
        .into_iter()
        .find(|r| r.pair_id == pair_id)
        .ok_or_else(|| Error::Invalid(format!("unknown pair `{pair_id}`")))
}

/// Files written by [`export_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExport {
    pub manifest: PathBuf,
    pub pairs: PathBuf,
    pub labels: PathBuf,
    pub masks: PathBuf,
    pub images: PathBuf,
    pub count: usize,
}

/// Write `count` synthetic pairs as a catalog dataset under `dir`:
///
/// ```text
/// manifest.csv          image manifest (pre and post of a pair share a location)
/// pairs.jsonl           pair list, as produced by pairing the manifest
/// labels.csv            pair_id,label
/// images/<id>.png       images named by image id
/// masks/<pair_id>.png   damage masks
/// ```
///
/// Pair `i` is `pair-synth-{i:05}`; its images are `synth-{i:05}-pre` and
/// `synth-{i:05}`. Locations are 0.001 degrees of latitude apart.
pub fn export_synthetic(spec: &SyntheticDatasetSpec, seed: u64, count: usize, dir: &Path) -> Result<SyntheticExport> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let pre_time = chrono::DateTime::parse_from_rfc3339("2024-09-01T12:00:00Z").expect("valid timestamp");
    let post_time = chrono::DateTime::parse_from_rfc3339("2024-10-11T12:00:00Z").expect("valid timestamp");
    let mut rows = Vec::with_capacity(2 * count);
    let mut pairs = Vec::with_capacity(count);
    let mut labels = BTreeMap::new();
    for i in 0..count {
        let (_, p) = spec.generate(seed, i as u64)?;
        let post_id = synthetic_id(i);
        let pre_id = format!("{post_id}-pre");
        let pair_id = catalog::ImagePair::id_for(&post_id);
        let (lat, lon) = (25.0 + i as f64 * 1e-3, -82.5);
        for (id, phase, time, img) in [
            (&pre_id, catalog::Phase::Pre, pre_time, &p.pre),
            (&post_id, catalog::Phase::Post, post_time, &p.post),
        ] {
            let uri = format!("images/{id}.png");
            img.save_png(dir.join(&uri))?;
            rows.push(catalog::StreetViewImage {
                image_id: id.clone(),
                phase,
                latitude: lat,
                longitude: lon,
                captured_at: time.with_timezone(&chrono::Utc),
                uri,
            });
        }
        p.mask.save_png(masks.join(format!("{pair_id}.png")))?;
        labels.insert(pair_id.clone(), p.label);
        pairs.push(catalog::ImagePair {
            pair_id,
            pre_id,
            post_id,
            pairing_distance: 0.0,
        });
    }
    pairs.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let create = |name: &str| -> Result<(PathBuf, std::io::BufWriter<std::fs::File>)> {
        let path = dir.join(name);
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, std::io::BufWriter::new(f)))
    };
    let (manifest, w) = create("manifest.csv")?;
    catalog::write_catalog(w, &rows)?;
    let (pairs_path, mut w) = create("pairs.jsonl")?;
    catalog::write_pairs(&mut w, &pairs)?;
    w.flush().map_err(|e| Error::io(&pairs_path, e))?;
    let (labels_path, w) = create("labels.csv")?;
    write_labels(w, &labels)?;
    Ok(SyntheticExport {
        manifest,
        pairs: pairs_path,
        labels: labels_path,
        masks,
        images,
        count,
    })
}

/// Stratified split of the pairs by damage label.
pub fn split_records(records: &[PairRecord], ratio: (u32, u32), seed: u64) -> Result<DatasetSplit> {
    let items: Vec<(String, DamageLabel)> = records.iter().map(|r| (r.pair_id.clone(), r.label)).collect();
    let (split, warnings) = split_dataset(&items, ratio, seed)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    /// The post image alone, with the pair's damage label.
    Post,
    /// The pre image alone, labeled no-damage.
    PreAsNoDamage,
    /// Both images, with the pair's damage label.
    Pair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Index into the record list.
    pub record: usize,
    pub view: View,
    pub label: usize,
}

/// Samples of `experiment` drawn from the records whose ids are in `ids`.
/// A pre image follows its pair into the same part of the split.
pub fn samples_for(experiment: Experiment, records: &[PairRecord], ids: &[String]) -> Vec<Sample> {
    let index: BTreeMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.pair_id.as_str(), i)).collect();
    let mut out = Vec::new();
    for id in ids {
        let Some(&i) = index.get(id.as_str()) else { continue };
        let label = records[i].label.index();
        match experiment {
            Experiment::Exp1PostOnly => out.push(Sample { record: i, view: View::Post, label }),
            Experiment::Exp2FourClass => {
                out.push(Sample { record: i, view: View::Post, label });
                out.push(Sample {
                    record: i,
                    view: View::PreAsNoDamage,
                    label: DamageLabel::NoDamage.index(),
                });
            }
            Experiment::Exp3DualChannel => out.push(Sample { record: i, view: View::Pair, label }),
        }
    }
    out
}

pub struct Batch {
    /// `[B, S, S, 3]`; present for pair samples.
    pub pre: Option<Tensor<f32>>,
    pub post: Tensor<f32>,
    pub labels: Vec<usize>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Augmentation seed of one sample in one epoch.
pub fn augment_seed(seed: u64, epoch: usize, sample: &Sample) -> u64 {
    let view = match sample.view {
        View::Post => 0,
        View::PreAsNoDamage => 1,
        View::Pair => 2,
    };
    mix(mix(mix(seed, epoch as u64), sample.record as u64), view)
}

/// Preprocess `samples` into a batch. `augment` carries `(seed, epoch)` for
/// training batches; evaluation batches pass `None`.
pub fn assemble(
    records: &[PairRecord],
    samples: &[Sample],
    transform: &TransformConfig,
    augment: Option<(u64, usize)>,
) -> Result<Batch> {
    let mut pre = Vec::new();
    let mut post = Vec::with_capacity(samples.len());
    for s in samples {
        let r = &records[s.record];
        let (a, b) = match s.view {
            View::Post => (&r.post, &r.post),
            View::PreAsNoDamage => (&r.pre, &r.pre),
            View::Pair => (&r.pre, &r.post),
        };
        let (a, b) = match augment {
            Some((seed, epoch)) if transform.augments() => {
                let (x, y, _) = augment_pair(a, b, transform, augment_seed(seed, epoch, s))?;
                (x, y)
            }
            _ => (a.clone(), b.clone()),
        };
        if s.view == View::Pair {
            pre.push(preprocess(&a, transform)?);
        }
        post.push(preprocess(&b, transform)?);
    }
    if !pre.is_empty() && pre.len() != post.len() {
        return Err(Error::Invalid("batch mixes pair and single-image samples".into()));
    }
    Ok(Batch {
        pre: if pre.is_empty() { None } else { Some(Tensor::stack(&pre)?) },
        post: Tensor::stack(&post)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}
