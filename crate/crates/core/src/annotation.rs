//! Multi-annotator labeling: assignment, append-only label log, consensus.
//!
//! The log is JSON Lines. Each line is a label or an adjudication:
//!
//! ```text
//! {"kind":"label","pair_id":"p1","annotator_id":"a1","label":"mild","submitted_at":"2024-10-20T12:00:00Z"}
//! {"kind":"adjudication","pair_id":"p1","adjudicator_id":"lead","label":"severe","submitted_at":"..."}
//! ```
//!
//! Lines are only ever appended; an adjudication is a new record, never an edit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::catalog::{ImageCatalog, ImagePair};
use crate::error::Error;
use crate::label::DamageLabel;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_id: String,
    pub annotator_id: String,
    pub label: DamageLabel,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationRecord {
    pub pair_id: String,
    pub adjudicator_id: String,
    pub label: DamageLabel,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Label(AnnotationRecord),
    Adjudication(AdjudicationRecord),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedBy {
    Majority,
    Adjudication,
}

/// A consensus label, or `CONFLICT` when the vote has no strict plurality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Label(DamageLabel),
    Conflict,
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Label(l) => l.serialize(s),
            Self::Conflict => s.serialize_str("CONFLICT"),
        }
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "CONFLICT" {
            Ok(Self::Conflict)
        } else {
            s.parse().map(Self::Label).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusLabel {
    pub pair_id: String,
    pub label: Outcome,
    /// Votes per damage class name.
    pub votes: BTreeMap<DamageLabel, usize>,
    /// `None` while in conflict.
    pub resolved_by: Option<ResolvedBy>,
}

/// Strict plurality of `votes`; `None` for a tie at the top or no votes.
pub fn plurality(votes: &[DamageLabel]) -> Option<DamageLabel> {
    let mut counts: BTreeMap<DamageLabel, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let top = counts.values().copied().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == top);
    let first = winners.next().map(|(l, _)| *l);
    if winners.next().is_some() {
        None
    } else {
        first
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("`{0}` is not an adjudicator")]
    NotAdjudicator(String),
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("`{}` already labeled pair `{}`", .0.annotator_id, .0.pair_id)]
    Duplicate(Box<AnnotationRecord>),
    #[error("label `{0}` is not a damage class")]
    InvalidLabel(DamageLabel),
    #[error("pair `{0}` has no labels")]
    NoLabels(String),
    #[error("pair `{0}` is not in conflict")]
    NotInConflict(String),
    #[error(transparent)]
    Storage(#[from] Error),
}

pub type AnnotationResult<T> = Result<T, AnnotationError>;

/// What an annotator sees for one pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInfo {
    pub pair_id: String,
    pub pre_id: String,
    pub post_id: String,
    pub pre_uri: String,
    pub post_uri: String,
    pub pairing_distance: f64,
}

impl PairInfo {
    /// Resolve image URIs of `pairs` through `catalog`.
    pub fn from_catalog(pairs: &[ImagePair], catalog: &ImageCatalog) -> crate::Result<Vec<Self>> {
        pairs
            .iter()
            .map(|p| {
                let uri = |id: &str| {
                    catalog
                        .get(id)
                        .map(|i| i.uri.clone())
                        .ok_or_else(|| Error::Invalid(format!("pair `{}` references unknown image `{id}`", p.pair_id)))
                };
                Ok(Self {
                    pair_id: p.pair_id.clone(),
                    pre_id: p.pre_id.clone(),
                    post_id: p.post_id.clone(),
                    pre_uri: uri(&p.pre_id)?,
                    post_uri: uri(&p.post_id)?,
                    pairing_distance: p.pairing_distance,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDetail {
    #[serde(flatten)]
    pub pair: PairInfo,
    pub label_count: usize,
    pub consensus: Option<ConsensusLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub pairs: usize,
    /// Pairs with at least one label.
    pub labeled_pairs: usize,
    /// Pairs labeled by every registered annotator.
    pub complete_pairs: usize,
    pub labels: usize,
    pub per_annotator: BTreeMap<String, usize>,
    pub conflicts: usize,
    pub adjudications: usize,
    /// Fraction of pairs with two or more labels whose votes are unanimous.
    pub agreement_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub exported: usize,
    pub conflicts: usize,
    pub unlabeled: usize,
}

#[derive(Default)]
struct Inner {
    labels: Vec<AnnotationRecord>,
    adjudications: Vec<AdjudicationRecord>,
    by_key: HashMap<(String, String), usize>,
    by_pair: BTreeMap<String, Vec<usize>>,
    adjudicated: HashMap<String, usize>,
}

impl Inner {
    fn votes(&self, pair_id: &str) -> Vec<DamageLabel> {
        self.by_pair
            .get(pair_id)
            .map(|ix| ix.iter().map(|&i| self.labels[i].label).collect())
            .unwrap_or_default()
    }

    fn count(&self, pair_id: &str) -> usize {
        self.by_pair.get(pair_id).map_or(0, Vec::len)
    }

    fn consensus(&self, pair_id: &str) -> Option<ConsensusLabel> {
        let votes = self.votes(pair_id);
        if votes.is_empty() {
            return None;
        }
        let mut tally: BTreeMap<DamageLabel, usize> = DamageLabel::DAMAGE.iter().map(|&l| (l, 0)).collect();
        for v in &votes {
            *tally.entry(*v).or_default() += 1;
        }
        let (label, resolved_by) = if let Some(&i) = self.adjudicated.get(pair_id) {
            (Outcome::Label(self.adjudications[i].label), Some(ResolvedBy::Adjudication))
        } else {
            match plurality(&votes) {
                Some(l) => (Outcome::Label(l), Some(ResolvedBy::Majority)),
                None => (Outcome::Conflict, None),
            }
        };
        Some(ConsensusLabel {
            pair_id: pair_id.to_string(),
            label,
            votes: tally,
            resolved_by,
        })
    }

    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::Label(r) => {
                let i = self.labels.len();
                self.by_key.insert((r.pair_id.clone(), r.annotator_id.clone()), i);
                self.by_pair.entry(r.pair_id.clone()).or_default().push(i);
                self.labels.push(r);
            }
            LogEntry::Adjudication(a) => {
                self.adjudicated.insert(a.pair_id.clone(), self.adjudications.len());
                self.adjudications.push(a);
            }
        }
    }
}

/// Thread-safe annotation service backed by an optional append-only log file.
pub struct AnnotationService {
    pairs: BTreeMap<String, PairInfo>,
    annotators: BTreeSet<String>,
    adjudicators: BTreeSet<String>,
    inner: RwLock<Inner>,
    log: Option<Mutex<File>>,
    log_path: Option<PathBuf>,
}

impl AnnotationService {
    /// In-memory service (nothing persisted).
    pub fn new(pairs: Vec<PairInfo>, annotators: &[String], adjudicators: &[String]) -> Self {
        Self {
            pairs: pairs.into_iter().map(|p| (p.pair_id.clone(), p)).collect(),
            annotators: annotators.iter().cloned().collect(),
            adjudicators: adjudicators.iter().cloned().collect(),
            inner: RwLock::new(Inner::default()),
            log: None,
            log_path: None,
        }
    }

    /// Service persisted to `log_path`, replaying any records already there.
    pub fn open(
        pairs: Vec<PairInfo>,
        annotators: &[String],
        adjudicators: &[String],
        log_path: impl AsRef<Path>,
    ) -> crate::Result<Self> {
        let path = log_path.as_ref();
        let mut svc = Self::new(pairs, annotators, adjudicators);
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut inner = Inner::default();
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = serde_json::from_str(&line)
                    .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
                if let LogEntry::Label(r) = &entry {
                    if inner.by_key.contains_key(&(r.pair_id.clone(), r.annotator_id.clone())) {
                        return Err(Error::Invalid(format!(
                            "{}:{}: duplicate label by `{}` for `{}`",
                            path.display(),
                            n + 1,
                            r.annotator_id,
                            r.pair_id
                        )));
                    }
                }
                inner.apply(entry);
            }
            svc.inner = RwLock::new(inner);
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        svc.log = Some(Mutex::new(f));
        svc.log_path = Some(path.to_path_buf());
        Ok(svc)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn annotators(&self) -> impl Iterator<Item = &str> {
        self.annotators.iter().map(String::as_str)
    }

    fn check_annotator(&self, id: &str) -> AnnotationResult<()> {
        if self.annotators.contains(id) {
            Ok(())
        } else {
            Err(AnnotationError::UnknownAnnotator(id.to_string()))
        }
    }

    fn check_pair(&self, id: &str) -> AnnotationResult<&PairInfo> {
        self.pairs.get(id).ok_or_else(|| AnnotationError::UnknownPair(id.to_string()))
    }

    fn persist(&self, entry: &LogEntry) -> AnnotationResult<()> {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_string(entry).map_err(Error::from)?;
            line.push('\n');
            let mut f = log.lock().expect("log lock");
            let path = self.log_path.as_deref().unwrap_or(Path::new("<label log>"));
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// The least-labeled pair this annotator has not labeled; ties go to the
    /// smallest pair id. `None` when the annotator's queue is empty.
    pub fn next_pair(&self, annotator_id: &str) -> AnnotationResult<Option<PairInfo>> {
        self.check_annotator(annotator_id)?;
        let inner = self.inner.read().expect("state lock");
        let best = self
            .pairs
            .keys()
            .filter(|p| !inner.by_key.contains_key(&((*p).clone(), annotator_id.to_string())))
            .min_by_key(|p| (inner.count(p), (*p).clone()));
        Ok(best.map(|p| self.pairs[p].clone()))
    }

    pub fn pair(&self, pair_id: &str) -> AnnotationResult<PairDetail> {
        let pair = self.check_pair(pair_id)?.clone();
        let inner = self.inner.read().expect("state lock");
        Ok(PairDetail {
            pair,
            label_count: inner.count(pair_id),
            consensus: inner.consensus(pair_id),
        })
    }

    /// Append a label; a second label for the same (pair, annotator) is rejected.
    pub fn submit(&self, record: AnnotationRecord) -> AnnotationResult<AnnotationRecord> {
        self.check_annotator(&record.annotator_id)?;
        self.check_pair(&record.pair_id)?;
        if !record.label.is_damage() {
            return Err(AnnotationError::InvalidLabel(record.label));
        }
        let mut inner = self.inner.write().expect("state lock");
        let key = (record.pair_id.clone(), record.annotator_id.clone());
        if let Some(&i) = inner.by_key.get(&key) {
            return Err(AnnotationError::Duplicate(Box::new(inner.labels[i].clone())));
        }
        let entry = LogEntry::Label(record.clone());
        self.persist(&entry)?;
        inner.apply(entry);
        Ok(record)
    }

    pub fn consensus(&self, pair_id: &str) -> AnnotationResult<ConsensusLabel> {
        self.check_pair(pair_id)?;
        let inner = self.inner.read().expect("state lock");
        inner
            .consensus(pair_id)
            .ok_or_else(|| AnnotationError::NoLabels(pair_id.to_string()))
    }

    /// Pairs whose vote is tied and not yet adjudicated.
    pub fn conflicts(&self) -> Vec<ConsensusLabel> {
        let inner = self.inner.read().expect("state lock");
        inner
            .by_pair
            .keys()
            .filter_map(|p| inner.consensus(p))
            .filter(|c| c.label == Outcome::Conflict)
            .collect()
    }

    /// Resolve a conflicted pair.
    pub fn adjudicate(&self, record: AdjudicationRecord) -> AnnotationResult<ConsensusLabel> {
        if !self.adjudicators.contains(&record.adjudicator_id) {
            return Err(AnnotationError::NotAdjudicator(record.adjudicator_id));
        }
        self.check_pair(&record.pair_id)?;
        if !record.label.is_damage() {
            return Err(AnnotationError::InvalidLabel(record.label));
        }
        let mut inner = self.inner.write().expect("state lock");
        match inner.consensus(&record.pair_id) {
            None => return Err(AnnotationError::NoLabels(record.pair_id)),
            Some(c) if c.label != Outcome::Conflict => return Err(AnnotationError::NotInConflict(record.pair_id)),
            Some(_) => {}
        }
        let pair_id = record.pair_id.clone();
        let entry = LogEntry::Adjudication(record);
        self.persist(&entry)?;
        inner.apply(entry);
        Ok(inner.consensus(&pair_id).expect("labels exist"))
    }

    /// Resolved labels of every pair; conflicted and unlabeled pairs are left out.
    pub fn resolved_labels(&self) -> (BTreeMap<String, DamageLabel>, ExportSummary) {
        let inner = self.inner.read().expect("state lock");
        let mut out = BTreeMap::new();
        let (mut conflicts, mut unlabeled) = (0, 0);
        for id in self.pairs.keys() {
            match inner.consensus(id) {
                None => unlabeled += 1,
                Some(c) => match c.label {
                    Outcome::Label(l) => {
                        out.insert(id.clone(), l);
                    }
                    Outcome::Conflict => conflicts += 1,
                },
            }
        }
        let summary = ExportSummary {
            exported: out.len(),
            conflicts,
            unlabeled,
        };
        (out, summary)
    }

    /// Write the `pair_id,label` CSV read by training and splitting.
    pub fn export_labels<W: Write>(&self, w: W) -> crate::Result<ExportSummary> {
        let (labels, summary) = self.resolved_labels();
        crate::train::dataset::write_labels(w, &labels)?;
        Ok(summary)
    }

    pub fn stats(&self) -> Stats {
        let inner = self.inner.read().expect("state lock");
        let mut per_annotator: BTreeMap<String, usize> = self.annotators.iter().map(|a| (a.clone(), 0)).collect();
        for r in &inner.labels {
            *per_annotator.entry(r.annotator_id.clone()).or_default() += 1;
        }
        let (mut multi, mut unanimous, mut conflicts, mut complete) = (0, 0, 0, 0);
        for (p, ix) in &inner.by_pair {
            if ix.len() >= 2 {
                multi += 1;
                let first = inner.labels[ix[0]].label;
                if ix.iter().all(|&i| inner.labels[i].label == first) {
                    unanimous += 1;
                }
            }
            if inner.consensus(p).is_some_and(|c| c.label == Outcome::Conflict) {
                conflicts += 1;
            }
            if !self.annotators.is_empty()
                && self
                    .annotators
                    .iter()
                    .all(|a| inner.by_key.contains_key(&(p.clone(), a.clone())))
            {
                complete += 1;
            }
        }
        Stats {
            pairs: self.pairs.len(),
            labeled_pairs: inner.by_pair.len(),
            complete_pairs: complete,
            labels: inner.labels.len(),
            per_annotator,
            conflicts,
            adjudications: inner.adjudications.len(),
            agreement_rate: if multi == 0 { 0.0 } else { unanimous as f64 / multi as f64 },
        }
    }
}
