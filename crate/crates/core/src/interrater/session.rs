//! Interrater study sessions.
//!
//! Every rater sees the same schedule: the shuffled image list cut into
//! batches, each batch presented once per scoring method, with the method
//! alternating from one batch to the next. A rater's current batch is the
//! first one not yet fully labeled.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_record_image, DatasetManifest, SplitRole};
use crate::error::{Error, Result};
use crate::labelspec::{ClassLabel, ScoringMethod};
use crate::trainer::{predict, TrainedModel};

pub const DEFAULT_BATCH_SIZE: usize = 50;
pub const DEFAULT_STUDY_IMAGES: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterKind {
    Human,
    Model,
}

impl fmt::Display for RaterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RaterKind::Human => "human",
            RaterKind::Model => "model",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RaterId {
    pub id: String,
    pub kind: RaterKind,
}

impl RaterId {
    pub fn human(id: impl Into<String>) -> Self {
        RaterId {
            id: id.into(),
            kind: RaterKind::Human,
        }
    }

    pub fn model(id: impl Into<String>) -> Self {
        RaterId {
            id: id.into(),
            kind: RaterKind::Model,
        }
    }
}

/// Parses `id` or `id:kind` (kind is `human` or `model`; default human).
impl FromStr for RaterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (id, kind) = match s.split_once(':') {
            Some((id, "human")) => (id, RaterKind::Human),
            Some((id, "model")) => (id, RaterKind::Model),
            Some((_, other)) => return Err(Error::Validation(format!("unknown rater kind `{other}`"))),
            None => (s, RaterKind::Human),
        };
        if id.trim().is_empty() {
            return Err(Error::Validation("empty rater id".into()));
        }
        Ok(RaterId {
            id: id.trim().to_string(),
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub index: usize,
    pub method: ScoringMethod,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub image_id: String,
    pub rater_id: String,
    pub kind: RaterKind,
    pub method: ScoringMethod,
    pub label: ClassLabel,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextBatch {
    Batch {
        index: usize,
        total: usize,
        method: ScoringMethod,
        image_ids: Vec<String>,
        /// Images in this batch the rater has already labeled.
        labeled: Vec<String>,
    },
    Done {
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAck {
    pub batch_index: usize,
    pub labeled_in_batch: usize,
    pub batch_size: usize,
    pub batch_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterProgress {
    pub rater: RaterId,
    pub batches_done: usize,
    pub batches_total: usize,
    pub current_method: Option<ScoringMethod>,
    pub complete: BTreeMap<ScoringMethod, bool>,
}

type LabelKey = (String, String, ScoringMethod);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySession {
    pub session_id: String,
    /// Presentation order (shuffled once, shared by all raters).
    pub image_ids: Vec<String>,
    pub batch_size: usize,
    pub methods: Vec<ScoringMethod>,
    pub starting_method: ScoringMethod,
    pub raters: Vec<RaterId>,
    pub schedule: Vec<BatchPlan>,
    pub short_last_batch: bool,
    pub seed: u64,
    pub created_at: DateTime<Utc>,
    /// Manifest the image ids resolve against, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<std::path::PathBuf>,
    #[serde(skip)]
    labels: BTreeMap<LabelKey, LabelEntry>,
}

pub fn create_session(
    session_id: impl Into<String>,
    image_ids: &[String],
    batch_size: usize,
    methods: &[ScoringMethod],
    raters: Vec<RaterId>,
    seed: u64,
) -> Result<StudySession> {
    let mut seen = HashSet::new();
    for id in image_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate image id {id}")));
        }
    }
    if image_ids.is_empty() {
        return Err(Error::Validation("a study needs at least one image".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let distinct: BTreeSet<_> = methods.iter().collect();
    if methods.is_empty() || distinct.len() != methods.len() {
        return Err(Error::Validation("methods must be non-empty and distinct".into()));
    }
    if raters.len() < 2 {
        return Err(Error::Validation("a study needs at least 2 raters".into()));
    }
    let mut rater_ids = HashSet::new();
    for r in &raters {
        if !rater_ids.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate rater id {}", r.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = image_ids.to_vec();
    order.shuffle(&mut rng);
    let start = rng.gen_range(0..methods.len());
    let method_order: Vec<ScoringMethod> = (0..methods.len())
        .map(|i| methods[(start + i) % methods.len()])
        .collect();

    let chunks: Vec<&[String]> = order.chunks(batch_size).collect();
    let n_chunks = chunks.len();
    let m = method_order.len();
    // Each method walks the chunks with a different offset so the same images
    // are not shown twice in a row.
    let schedule = (0..n_chunks * m)
        .map(|k| {
            let mi = k % m;
            let chunk = (k / m + mi * n_chunks / m) % n_chunks;
            BatchPlan {
                index: k,
                method: method_order[mi],
                image_ids: chunks[chunk].to_vec(),
            }
        })
        .collect();

    Ok(StudySession {
        session_id: session_id.into(),
        short_last_batch: !image_ids.len().is_multiple_of(batch_size),
        image_ids: order,
        batch_size,
        methods: methods.to_vec(),
        starting_method: method_order[0],
        raters,
        schedule,
        seed,
        created_at: Utc::now(),
        manifest: None,
        labels: BTreeMap::new(),
    })
}

impl StudySession {
    pub fn rater(&self, rater_id: &str) -> Result<&RaterId> {
        self.raters
            .iter()
            .find(|r| r.id == rater_id)
            .ok_or_else(|| Error::UnknownRater(rater_id.to_string()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &LabelEntry> {
        self.labels.values()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }

    pub fn label_of(&self, rater_id: &str, image_id: &str, method: ScoringMethod) -> Option<&ClassLabel> {
        self.labels
            .get(&(rater_id.to_string(), image_id.to_string(), method))
            .map(|e| &e.label)
    }

    fn batch_done(&self, rater_id: &str, batch: &BatchPlan) -> bool {
        batch
            .image_ids
            .iter()
            .all(|img| self.label_of(rater_id, img, batch.method).is_some())
    }

    fn current_batch(&self, rater_id: &str) -> Option<&BatchPlan> {
        self.schedule.iter().find(|b| !self.batch_done(rater_id, b))
    }

    pub fn next_batch(&self, rater_id: &str) -> Result<NextBatch> {
        self.rater(rater_id)?;
        Ok(match self.current_batch(rater_id) {
            Some(b) => NextBatch::Batch {
                index: b.index,
                total: self.schedule.len(),
                method: b.method,
                image_ids: b.image_ids.clone(),
                labeled: b
                    .image_ids
                    .iter()
                    .filter(|img| self.label_of(rater_id, img, b.method).is_some())
                    .cloned()
                    .collect(),
            },
            None => NextBatch::Done {
                total: self.schedule.len(),
            },
        })
    }

    fn check_entry(&self, rater_id: &str, image_id: &str, method: ScoringMethod, label: &str) -> Result<ClassLabel> {
        self.rater(rater_id)?;
        if !self.methods.contains(&method) {
            return Err(Error::Validation(format!("method {method} is not part of this study")));
        }
        let label = method.schema().check_label(label.trim())?.clone();
        if self.label_of(rater_id, image_id, method).is_some() {
            return Err(Error::DuplicateLabel {
                rater: rater_id.to_string(),
                image_id: image_id.to_string(),
                method: method.id().to_string(),
            });
        }
        Ok(label)
    }

    /// Stores one label. The (image, method) pair must belong to the rater's
    /// current batch; labels are write-once.
    pub fn record_label(
        &mut self,
        rater_id: &str,
        image_id: &str,
        method: ScoringMethod,
        label: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<LabelAck> {
        let label = self.check_entry(rater_id, image_id, method, label)?;
        let batch = self.current_batch(rater_id).ok_or_else(|| {
            Error::ProtocolViolation(format!("rater {rater_id} has already completed the study"))
        })?;
        if batch.method != method || !batch.image_ids.iter().any(|i| i == image_id) {
            return Err(Error::ProtocolViolation(format!(
                "({image_id}, {method}) is not in rater {rater_id}'s current batch {} ({})",
                batch.index, batch.method
            )));
        }
        let index = batch.index;
        let kind = self.rater(rater_id)?.kind;
        self.insert(LabelEntry {
            image_id: image_id.to_string(),
            rater_id: rater_id.to_string(),
            kind,
            method,
            label,
            timestamp,
        });
        let batch = &self.schedule[index];
        let labeled_in_batch = batch
            .image_ids
            .iter()
            .filter(|img| self.label_of(rater_id, img, method).is_some())
            .count();
        Ok(LabelAck {
            batch_index: index,
            labeled_in_batch,
            batch_size: batch.image_ids.len(),
            batch_complete: labeled_in_batch == batch.image_ids.len(),
        })
    }

    pub(crate) fn remove_label(&mut self, rater_id: &str, image_id: &str, method: ScoringMethod) {
        self.labels
            .remove(&(rater_id.to_string(), image_id.to_string(), method));
    }

    fn insert(&mut self, entry: LabelEntry) {
        let key = (entry.rater_id.clone(), entry.image_id.clone(), entry.method);
        self.labels.insert(key, entry);
    }

    /// Re-applies a persisted label without batch-order checks. Used when
    /// replaying a label log; duplicates and foreign labels are still refused.
    pub fn restore_label(&mut self, entry: LabelEntry) -> Result<()> {
        if !self.image_ids.contains(&entry.image_id) {
            return Err(Error::Validation(format!("unknown image {}", entry.image_id)));
        }
        let label = self.check_entry(&entry.rater_id, &entry.image_id, entry.method, entry.label.as_str())?;
        self.insert(LabelEntry { label, ..entry });
        Ok(())
    }

    /// Image ids the rater has not labeled under `method`, in presentation order.
    pub fn missing(&self, rater_id: &str, method: ScoringMethod) -> Vec<String> {
        self.image_ids
            .iter()
            .filter(|img| self.label_of(rater_id, img, method).is_none())
            .cloned()
            .collect()
    }

    pub fn is_complete(&self, rater_id: &str, method: ScoringMethod) -> bool {
        self.missing(rater_id, method).is_empty()
    }

    pub fn progress(&self, rater_id: &str) -> Result<RaterProgress> {
        let rater = self.rater(rater_id)?.clone();
        let batches_done = self.schedule.iter().filter(|b| self.batch_done(rater_id, b)).count();
        Ok(RaterProgress {
            batches_done,
            batches_total: self.schedule.len(),
            current_method: self.current_batch(rater_id).map(|b| b.method),
            complete: self
                .methods
                .iter()
                .map(|m| (*m, self.is_complete(rater_id, *m)))
                .collect(),
            rater,
        })
    }
}

/// Picks study images from a manifest: non-excluded records, restricted to the
/// test split when one exists so a model rater never labels its own training
/// images. With `count`, a seeded sample of that size is drawn.
pub fn select_study_images(manifest: &DatasetManifest, count: Option<usize>, seed: u64) -> Result<Vec<String>> {
    let pool: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !r.is_excluded())
        .filter(|r| manifest.split.is_none() || manifest.role_of(&r.image_id) == Some(SplitRole::Test))
        .map(|r| r.image_id.clone())
        .collect();
    match count {
        None => Ok(pool),
        Some(n) if n > pool.len() => Err(Error::Validation(format!(
            "requested {n} study images but only {} are eligible",
            pool.len()
        ))),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<String> = pool.choose_multiple(&mut rng, n).cloned().collect();
            picked.sort();
            Ok(picked)
        }
    }
}

/// Resolves study image ids to pixels.
pub trait ImageSource: Sync {
    fn load(&self, image_id: &str) -> Result<RgbImage>;
}

impl ImageSource for DatasetManifest {
    fn load(&self, image_id: &str) -> Result<RgbImage> {
        let record = self
            .get(image_id)
            .ok_or_else(|| Error::NotFound(format!("image {image_id}")))?;
        load_record_image(self, record)
    }
}

/// Labels every study image under the model's method on behalf of a model
/// rater. All predictions are computed before anything is stored, so a failure
/// leaves no partial labels. Re-running with identical predictions is a no-op.
pub fn run_model_rater(
    session: &mut StudySession,
    rater_id: &str,
    model: &TrainedModel,
    images: &dyn ImageSource,
    timestamp: DateTime<Utc>,
) -> Result<Vec<LabelEntry>> {
    let rater = session.rater(rater_id)?.clone();
    if rater.kind != RaterKind::Model {
        return Err(Error::Validation(format!("rater {rater_id} is not a model rater")));
    }
    let method = model.method;
    if !session.methods.contains(&method) {
        return Err(Error::Incompatible(format!("study does not use {method}")));
    }
    let predictions: Vec<(String, ClassLabel)> = session
        .image_ids
        .par_iter()
        .map(|id| {
            let img = images.load(id).map_err(|e| {
                Error::Validation(format!("model rater aborted at image {id}: {e}"))
            })?;
            let p = predict(model, &img)
                .map_err(|e| Error::Validation(format!("model rater aborted at image {id}: {e}")))?;
            Ok((id.clone(), p.predicted_label))
        })
        .collect::<Result<_>>()?;

    let existing = predictions
        .iter()
        .filter(|(id, _)| session.label_of(rater_id, id, method).is_some())
        .count();
    if existing == predictions.len()
        && predictions
            .iter()
            .all(|(id, l)| session.label_of(rater_id, id, method) == Some(l))
    {
        return Ok(Vec::new());
    }
    if existing > 0 {
        return Err(Error::ProtocolViolation(format!(
            "model rater {rater_id} already holds {existing} {method} label(s) that differ from this model"
        )));
    }

    let entries: Vec<LabelEntry> = predictions
        .into_iter()
        .map(|(image_id, label)| LabelEntry {
            image_id,
            rater_id: rater_id.to_string(),
            kind: RaterKind::Model,
            method,
            label,
            timestamp,
        })
        .collect();
    for e in &entries {
        session.insert(e.clone());
    }
    Ok(entries)
}

/// CSV with columns image_id, rater_id, kind, method, label, timestamp.
pub fn export_labels_csv(session: &StudySession) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "rater_id", "kind", "method", "label", "timestamp"])
        .map_err(|e| Error::Validation(e.to_string()))?;
    for e in session.labels() {
        w.write_record([
            e.image_id.as_str(),
            e.rater_id.as_str(),
            &e.kind.to_string(),
            e.method.id(),
            e.label.as_str(),
            &e.timestamp.to_rfc3339(),
        ])
        .map_err(|e| Error::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
