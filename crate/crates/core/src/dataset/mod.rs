//! Image manifests: ingestion, validation, sampling, region filtering,
//! train/test splitting and synthetic fixtures.
//!
//! A manifest is stored as JSON-lines (one [`ImageRecord`] per line) with an
//! optional sidecar `<manifest>.meta.json` carrying the schema references,
//! provenance and split assignment.

mod bodypart;
mod sampling;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspec::{ClassLabel, LabelSchema, Region, ScoringMethod};

pub use bodypart::{
    filter_body_parts, BodyPartClassifier, ClassifierError, FilterSummary, MetadataClassifier,
    RegionManifests, DEFAULT_MIN_CONFIDENCE,
};
pub use sampling::sample_donors;
pub use split::{split, SplitStrategy};
pub use synth::{generate_synthetic, SynthOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityFlag {
    #[default]
    Ok,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub donor_id: String,
    pub captured_at: DateTime<Utc>,
    pub region: Region,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub quality_flag: QualityFlag,
    #[serde(default)]
    pub labels: BTreeMap<ScoringMethod, ClassLabel>,
}

impl ImageRecord {
    pub fn is_excluded(&self) -> bool {
        self.quality_flag == QualityFlag::Excluded
    }

    pub fn label(&self, method: ScoringMethod) -> Option<&ClassLabel> {
        self.labels.get(&method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Provenance {
    fn append(&mut self, step: &str, seed: Option<u64>) {
        if !self.note.is_empty() {
            self.note.push_str("; ");
        }
        self.note.push_str(step);
        if seed.is_some() {
            self.seed = seed;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub schema_refs: Vec<LabelSchema>,
    pub split: Option<BTreeMap<String, SplitRole>>,
    pub provenance: Provenance,
    /// Directory relative `uri`s are resolved against. Not serialized.
    pub base_dir: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    #[serde(default)]
    schema_refs: Vec<LabelSchema>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<BTreeMap<String, SplitRole>>,
    #[serde(default)]
    provenance: Provenance,
}

pub fn meta_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Write `bytes` to `path` via a temporary file in the same directory and an
/// atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Path of `to` relative to `from`; both must be absolute.
fn relative_path(from: &Path, to: &Path) -> PathBuf {
    let from: Vec<_> = from.components().collect();
    let to: Vec<_> = to.components().collect();
    let common = from.iter().zip(&to).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..from.len() {
        out.push("..");
    }
    for c in &to[common..] {
        out.push(c);
    }
    out
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        DatasetManifest {
            records,
            ..Default::default()
        }
    }

    /// Copy of the manifest metadata with a different record set. The split is
    /// restricted to the surviving records.
    pub fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        let split = self.split.as_ref().map(|s| {
            let ids: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
            s.iter()
                .filter(|(id, _)| ids.contains(id.as_str()))
                .map(|(id, role)| (id.clone(), *role))
                .collect()
        });
        DatasetManifest {
            records,
            schema_refs: self.schema_refs.clone(),
            split,
            provenance: self.provenance.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn resolve_uri(&self, record: &ImageRecord) -> PathBuf {
        let raw = record.uri.strip_prefix("file://").unwrap_or(&record.uri);
        let p = PathBuf::from(raw);
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    pub fn role_of(&self, image_id: &str) -> Option<SplitRole> {
        self.split.as_ref().and_then(|s| s.get(image_id).copied())
    }

    /// Records assigned to `role`, in manifest order. Empty if no split is set.
    pub fn records_with_role(&self, role: SplitRole) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| !r.is_excluded() && self.role_of(&r.image_id) == Some(role))
            .collect()
    }

    /// Sub-manifest holding only the records assigned to `role`.
    pub fn subset(&self, role: SplitRole) -> DatasetManifest {
        let records = self.records_with_role(role).into_iter().cloned().collect();
        self.with_records(records)
    }

    pub fn donors(&self) -> Vec<&str> {
        let mut donors: Vec<&str> = self.records.iter().map(|r| r.donor_id.as_str()).collect();
        donors.sort_unstable();
        donors.dedup();
        donors
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        let mut manifest = DatasetManifest::new(records);
        let meta = meta_path(path);
        if meta.exists() {
            let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
            let meta: ManifestMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: e.line(),
                message: format!("{}: {e}", meta.display()),
            })?;
            manifest.schema_refs = meta.schema_refs;
            manifest.split = meta.split;
            manifest.provenance = meta.provenance;
        }
        manifest.base_dir = path.parent().map(Path::to_path_buf);
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the JSONL manifest and its sidecar, each atomically. Relative
    /// image URIs are rewritten so they still resolve from the new location.
    pub fn write(&self, path: &Path) -> Result<()> {
        let target = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        let rebased = match &self.base_dir {
            Some(base) => {
                let from = target.canonicalize().map_err(|e| Error::io(&target, e))?;
                let base = base.canonicalize().map_err(|e| Error::io(base, e))?;
                (from != base).then(|| relative_path(&from, &base))
            }
            None => None,
        };
        match rebased {
            Some(prefix) => {
                let mut moved = self.clone();
                for r in &mut moved.records {
                    let raw = r.uri.strip_prefix("file://").unwrap_or(&r.uri);
                    if Path::new(raw).is_relative() {
                        r.uri = prefix.join(raw).to_string_lossy().replace('\\', "/");
                    }
                }
                write_atomic(path, moved.to_jsonl()?.as_bytes())?;
            }
            None => write_atomic(path, self.to_jsonl()?.as_bytes())?,
        }
        let meta = ManifestMeta {
            schema_refs: self.schema_refs.clone(),
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        };
        write_atomic(&meta_path(path), serde_json::to_string_pretty(&meta)?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub image_id: Option<String>,
    pub rule: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, image_id: Option<&str>, rule: &str, detail: impl Into<String>) {
        self.violations.push(Violation {
            image_id: image_id.map(str::to_string),
            rule: rule.to_string(),
            detail: detail.into(),
        });
    }
}

pub const RULE_DUPLICATE_ID: &str = "duplicate id";
pub const RULE_LABEL_NOT_IN_SCHEMA: &str = "label not in schema";
pub const RULE_EMPTY_FIELD: &str = "empty field";
pub const RULE_BAD_DIMENSIONS: &str = "invalid dimensions";
pub const RULE_SPLIT_EXCLUDED: &str = "split includes excluded record";
pub const RULE_SPLIT_UNLABELED: &str = "split includes unlabeled record";
pub const RULE_SPLIT_MISSING: &str = "split misses labeled record";
pub const RULE_SPLIT_UNKNOWN: &str = "split references unknown id";
pub const RULE_SCHEMA_REF: &str = "label method not in schema_refs";

/// Checks every manifest invariant and reports each violation with the image
/// id and rule it breaks. An empty report means the manifest is well formed.
pub fn validate_manifest(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let declared: HashSet<ScoringMethod> = manifest.schema_refs.iter().map(|s| s.method).collect();

    for r in &manifest.records {
        let id = r.image_id.as_str();
        if id.is_empty() {
            report.push(None, RULE_EMPTY_FIELD, "image_id is empty");
        } else if !seen.insert(id) {
            report.push(Some(id), RULE_DUPLICATE_ID, format!("image_id {id} appears more than once"));
        }
        if r.donor_id.is_empty() {
            report.push(Some(id), RULE_EMPTY_FIELD, "donor_id is empty");
        }
        if r.uri.is_empty() {
            report.push(Some(id), RULE_EMPTY_FIELD, "uri is empty");
        }
        if r.width == 0 || r.height == 0 {
            report.push(Some(id), RULE_BAD_DIMENSIONS, format!("{}x{}", r.width, r.height));
        }
        for (method, label) in &r.labels {
            if !method.schema().contains(label.as_str()) {
                report.push(
                    Some(id),
                    RULE_LABEL_NOT_IN_SCHEMA,
                    format!("{label} is not a {method} class"),
                );
            }
            if !declared.is_empty() && !declared.contains(method) {
                report.push(Some(id), RULE_SCHEMA_REF, format!("{method} label present"));
            }
        }
    }

    if let Some(split) = &manifest.split {
        let mut known = HashSet::new();
        for r in &manifest.records {
            known.insert(r.image_id.as_str());
            let assigned = split.contains_key(&r.image_id);
            let eligible = !r.is_excluded() && !r.labels.is_empty();
            if assigned && r.is_excluded() {
                report.push(Some(&r.image_id), RULE_SPLIT_EXCLUDED, "excluded record is assigned");
            } else if assigned && r.labels.is_empty() {
                report.push(Some(&r.image_id), RULE_SPLIT_UNLABELED, "unlabeled record is assigned");
            } else if !assigned && eligible {
                report.push(Some(&r.image_id), RULE_SPLIT_MISSING, "labeled record is unassigned");
            }
        }
        for id in split.keys() {
            if !known.contains(id.as_str()) {
                report.push(Some(id), RULE_SPLIT_UNKNOWN, "no such record");
            }
        }
    }
    report
}

/// Load an image referenced by a record.
pub fn load_record_image(manifest: &DatasetManifest, record: &ImageRecord) -> Result<image::RgbImage> {
    if record.uri.starts_with("http://") || record.uri.starts_with("https://") {
        return Err(Error::Decode {
            what: record.uri.clone(),
            message: "remote URIs must be fetched to local storage first".into(),
        });
    }
    crate::imaging::load_rgb(&manifest.resolve_uri(record))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use chrono::TimeZone;

    pub fn record(id: &str, donor: &str, label: Option<&str>) -> ImageRecord {
        let mut labels = BTreeMap::new();
        if let Some(l) = label {
            let method = crate::labelspec::method_of_label(l).unwrap_or(ScoringMethod::Megyesi);
            labels.insert(method, ClassLabel::from(l));
        }
        ImageRecord {
            image_id: id.to_string(),
            donor_id: donor.to_string(),
            captured_at: Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap(),
            region: Region::Torso,
            uri: format!("images/{id}.png"),
            width: 64,
            height: 64,
            quality_flag: QualityFlag::Ok,
            labels,
        }
    }

    /// `donors` donors, `per_donor` images each, Megyesi labels cycling by index.
    pub fn manifest(donors: usize, per_donor: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for d in 0..donors {
            for i in 0..per_donor {
                let label = format!("M-SOD{}", (d * per_donor + i) % 4 + 1);
                let mut r = record(&format!("img-{d}-{i}"), &format!("donor-{d}"), Some(&label));
                r.captured_at += chrono::Duration::days(i as i64);
                records.push(r);
            }
        }
        DatasetManifest::new(records)
    }
}
