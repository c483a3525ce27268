//! Scoring-method schemas and the SOD class label sets.
//!
//! Each scoring method owns an ordered list of class labels (fresh first) and a
//! one-to-one mapping from the stage names used in the original literature to
//! those labels. Schemas are process-wide constants.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    Megyesi,
    Gelderman,
}

impl ScoringMethod {
    pub const ALL: [ScoringMethod; 2] = [ScoringMethod::Megyesi, ScoringMethod::Gelderman];

    pub fn id(self) -> &'static str {
        match self {
            ScoringMethod::Megyesi => "megyesi",
            ScoringMethod::Gelderman => "gelderman",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ScoringMethod::Megyesi => "Megyesi et al.",
            ScoringMethod::Gelderman => "Gelderman et al.",
        }
    }

    pub fn schema(self) -> &'static LabelSchema {
        match self {
            ScoringMethod::Megyesi => &MEGYESI,
            ScoringMethod::Gelderman => &GELDERMAN,
        }
    }

    /// The other method of the pair.
    pub fn other(self) -> ScoringMethod {
        match self {
            ScoringMethod::Megyesi => ScoringMethod::Gelderman,
            ScoringMethod::Gelderman => ScoringMethod::Megyesi,
        }
    }
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ScoringMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "megyesi" => Ok(ScoringMethod::Megyesi),
            "gelderman" => Ok(ScoringMethod::Gelderman),
            _ => Err(Error::SchemaNotFound(s.to_string())),
        }
    }
}

/// Anatomical region of an image. `Unknown` is only produced by body-part
/// classification and never appears in a schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Torso,
    Limbs,
    Unknown,
}

impl Region {
    pub const ANATOMICAL: [Region; 3] = [Region::Head, Region::Torso, Region::Limbs];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Head => "head",
            Region::Torso => "torso",
            Region::Limbs => "limbs",
            Region::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head" => Ok(Region::Head),
            "torso" => Ok(Region::Torso),
            "limbs" => Ok(Region::Limbs),
            "unknown" => Ok(Region::Unknown),
            other => Err(Error::Validation(format!("unknown region `{other}`"))),
        }
    }
}

/// An SOD class label such as `M-SOD1` or `G-SOD6`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassLabel(String);

impl ClassLabel {
    pub fn new(label: impl Into<String>) -> Self {
        ClassLabel(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ClassLabel {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ClassLabel {
    fn from(s: &str) -> Self {
        ClassLabel(s.to_string())
    }
}

impl PartialEq<str> for ClassLabel {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for ClassLabel {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    pub method: ScoringMethod,
    pub classes: Vec<ClassLabel>,
    pub regions: BTreeSet<Region>,
    /// Original literature term (lowercase) to class label.
    pub term_map: BTreeMap<String, ClassLabel>,
}

impl LabelSchema {
    fn build(method: ScoringMethod, rows: &[(&str, &str)]) -> Self {
        LabelSchema {
            method,
            classes: rows.iter().map(|(_, label)| ClassLabel::from(*label)).collect(),
            regions: Region::ANATOMICAL.into_iter().collect(),
            term_map: rows
                .iter()
                .map(|(term, label)| (term.to_string(), ClassLabel::from(*label)))
                .collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.as_str() == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    /// Returns the canonical class label for `label` or a validation error.
    pub fn check_label(&self, label: &str) -> Result<&ClassLabel> {
        self.classes
            .iter()
            .find(|c| c.as_str() == label)
            .ok_or_else(|| {
                Error::Validation(format!("label {label} not in schema {}", self.method))
            })
    }

    pub fn map_term(&self, term: &str) -> Result<&ClassLabel> {
        let key = term.trim().to_lowercase();
        self.term_map.get(&key).ok_or_else(|| Error::UnknownTerm {
            method: self.method.id().to_string(),
            term: term.to_string(),
        })
    }
}

static MEGYESI: LazyLock<LabelSchema> = LazyLock::new(|| {
    LabelSchema::build(
        ScoringMethod::Megyesi,
        &[
            ("fresh", "M-SOD1"),
            ("early decomposition", "M-SOD2"),
            ("advanced decomposition", "M-SOD3"),
            ("skeletonization", "M-SOD4"),
        ],
    )
});

static GELDERMAN: LazyLock<LabelSchema> = LazyLock::new(|| {
    LabelSchema::build(
        ScoringMethod::Gelderman,
        &[
            ("1", "G-SOD1"),
            ("2", "G-SOD2"),
            ("3", "G-SOD3"),
            ("4", "G-SOD4"),
            ("5", "G-SOD5"),
            ("6", "G-SOD6"),
        ],
    )
});

/// Look up a schema by method id (`"megyesi"`, `"gelderman"`).
pub fn get_schema(method: &str) -> Result<&'static LabelSchema> {
    method.parse::<ScoringMethod>().map(ScoringMethod::schema)
}

pub fn map_original_term(method: ScoringMethod, term: &str) -> Result<ClassLabel> {
    method.schema().map_term(term).cloned()
}

/// Find the method whose schema contains `label`. Class labels are globally
/// unique, so at most one matches.
pub fn method_of_label(label: &str) -> Option<ScoringMethod> {
    ScoringMethod::ALL
        .into_iter()
        .find(|m| m.schema().contains(label))
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    method: ScoringMethod,
    classes: Vec<ClassLabel>,
    term_map: BTreeMap<String, ClassLabel>,
}

impl Serialize for LabelSchema {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SchemaDoc {
            method: self.method,
            classes: self.classes.clone(),
            term_map: self.term_map.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelSchema {
    /// Only the two canonical schemas are accepted.
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = SchemaDoc::deserialize(deserializer)?;
        let canonical = doc.method.schema();
        if doc.classes != canonical.classes || doc.term_map != canonical.term_map {
            return Err(serde::de::Error::custom(format!(
                "schema document for {} does not match the canonical class set",
                doc.method
            )));
        }
        Ok(canonical.clone())
    }
}
