use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::labelspec::Region;

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ClassifierError(pub String);

/// Seam for an upstream body-part model. Implementations return the detected
/// region and a confidence in `[0, 1]`.
pub trait BodyPartClassifier: Send + Sync {
    fn classify(
        &self,
        manifest: &DatasetManifest,
        record: &ImageRecord,
    ) -> std::result::Result<(Region, f64), ClassifierError>;
}

/// Trusts the `region` already stored on each record with full confidence.
#[derive(Debug, Default, Clone, Copy)]
pub struct MetadataClassifier;

impl BodyPartClassifier for MetadataClassifier {
    fn classify(
        &self,
        _manifest: &DatasetManifest,
        record: &ImageRecord,
    ) -> std::result::Result<(Region, f64), ClassifierError> {
        Ok((record.region, 1.0))
    }
}

impl<F> BodyPartClassifier for F
where
    F: Fn(&ImageRecord) -> std::result::Result<(Region, f64), ClassifierError> + Send + Sync,
{
    fn classify(
        &self,
        _manifest: &DatasetManifest,
        record: &ImageRecord,
    ) -> std::result::Result<(Region, f64), ClassifierError> {
        self(record)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub input: usize,
    pub head: usize,
    pub torso: usize,
    pub limbs: usize,
    pub dropped_unknown: usize,
    pub dropped_low_confidence: usize,
    pub failed: usize,
    pub failed_ids: Vec<String>,
}

impl FilterSummary {
    pub fn retained(&self) -> usize {
        self.head + self.torso + self.limbs
    }

    pub fn dropped(&self) -> usize {
        self.dropped_unknown + self.dropped_low_confidence + self.failed
    }
}

#[derive(Debug, Clone)]
pub struct RegionManifests {
    pub head: DatasetManifest,
    pub torso: DatasetManifest,
    pub limbs: DatasetManifest,
    pub summary: FilterSummary,
}

impl RegionManifests {
    pub fn get(&self, region: Region) -> Option<&DatasetManifest> {
        match region {
            Region::Head => Some(&self.head),
            Region::Torso => Some(&self.torso),
            Region::Limbs => Some(&self.limbs),
            Region::Unknown => None,
        }
    }
}

/// Routes each record into the manifest of its detected region. Records that
/// are classified `unknown`, fall below `min_confidence`, or make the
/// classifier fail are dropped and counted. More than half failing aborts.
pub fn filter_body_parts(
    manifest: &DatasetManifest,
    classifier: &dyn BodyPartClassifier,
    min_confidence: f64,
) -> Result<RegionManifests> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(Error::Validation(format!(
            "min_confidence {min_confidence} outside [0, 1]"
        )));
    }
    let mut summary = FilterSummary {
        input: manifest.len(),
        ..Default::default()
    };
    let (mut head, mut torso, mut limbs) = (Vec::new(), Vec::new(), Vec::new());

    for record in &manifest.records {
        let (region, confidence) = match classifier.classify(manifest, record) {
            Ok((region, c)) if c.is_finite() && (0.0..=1.0).contains(&c) => (region, c),
            Ok((_, c)) => {
                log::warn!("{}: classifier returned confidence {c}", record.image_id);
                summary.failed += 1;
                summary.failed_ids.push(record.image_id.clone());
                continue;
            }
            Err(e) => {
                log::warn!("{}: body-part classification failed: {e}", record.image_id);
                summary.failed += 1;
                summary.failed_ids.push(record.image_id.clone());
                continue;
            }
        };
        if region == Region::Unknown {
            summary.dropped_unknown += 1;
            continue;
        }
        if confidence < min_confidence {
            summary.dropped_low_confidence += 1;
            continue;
        }
        let mut r = record.clone();
        r.region = region;
        match region {
            Region::Head => head.push(r),
            Region::Torso => torso.push(r),
            Region::Limbs => limbs.push(r),
            Region::Unknown => unreachable!(),
        }
    }

    if summary.failed * 2 > summary.input {
        return Err(Error::ClassifierAborted {
            failures: summary.failed,
            total: summary.input,
        });
    }
    summary.head = head.len();
    summary.torso = torso.len();
    summary.limbs = limbs.len();

    let wrap = |records: Vec<ImageRecord>, region: Region| {
        let mut m = manifest.with_records(records);
        m.provenance.append(
            &format!("filter_body_parts(region={region}, min_confidence={min_confidence})"),
            None,
        );
        m
    };
    Ok(RegionManifests {
        head: wrap(head, Region::Head),
        torso: wrap(torso, Region::Torso),
        limbs: wrap(limbs, Region::Limbs),
        summary,
    })
}
