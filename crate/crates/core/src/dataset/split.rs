use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SplitRole};
use crate::error::{Error, Result};
use crate::labelspec::ScoringMethod;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Per-class shuffle; each class contributes `round(ratio * n)` train images.
    #[default]
    StratifiedImage,
    /// Whole donors go to one side, so no donor leaks across the split.
    DonorGrouped,
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitStrategy::StratifiedImage => "stratified_image",
            SplitStrategy::DonorGrouped => "donor_grouped",
        })
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().replace('-', "_").as_str() {
            "stratified_image" => Ok(SplitStrategy::StratifiedImage),
            "donor_grouped" => Ok(SplitStrategy::DonorGrouped),
            other => Err(Error::Validation(format!("unknown split strategy `{other}`"))),
        }
    }
}

fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

/// Assigns every labeled, non-excluded record to train or test.
pub fn split(
    manifest: &DatasetManifest,
    method: ScoringMethod,
    ratio: f64,
    strategy: SplitStrategy,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let schema = method.schema();
    let eligible: Vec<_> = manifest.records.iter().filter(|r| !r.is_excluded()).collect();
    if eligible.is_empty() {
        return Err(Error::NoData);
    }

    // Group by class in schema order so shuffles are independent of record order
    // within a class only through the seed.
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for r in &eligible {
        let label = r.label(method).ok_or_else(|| Error::MissingLabel {
            image_id: r.image_id.clone(),
            method: method.id().to_string(),
        })?;
        let idx = schema.check_label(label.as_str())?;
        let idx = schema.index_of(idx.as_str()).expect("checked above");
        by_class.entry(idx).or_default().push(&r.image_id);
    }
    for (idx, ids) in &by_class {
        if ids.len() < 2 {
            return Err(Error::UnsplittableClass {
                class: schema.classes[*idx].to_string(),
                count: ids.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    match strategy {
        SplitStrategy::StratifiedImage => {
            for ids in by_class.values_mut() {
                ids.shuffle(&mut rng);
                let n_train = train_count(ids.len(), ratio);
                for (i, id) in ids.iter().enumerate() {
                    let role = if i < n_train { SplitRole::Train } else { SplitRole::Test };
                    assignment.insert(id.to_string(), role);
                }
            }
        }
        SplitStrategy::DonorGrouped => {
            let donors: BTreeSet<&str> = eligible.iter().map(|r| r.donor_id.as_str()).collect();
            if donors.len() < 2 {
                return Err(Error::Validation(format!(
                    "donor_grouped split needs at least 2 donors, found {}",
                    donors.len()
                )));
            }
            let mut donors: Vec<&str> = donors.into_iter().collect();
            donors.shuffle(&mut rng);
            let n_train = train_count(donors.len(), ratio);
            let train: BTreeSet<&str> = donors[..n_train].iter().copied().collect();
            for r in &eligible {
                let role = if train.contains(r.donor_id.as_str()) {
                    SplitRole::Train
                } else {
                    SplitRole::Test
                };
                assignment.insert(r.image_id.clone(), role);
            }
        }
    }

    let mut out = manifest.clone();
    out.split = Some(assignment);
    if !out.schema_refs.iter().any(|s| s.method == method) {
        out.schema_refs.push(schema.clone());
    }
    out.provenance.append(
        &format!("split(method={method}, ratio={ratio}, strategy={strategy}, seed={seed})"),
        Some(seed),
    );
    Ok(out)
}
