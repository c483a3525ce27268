use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

/// Picks `donor_count` donors uniformly at random and keeps every record of
/// those donors, so each donor's full time series survives.
pub fn sample_donors(manifest: &DatasetManifest, donor_count: usize, seed: u64) -> Result<DatasetManifest> {
    let donors = manifest.donors();
    if donor_count == 0 {
        return Err(Error::Validation("donor_count must be positive".into()));
    }
    if donor_count > donors.len() {
        return Err(Error::InsufficientDonors {
            requested: donor_count,
            available: donors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<&str> = donors
        .choose_multiple(&mut rng, donor_count)
        .copied()
        .collect();
    let records = manifest
        .records
        .iter()
        .filter(|r| chosen.contains(r.donor_id.as_str()))
        .cloned()
        .collect();
    let mut out = manifest.with_records(records);
    out.provenance
        .append(&format!("sample_donors(k={donor_count}, seed={seed})"), Some(seed));
    Ok(out)
}
