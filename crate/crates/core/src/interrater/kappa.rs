//! Fleiss' kappa for a fixed number of raters per item, with the
//! Fleiss–Nee–Landis (1979) large-sample standard error, a two-sided normal
//! test and a 95% confidence interval.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::labelspec::ClassLabel;

/// z quantile of the two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// `counts[i][j]` is the number of raters who put item `i` in category `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub items: Vec<String>,
    pub raters: usize,
    pub categories: Vec<ClassLabel>,
    pub counts: Vec<Vec<u32>>,
}

impl RatingMatrix {
    /// Checks shape and that every row sums to the same rater count.
    pub fn new(items: Vec<String>, categories: Vec<ClassLabel>, counts: Vec<Vec<u32>>) -> Result<Self> {
        if items.len() != counts.len() {
            return Err(Error::Validation(format!(
                "{} item ids for {} count rows",
                items.len(),
                counts.len()
            )));
        }
        if categories.is_empty() {
            return Err(Error::Validation("rating matrix needs at least one category".into()));
        }
        let mut raters = None;
        for (i, row) in counts.iter().enumerate() {
            if row.len() != categories.len() {
                return Err(Error::Validation(format!(
                    "row {i} has {} columns, expected {}",
                    row.len(),
                    categories.len()
                )));
            }
            let n: u32 = row.iter().sum();
            match raters {
                None => raters = Some(n),
                Some(m) if m != n => {
                    return Err(Error::Validation(format!(
                        "row {i} sums to {n} but earlier rows sum to {m}; raters per item must be constant"
                    )))
                }
                _ => {}
            }
        }
        Ok(RatingMatrix {
            items,
            raters: raters.unwrap_or(0) as usize,
            categories,
            counts,
        })
    }

    /// Matrix with generated item ids `item-0`, `item-1`, ...
    pub fn from_counts(categories: Vec<ClassLabel>, counts: Vec<Vec<u32>>) -> Result<Self> {
        let items = (0..counts.len()).map(|i| format!("item-{i}")).collect();
        Self::new(items, categories, counts)
    }

    pub fn num_items(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementLevel {
    AlmostPerfect,
    Substantial,
    Moderate,
    Fair,
    Slight,
    None,
}

impl AgreementLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            AgreementLevel::AlmostPerfect => "almost perfect",
            AgreementLevel::Substantial => "substantial",
            AgreementLevel::Moderate => "moderate",
            AgreementLevel::Fair => "fair",
            AgreementLevel::Slight => "slight",
            AgreementLevel::None => "no agreement",
        }
    }
}

impl fmt::Display for AgreementLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Landis–Koch banding; every threshold is inclusive on its lower edge.
pub fn interpret_kappa(kappa: f64) -> Result<AgreementLevel> {
    if !(-1.0..=1.0).contains(&kappa) {
        return Err(Error::Validation(format!("kappa {kappa} outside [-1, 1]")));
    }
    Ok(match kappa {
        k if k >= 0.8 => AgreementLevel::AlmostPerfect,
        k if k >= 0.6 => AgreementLevel::Substantial,
        k if k >= 0.4 => AgreementLevel::Moderate,
        k if k >= 0.2 => AgreementLevel::Fair,
        k if k >= 0.0 => AgreementLevel::Slight,
        _ => AgreementLevel::None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: AgreementLevel,
    pub items: usize,
    pub raters: usize,
    pub observed_agreement: f64,
    pub expected_agreement: f64,
}

pub fn fleiss_kappa(matrix: &RatingMatrix) -> Result<KappaResult> {
    let n = matrix.raters;
    let big_n = matrix.num_items();
    if n < 2 {
        return Err(Error::Validation(format!("kappa needs at least 2 raters per item, got {n}")));
    }
    if big_n < 2 {
        return Err(Error::Validation(format!("kappa needs at least 2 items, got {big_n}")));
    }
    let nf = n as f64;
    let total = big_n as f64 * nf;

    // Per-item agreement P_i and its mean.
    let p_bar = matrix
        .counts
        .iter()
        .map(|row| {
            let sq: u64 = row.iter().map(|&c| c as u64 * c as u64).sum();
            (sq as f64 - nf) / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / big_n as f64;

    // Category proportions p_j.
    let p: Vec<f64> = (0..matrix.categories.len())
        .map(|j| matrix.counts.iter().map(|row| row[j] as u64).sum::<u64>() as f64 / total)
        .collect();
    let p_e: f64 = p.iter().map(|pj| pj * pj).sum();
    let sum_pq: f64 = p.iter().map(|pj| pj * (1.0 - pj)).sum();
    if sum_pq <= 0.0 {
        return Err(Error::DegenerateAgreement);
    }

    let kappa = (p_bar - p_e) / (1.0 - p_e);
    let sum_pq_q_minus_p: f64 = p.iter().map(|pj| pj * (1.0 - pj) * (1.0 - 2.0 * pj)).sum();
    let var = 2.0 / (sum_pq * sum_pq * total * (nf - 1.0)) * (sum_pq * sum_pq - sum_pq_q_minus_p);
    let se = var.max(0.0).sqrt();
    let z = kappa / se;
    let p_value = if se > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z.abs())).min(1.0)
    } else if kappa == 0.0 {
        1.0
    } else {
        0.0
    };

    Ok(KappaResult {
        kappa,
        se,
        z,
        p_value,
        ci_low: kappa - Z_95 * se,
        ci_high: kappa + Z_95 * se,
        level: interpret_kappa(kappa.clamp(-1.0, 1.0))?,
        items: big_n,
        raters: n,
        observed_agreement: p_bar,
        expected_agreement: p_e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> Vec<ClassLabel> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn unanimous_two_categories_is_one() {
        let m = RatingMatrix::from_counts(ab(), vec![vec![3, 0], vec![3, 0], vec![0, 3], vec![0, 3]]).unwrap();
        let r = fleiss_kappa(&m).unwrap();
        assert_eq!(r.kappa, 1.0);
        assert_eq!(r.level, AgreementLevel::AlmostPerfect);
    }

    #[test]
    fn hand_computed_fixture() {
        // AAA, AAB, BBB: P-bar = 7/9, Pe = 41/81, kappa = 22/40.
        let m = RatingMatrix::from_counts(ab(), vec![vec![3, 0], vec![2, 1], vec![0, 3]]).unwrap();
        let r = fleiss_kappa(&m).unwrap();
        assert!((r.kappa - 0.55).abs() < 1e-12);
        assert!((r.observed_agreement - 7.0 / 9.0).abs() < 1e-12);
        assert!((r.expected_agreement - 41.0 / 81.0).abs() < 1e-12);
        assert!(r.ci_low <= r.kappa && r.kappa <= r.ci_high);
    }

    #[test]
    fn single_category_is_degenerate() {
        let m = RatingMatrix::from_counts(ab(), vec![vec![3, 0], vec![3, 0]]).unwrap();
        assert!(matches!(fleiss_kappa(&m), Err(Error::DegenerateAgreement)));
    }

    #[test]
    fn shape_checks() {
        assert!(RatingMatrix::from_counts(ab(), vec![vec![3, 0], vec![1, 1]]).is_err());
        let one_rater = RatingMatrix::from_counts(ab(), vec![vec![1, 0], vec![0, 1]]).unwrap();
        assert!(fleiss_kappa(&one_rater).is_err());
        let one_item = RatingMatrix::from_counts(ab(), vec![vec![2, 1]]).unwrap();
        assert!(fleiss_kappa(&one_item).is_err());
    }

    #[test]
    fn landis_koch_bands() {
        use AgreementLevel::*;
        let cases = [
            (1.0, AlmostPerfect),
            (0.8, AlmostPerfect),
            (0.7999, Substantial),
            (0.67, Substantial),
            (0.637, Substantial),
            (0.6, Substantial),
            (0.593, Moderate),
            (0.558, Moderate),
            (0.4, Moderate),
            (0.2, Fair),
            (0.0, Slight),
            (-0.1, None),
            (-1.0, None),
        ];
        for (k, level) in cases {
            assert_eq!(interpret_kappa(k).unwrap(), level, "kappa {k}");
        }
        assert!(interpret_kappa(1.01).is_err());
        assert!(interpret_kappa(f64::NAN).is_err());
    }

    #[test]
    fn unused_category_does_not_change_kappa() {
        let two = RatingMatrix::from_counts(ab(), vec![vec![3, 0], vec![2, 1], vec![1, 2]]).unwrap();
        let three = RatingMatrix::from_counts(
            vec!["A".into(), "B".into(), "C".into()],
            vec![vec![3, 0, 0], vec![2, 1, 0], vec![1, 2, 0]],
        )
        .unwrap();
        let (a, b) = (fleiss_kappa(&two).unwrap(), fleiss_kappa(&three).unwrap());
        assert!((a.kappa - b.kappa).abs() < 1e-15);
        assert!((a.se - b.se).abs() < 1e-15);
    }
}
