use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::kappa::{fleiss_kappa, KappaResult, RatingMatrix};
use super::session::StudySession;
use crate::error::{Error, Result};
use crate::labelspec::ScoringMethod;

/// Counts per study image over the selected raters. Categories are always the
/// full class set of the method.
pub fn build_rating_matrix(session: &StudySession, raters: &[String], method: ScoringMethod) -> Result<RatingMatrix> {
    if raters.len() < 2 {
        return Err(Error::Validation(format!(
            "a rating matrix needs at least 2 raters, got {}",
            raters.len()
        )));
    }
    for (i, r) in raters.iter().enumerate() {
        session.rater(r)?;
        if raters[..i].contains(r) {
            return Err(Error::Validation(format!("rater {r} listed twice")));
        }
    }
    for r in raters {
        let missing = session.missing(r, method);
        if !missing.is_empty() {
            return Err(Error::Incomplete {
                rater: r.clone(),
                method: method.id().to_string(),
                missing,
            });
        }
    }
    let schema = method.schema();
    let counts = session
        .image_ids
        .iter()
        .map(|img| {
            let mut row = vec![0u32; schema.num_classes()];
            for r in raters {
                let label = session.label_of(r, img, method).expect("completeness checked");
                row[schema.index_of(label.as_str()).expect("labels are schema-checked")] += 1;
            }
            row
        })
        .collect();
    RatingMatrix::new(session.image_ids.clone(), schema.classes.clone(), counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub method: ScoringMethod,
    /// `human-human` or `ai-human`.
    pub agreement: String,
    pub raters: Vec<String>,
    pub result: KappaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementComparison {
    pub human_human: AgreementRow,
    pub ai_human: AgreementRow,
}

/// Kappa over all humans next to kappa with the model standing in for
/// `replaced`.
pub fn compare_agreements(
    session: &StudySession,
    humans: &[String],
    model: &str,
    replaced: &str,
    method: ScoringMethod,
) -> Result<AgreementComparison> {
    if !humans.iter().any(|h| h == replaced) {
        return Err(Error::Validation(format!(
            "replaced rater {replaced} is not among the human raters"
        )));
    }
    if humans.iter().any(|h| h == model) {
        return Err(Error::Validation(format!("model rater {model} is listed as a human")));
    }
    let ai: Vec<String> = humans
        .iter()
        .map(|h| if h == replaced { model.to_string() } else { h.clone() })
        .collect();
    let row = |agreement: &str, raters: Vec<String>| -> Result<AgreementRow> {
        let result = fleiss_kappa(&build_rating_matrix(session, &raters, method)?)?;
        Ok(AgreementRow {
            method,
            agreement: agreement.to_string(),
            raters,
            result,
        })
    };
    Ok(AgreementComparison {
        human_human: row("human-human", humans.to_vec())?,
        ai_human: row("ai-human", ai)?,
    })
}

/// Three decimals without the leading zero.
fn short(x: f64) -> String {
    let s = format!("{x:.3}");
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

fn p_text(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        short(p)
    }
}

/// Plain-text agreement table: one line per row with kappa, p, CI and level.
pub fn agreement_table(rows: &[AgreementRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<17} {:<12} {:>7} {:>7} {:>8} {:>8}  {}",
        "method", "agreement", "kappa", "p", "ci_low", "ci_high", "level"
    );
    for r in rows {
        let k = &r.result;
        let _ = writeln!(
            out,
            "{:<17} {:<12} {:>7} {:>7} {:>8} {:>8}  {}",
            r.method.display_name(),
            r.agreement,
            short(k.kappa),
            p_text(k.p_value),
            short(k.ci_low),
            short(k.ci_high),
            k.level
        );
    }
    out
}

impl AgreementComparison {
    pub fn rows(&self) -> [&AgreementRow; 2] {
        [&self.human_human, &self.ai_human]
    }

    pub fn to_table(&self) -> String {
        agreement_table(&[self.human_human.clone(), self.ai_human.clone()])
    }
}
