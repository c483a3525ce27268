use crate::error::{Error, Result};

/// Probability distribution over classes from raw scores. The maximum is
/// subtracted first; softmax is shift-invariant so the result is unchanged.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidLogits("empty logit vector".into()));
    }
    if let Some((i, v)) = z.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidLogits(format!("entry {i} is {v}")));
    }
    Ok(softmax_unchecked(z))
}

pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
