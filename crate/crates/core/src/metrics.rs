//! Scores for predictions and meter identification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(Σ_t (est − actual)² / T) / (max actual − min actual)`.
pub fn normalized_rmse(estimate: &[f64], actual: &[f64]) -> Result<f64> {
    if estimate.len() != actual.len() || actual.is_empty() {
        return Err(Error::invalid(format!(
            "series lengths differ or are empty ({} vs {})",
            estimate.len(),
            actual.len()
        )));
    }
    let (lo, hi) = actual
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::invalid("actual series is constant; normalized RMSE is undefined"));
    }
    let sse: f64 = estimate.iter().zip(actual).map(|(e, a)| (e - a) * (e - a)).sum();
    Ok((sse / actual.len() as f64).sqrt() / range)
}

/// Set agreement between flagged and truly corrupted meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationScore {
    /// `|flags ∩ truth| / |flags|`, 1 when nothing is flagged.
    pub precision: f64,
    /// `|flags ∩ truth| / |truth|`, 1 when nothing is corrupted.
    pub recall: f64,
    pub exact_match: bool,
}

pub fn score_identification(flags: &[usize], truth: &[usize]) -> IdentificationScore {
    let mut f: Vec<usize> = flags.to_vec();
    let mut t: Vec<usize> = truth.to_vec();
    f.sort_unstable();
    f.dedup();
    t.sort_unstable();
    t.dedup();
    let hits = f.iter().filter(|g| t.binary_search(g).is_ok()).count() as f64;
    IdentificationScore {
        precision: if f.is_empty() { 1.0 } else { hits / f.len() as f64 },
        recall: if t.is_empty() { 1.0 } else { hits / t.len() as f64 },
        exact_match: f == t,
    }
}
