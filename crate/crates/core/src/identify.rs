//! Corrupted-meter identification by masking rows and columns of the
//! moment residuals.
//!
//! With weights `w ∈ [0,1]^m` (0 = trusted, 1 = corrupted) the mask is
//! `M = 1 − W`, `W = wwᵀ + w(1−w)ᵀ + (1−w)wᵀ`, which factors as
//! `M = (1−w)(1−w)ᵀ`. The masked objective is therefore the box-constrained
//! quadratic
//!
//! ```text
//! f(w) = Σ_ab G_ab (1−w_a)(1−w_b) + β Σ_a w_a,   G = Σ_τ |Σ_τ(A) − C_τ|
//! ```
//!
//! minimized by projected gradient from several starts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{LearnedCovariance, Moments};
use crate::error::{Error, Result};
use crate::kernel::KernelTensor;
use crate::learning::{fit, FitConfig};
use crate::record::TimeSeriesRecord;

pub const THRESHOLD: f64 = 0.5;

/// `(W, M)` for a weight vector.
pub fn build_mask(w: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if let Some(i) = w.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!(
            "mask weight w[{i}] = {} is outside [0, 1]",
            w[i]
        )));
    }
    let m = w.len();
    let c = w.map(|v| 1.0 - v);
    let mask = &c * c.transpose();
    let big_w = DMatrix::from_element(m, m, 1.0) - &mask;
    Ok((big_w, mask))
}

/// Identification settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Sparsity weight β.
    pub beta: f64,
    /// Lags (s) entering the masked objective.
    pub lags: Vec<f64>,
    /// Random starts in addition to the all-zeros start.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Rounds of re-fitting `A` without the flagged meters (0 = off).
    #[serde(default)]
    pub refine_rounds: usize,
}

fn default_restarts() -> usize {
    8
}
fn default_max_iterations() -> usize {
    10_000
}

impl IdentifyConfig {
    pub fn new(beta: f64, lags: Vec<f64>) -> Self {
        IdentifyConfig {
            beta,
            lags,
            restarts: default_restarts(),
            seed: 0,
            max_iterations: default_max_iterations(),
            refine_rounds: 0,
        }
    }
}

/// Result of identification over the moment meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterWeights {
    /// Generator index of each weight.
    pub meters: Vec<usize>,
    pub w: Vec<f64>,
    pub beta: f64,
    pub binarized: Vec<bool>,
    pub threshold: f64,
    /// Masked objective at `w`.
    pub objective: f64,
}

impl MeterWeights {
    /// Binarizes `w` (strictly above 0.5 means corrupted).
    pub fn from_weights(meters: Vec<usize>, w: Vec<f64>, beta: f64, objective: f64) -> Result<Self> {
        if meters.len() != w.len() {
            return Err(Error::invalid("one weight per meter is required"));
        }
        if let Some(v) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("weight {v} is outside [0, 1]")));
        }
        let binarized = w.iter().map(|&v| v > THRESHOLD).collect();
        Ok(MeterWeights {
            meters,
            w,
            beta,
            binarized,
            threshold: THRESHOLD,
            objective,
        })
    }

    /// Nothing flagged.
    pub fn trusted(meters: Vec<usize>) -> Self {
        let m = meters.len();
        Self::from_weights(meters, vec![0.0; m], 0.0, 0.0).expect("zeros are valid")
    }

    /// Generators flagged as corrupted.
    pub fn flagged(&self) -> Vec<usize> {
        self.meters
            .iter()
            .zip(&self.binarized)
            .filter(|(_, &b)| b)
            .map(|(&g, _)| g)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize weights: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let w: MeterWeights = toml::from_str(text).map_err(|e| Error::config(format!("weights file: {e}")))?;
        if w.meters.len() != w.w.len() || w.binarized.len() != w.w.len() {
            return Err(Error::config("weights file: meters, w and binarized differ in length"));
        }
        Ok(w)
    }
}

/// `G = Σ_τ |R_τ|` over the configured lags, `R_τ` the normalized residuals.
pub fn residual_mass(moments: &Moments, learned: &LearnedCovariance, lags: &[f64]) -> Result<DMatrix<f64>> {
    if lags.is_empty() {
        return Err(Error::config("identification needs at least one lag"));
    }
    let residuals = learned.residuals(moments)?;
    let m = moments.meters().len();
    let mut g = DMatrix::zeros(m, m);
    for &tau in lags {
        let k = moments.lag_index(tau)?;
        g += residuals[k].abs();
    }
    Ok(g)
}

/// Masked objective `f(w)`.
pub fn masked_objective(g: &DMatrix<f64>, w: &DVector<f64>, beta: f64) -> f64 {
    let c = w.map(|v| 1.0 - v);
    (g * &c).dot(&c) + beta * w.sum()
}

fn gradient(g: &DMatrix<f64>, w: &DVector<f64>, beta: f64) -> DVector<f64> {
    let c = w.map(|v| 1.0 - v);
    let h = (g * &c) + (g.transpose() * &c);
    h.map(|v| beta - v)
}

/// Projected gradient with backtracking. Returns the final point, its
/// objective and whether the stationarity test passed.
fn descend(g: &DMatrix<f64>, beta: f64, mut w: DVector<f64>, max_iterations: usize) -> (DVector<f64>, f64, bool) {
    let lip = (g + g.transpose()).abs().row_sum().max().max(1e-12);
    let mut f = masked_objective(g, &w, beta);
    let scale = g.abs().sum().max(beta).max(1e-300);
    for _ in 0..max_iterations {
        let grad = gradient(g, &w, beta);
        let projected = (&w - &grad).map(|v| v.clamp(0.0, 1.0)) - &w;
        if projected.amax() <= 1e-12 {
            return (w, f, true);
        }
        let mut step = 1.0 / lip;
        loop {
            let cand = (&w - &grad * step).map(|v| v.clamp(0.0, 1.0));
            let fc = masked_objective(g, &cand, beta);
            let decrease = grad.dot(&(&w - &cand));
            if fc <= f - 1e-4 * decrease || step < 1e-12 / lip {
                let moved = (&cand - &w).amax();
                let old = f;
                w = cand;
                f = fc;
                if moved <= 1e-14 || (old - fc).abs() <= 1e-15 * scale {
                    return (w, f, true);
                }
                break;
            }
            step *= 0.5;
        }
    }
    (w, f, false)
}

/// Minimizes the masked objective with `A` frozen.
pub fn identify(moments: &Moments, learned: &LearnedCovariance, config: &IdentifyConfig) -> Result<MeterWeights> {
    if !(config.beta > 0.0) {
        return Err(Error::config(format!("β must be positive, got {}", config.beta)));
    }
    let g = residual_mass(moments, learned, &config.lags)?;
    let m = g.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut starts = vec![DVector::zeros(m)];
    for _ in 0..config.restarts {
        starts.push(DVector::from_fn(m, |_, _| rng.random::<f64>()));
    }
    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    for start in starts {
        let (w, f, ok) = descend(&g, config.beta, start, config.max_iterations);
        // Strict improvement only: ties keep the earlier start.
        if best.as_ref().map_or(true, |b| f < b.1) {
            best = Some((w, f, ok));
        }
    }
    let (w, f, ok) = best.expect("at least one start");
    if !ok {
        return Err(Error::numerical(format!(
            "identification did not converge in {} iterations; best objective {f:.6e} at w = {:?}",
            config.max_iterations,
            w.as_slice()
        )));
    }
    let weights = MeterWeights::from_weights(moments.meters().to_vec(), w.iter().copied().collect(), config.beta, f)?;
    if weights.binarized.iter().all(|&b| b) {
        return Err(Error::numerical(format!(
            "every meter was flagged as corrupted at β = {}; increase β",
            config.beta
        )));
    }
    Ok(weights)
}

/// Alternates identification with re-fitting `A` on the unflagged meters,
/// for `config.refine_rounds` rounds or until the flags stop changing.
pub fn identify_refined(
    moments: &Moments,
    learned: &LearnedCovariance,
    fit_config: &FitConfig,
    config: &IdentifyConfig,
) -> Result<(MeterWeights, LearnedCovariance)> {
    let mut weights = identify(moments, learned, config)?;
    let mut current = learned.clone();
    for _ in 0..config.refine_rounds {
        let cfg = FitConfig {
            exclude_meters: weights.flagged(),
            ..fit_config.clone()
        };
        let kernel: &KernelTensor = current.kernel();
        let (refit, _) = fit(moments, kernel, current.basis(), current.model(), &cfg)?;
        let next = identify(moments, &refit, config)?;
        current = refit;
        let same = next.binarized == weights.binarized;
        weights = next;
        if same {
            break;
        }
    }
    Ok((weights, current))
}

/// Drops the columns of flagged meters.
pub fn apply_mask(record: &TimeSeriesRecord, weights: &MeterWeights) -> Result<TimeSeriesRecord> {
    let flagged = weights.flagged();
    if flagged.is_empty() {
        return Ok(record.clone());
    }
    record.drop_meters(&flagged).map_err(|_| {
        Error::invalid("every meter of the record is flagged; nothing is left to condition on")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::RecordMetadata;

    #[test]
    fn mask_of_third_meter() {
        let w = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let (big_w, mask) = build_mask(&w).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == 2 || j == 2 { 1.0 } else { 0.0 };
                assert_eq!(big_w[(i, j)], expect);
                assert_eq!(mask[(i, j)], 1.0 - expect);
            }
        }
    }

    #[test]
    fn mask_extremes_and_range() {
        let (w0, m0) = build_mask(&DVector::zeros(4)).unwrap();
        assert_eq!(w0.amax(), 0.0);
        assert!(m0.iter().all(|&v| v == 1.0));
        let (w1, m1) = build_mask(&DVector::from_element(4, 1.0)).unwrap();
        assert!(w1.iter().all(|&v| v == 1.0));
        assert_eq!(m1.amax(), 0.0);
        assert!(build_mask(&DVector::from_vec(vec![0.2, 1.5])).is_err());
        // M = (1−w)(1−w)ᵀ for fractional w too.
        let w = DVector::from_vec(vec![0.3, 0.9, 0.0]);
        let (_, m) = build_mask(&w).unwrap();
        let c = w.map(|v| 1.0 - v);
        assert!((m - &c * c.transpose()).amax() < 1e-15);
    }

    fn exhaustive(g: &DMatrix<f64>, beta: f64) -> (Vec<bool>, f64) {
        let m = g.nrows();
        let mut best = (vec![false; m], f64::INFINITY);
        for bits in 0u32..(1 << m) {
            let w = DVector::from_fn(m, |i, _| ((bits >> i) & 1) as f64);
            let f = masked_objective(g, &w, beta);
            if f < best.1 {
                best = ((0..m).map(|i| (bits >> i) & 1 == 1).collect(), f);
            }
        }
        best
    }

    #[test]
    fn descent_matches_exhaustive_on_planted_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let m = 6;
            let bad = trial % m;
            let g = DMatrix::from_fn(m, m, |i, j| {
                let base = 0.02 * rng.random::<f64>();
                if i == bad || j == bad { base + 0.5 } else { base }
            });
            let (oracle, fo) = exhaustive(&g, 0.8);
            let w = descend(&g, 0.8, DVector::zeros(m), 10_000).0;
            let flags: Vec<bool> = w.iter().map(|&v| v > 0.5).collect();
            assert_eq!(flags, oracle);
            assert!((masked_objective(&g, &w, 0.8) - fo).abs() < 1e-9);
            assert!(flags[bad] && flags.iter().filter(|&&b| b).count() == 1);
        }
    }

    #[test]
    fn larger_beta_flags_fewer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(7, 7, |i, j| rng.random::<f64>() * (1.0 + (i + j) as f64 * 0.1));
        let mut prev = usize::MAX;
        for beta in [0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let (w, ..) = (0..9)
                .map(|s| {
                    let start = if s == 0 { DVector::zeros(7) } else { DVector::from_fn(7, |_, _| rng.random::<f64>()) };
                    descend(&g, beta, start, 10_000)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let count = w.iter().filter(|&&v| v > 0.5).count();
            assert!(count <= prev, "β={beta}: {count} > {prev}");
            prev = count;
        }
    }

    #[test]
    fn beta_compares_against_row_mass() {
        // Flagging the planted meter saves 2·6·1 − 1 = 11.
        let g = DMatrix::from_fn(6, 6, |i, j| if i == 4 || j == 4 { 1.0 } else { 0.001 });
        for (beta, flagged) in [(6.0, true), (17.0, false)] {
            let (oracle, _) = exhaustive(&g, beta);
            let w = descend(&g, beta, DVector::zeros(6), 10_000).0;
            let flags: Vec<bool> = w.iter().map(|&v| v > 0.5).collect();
            assert_eq!(flags, oracle);
            assert_eq!(flags[4], flagged, "β = {beta}");
            assert_eq!(flags.iter().filter(|&&b| b).count(), flagged as usize);
        }
        let config: IdentifyConfig = toml::from_str("beta = 17.0\nlags = [0.0, 0.1]\n").unwrap();
        assert_eq!(config.beta, 17.0);
    }

    #[test]
    fn weights_binarize_strictly() {
        let w = MeterWeights::from_weights(vec![4, 7, 9], vec![0.5, 0.51, 0.0], 1.0, 0.0).unwrap();
        assert_eq!(w.binarized, vec![false, true, false]);
        assert_eq!(w.flagged(), vec![7]);
        assert!(MeterWeights::from_weights(vec![1], vec![1.2], 1.0, 0.0).is_err());
    }

    #[test]
    fn masking_records() {
        let rec = TimeSeriesRecord::new(
            DMatrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64),
            10.0,
            0.0,
            (0..5).collect(),
            (0..5).map(|i| format!("g{i}")).collect(),
            RecordMetadata::default(),
        )
        .unwrap();
        let none = MeterWeights::trusted((0..5).collect());
        assert_eq!(apply_mask(&rec, &none).unwrap(), rec);
        let third = MeterWeights::from_weights((0..5).collect(), vec![0.0, 0.0, 1.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        let masked = apply_mask(&rec, &third).unwrap();
        assert_eq!(masked.meter_set(), &[0, 1, 3, 4]);
        let other = MeterWeights::from_weights((0..5).collect(), vec![1.0, 0.0, 0.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        let union = MeterWeights::from_weights((0..5).collect(), vec![1.0, 0.0, 1.0, 0.0, 0.0], 1.0, 0.0).unwrap();
        let twice = apply_mask(&masked, &other).unwrap();
        assert_eq!(twice, apply_mask(&rec, &union).unwrap());
        let all = MeterWeights::from_weights((0..5).collect(), vec![1.0; 5], 1.0, 0.0).unwrap();
        assert!(apply_mask(&rec, &all).is_err());
    }
}
