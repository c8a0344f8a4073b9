//! Gaussian-process conditioning of unmetered generator speeds on metered
//! ones over a window of ticks.
//!
//! Observations and targets are stacked time-major: entry `t·m + i` is
//! signal `i` at tick `t`. With that ordering the observed covariance is
//! block-Toeplitz with `m × m` blocks `Σ_{(t−s)Δ}`, and the leading
//! `k·m` rows and columns are the covariance of the first `k` ticks, so a
//! single Cholesky factor serves every shorter window as well.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::covariance::LearnedCovariance;
use crate::error::{Error, Result};
use crate::identify::{apply_mask, MeterWeights};
use crate::kernel::kernel_matrix;
use crate::record::{write_columns, TimeSeriesRecord};

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Joint Gaussian of observations `x₁` and targets `x₂`.
#[derive(Clone)]
pub struct JointBlocks {
    /// Observed covariance including `jitter` on the diagonal.
    pub sigma11: DMatrix<f64>,
    pub sigma21: DMatrix<f64>,
    pub sigma22: DMatrix<f64>,
    pub mu1: DVector<f64>,
    pub mu2: DVector<f64>,
    /// Absolute diagonal regularization added to `sigma11`.
    pub jitter: f64,
    chol: Cholesky<f64, Dyn>,
}

impl std::fmt::Debug for JointBlocks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JointBlocks")
            .field("observed", &self.sigma11.nrows())
            .field("targets", &self.sigma22.nrows())
            .field("jitter", &self.jitter)
            .finish()
    }
}

/// Adds `jitter·I` with `jitter = c·trace/dim`, `c = 1e-8, 1e-7, …, 1e-4`,
/// until the Cholesky factorization succeeds.
fn factor_with_jitter(mut sigma11: DMatrix<f64>) -> Result<(DMatrix<f64>, f64, Cholesky<f64, Dyn>)> {
    let dim = sigma11.nrows();
    if dim == 0 {
        return Err(Error::invalid("no observations to condition on"));
    }
    let base = (sigma11.trace() / dim as f64).abs().max(f64::MIN_POSITIVE);
    let mut c = JITTER_START;
    let mut applied = 0.0;
    while c <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = c * base;
        for i in 0..dim {
            sigma11[(i, i)] += jitter - applied;
        }
        applied = jitter;
        if let Some(chol) = sigma11.clone().cholesky() {
            return Ok((sigma11, jitter, chol));
        }
        c *= 10.0;
    }
    Err(Error::numerical(format!(
        "the {dim} × {dim} observed covariance is not positive definite even with jitter {:.1e} × trace/dim",
        JITTER_MAX
    )))
}

impl JointBlocks {
    /// Validates shapes, adds jitter to `sigma11` and factors it.
    pub fn from_parts(
        sigma11: DMatrix<f64>,
        sigma21: DMatrix<f64>,
        sigma22: DMatrix<f64>,
        mu1: DVector<f64>,
        mu2: DVector<f64>,
    ) -> Result<Self> {
        let (n1, n2) = (sigma11.nrows(), sigma22.nrows());
        if sigma11.ncols() != n1 || sigma22.ncols() != n2 || sigma21.shape() != (n2, n1) {
            return Err(Error::invalid(format!(
                "block shapes do not fit: Σ11 {:?}, Σ21 {:?}, Σ22 {:?}",
                sigma11.shape(),
                sigma21.shape(),
                sigma22.shape()
            )));
        }
        if mu1.len() != n1 || mu2.len() != n2 {
            return Err(Error::invalid("mean vectors do not match the block sizes"));
        }
        let (sigma11, jitter, chol) = factor_with_jitter(sigma11)?;
        Ok(JointBlocks {
            sigma11,
            sigma21,
            sigma22,
            mu1,
            mu2,
            jitter,
            chol,
        })
    }

    /// Lower Cholesky factor of `sigma11`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn observed_dim(&self) -> usize {
        self.sigma11.nrows()
    }

    pub fn target_dim(&self) -> usize {
        self.sigma22.nrows()
    }
}

/// `μ₂ + Σ₂₁ Σ₁₁⁻¹ (x₁ − μ₁)`.
pub fn conditional_mean(blocks: &JointBlocks, x1: &DVector<f64>) -> Result<DVector<f64>> {
    if x1.len() != blocks.observed_dim() {
        return Err(Error::invalid(format!(
            "observation vector has length {}, expected {}",
            x1.len(),
            blocks.observed_dim()
        )));
    }
    let alpha = blocks.chol.solve(&(x1 - &blocks.mu1));
    Ok(&blocks.mu2 + &blocks.sigma21 * alpha)
}

/// `Σ₂₂ − Σ₂₁ Σ₁₁⁻¹ Σ₂₁ᵀ`, symmetrized.
pub fn conditional_cov(blocks: &JointBlocks) -> Result<DMatrix<f64>> {
    let y = blocks.chol.l_dirty().solve_lower_triangular(&blocks.sigma21.transpose()).ok_or_else(|| {
        Error::numerical("triangular solve with the observed covariance factor failed")
    })?;
    let cov = &blocks.sigma22 - y.transpose() * y;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Lagged covariance pieces for one set of observed meters and target
/// functionals (rows of `F`, each a linear combination of generator speeds).
struct LagTable {
    /// `E[z(t+kΔ) z(t)ᵀ]`
    obs: Vec<DMatrix<f64>>,
    /// `E[x(t+kΔ) z(t)ᵀ]`
    tgt_obs: Vec<DMatrix<f64>>,
    /// `E[z(t+kΔ) x(t)ᵀ]`
    obs_tgt: Vec<DMatrix<f64>>,
    /// `E[x(t+kΔ) x(t)ᵀ]`
    tgt: Vec<DMatrix<f64>>,
}

fn lag_table(
    learned: &LearnedCovariance,
    meters: &[usize],
    functionals: &DMatrix<f64>,
    ticks: usize,
    dt: f64,
) -> Result<LagTable> {
    let p = learned.projector();
    let pm = p.select_rows(meters);
    let pf = functionals * p;
    let mut table = LagTable {
        obs: Vec::with_capacity(ticks),
        tgt_obs: Vec::with_capacity(ticks),
        obs_tgt: Vec::with_capacity(ticks),
        tgt: Vec::with_capacity(ticks),
    };
    for k in 0..ticks {
        let inner = learned.a().component_mul(&kernel_matrix(learned.basis(), k as f64 * dt)?);
        let left_m = &pm * &inner;
        let left_f = &pf * &inner;
        table.obs.push(&left_m * pm.transpose());
        table.obs_tgt.push(&left_m * pf.transpose());
        table.tgt_obs.push(&left_f * pm.transpose());
        table.tgt.push(&left_f * pf.transpose());
    }
    Ok(table)
}

/// Block-Toeplitz assembly from per-lag blocks: block `(t, s)` is
/// `fwd[t−s]` for `t ≥ s` and `bwd[s−t]ᵀ` otherwise.
fn toeplitz(fwd: &[DMatrix<f64>], bwd: &[DMatrix<f64>], ticks: usize) -> DMatrix<f64> {
    let (r, c) = fwd[0].shape();
    let mut out = DMatrix::zeros(r * ticks, c * ticks);
    for t in 0..ticks {
        for s in 0..ticks {
            let mut view = out.view_mut((t * r, s * c), (r, c));
            if t >= s {
                view.copy_from(&fwd[t - s]);
            } else {
                view.copy_from(&bwd[s - t].transpose());
            }
        }
    }
    out
}

/// Blocks for observed `meters` and target linear functionals over `ticks`
/// ticks spaced `dt` apart.
pub fn assemble_functional_blocks(
    learned: &LearnedCovariance,
    meters: &[usize],
    functionals: &DMatrix<f64>,
    ticks: usize,
    dt: f64,
) -> Result<JointBlocks> {
    if ticks == 0 {
        return Err(Error::invalid("at least one tick is required"));
    }
    if meters.is_empty() {
        return Err(Error::invalid("at least one observed meter is required"));
    }
    let n = learned.model().n();
    if functionals.ncols() != n || functionals.nrows() == 0 {
        return Err(Error::invalid(format!("target functionals must be q × {n} with q ≥ 1")));
    }
    if let Some(&g) = meters.iter().find(|&&g| g >= n) {
        return Err(Error::invalid(format!("meter {g} is outside the {n}-generator model")));
    }
    let table = lag_table(learned, meters, functionals, ticks, dt)?;
    let sigma11 = toeplitz(&table.obs, &table.obs, ticks);
    // E[x(t) z(s)ᵀ]: forward tgt_obs[t−s]; for t < s it is E[z(s) x(t)ᵀ]ᵀ.
    let sigma21 = toeplitz(&table.tgt_obs, &table.obs_tgt, ticks);
    let sigma22 = toeplitz(&table.tgt, &table.tgt, ticks);
    let (n1, n2) = (sigma11.nrows(), sigma22.nrows());
    JointBlocks::from_parts(sigma11, sigma21, sigma22, DVector::zeros(n1), DVector::zeros(n2))
}

/// Blocks for observed `meters` and target generators.
pub fn assemble_blocks(
    learned: &LearnedCovariance,
    meters: &[usize],
    targets: &[usize],
    ticks: usize,
    dt: f64,
) -> Result<JointBlocks> {
    let f = selector_functionals(targets, learned.model().n())?;
    assemble_functional_blocks(learned, meters, &f, ticks, dt)
}

pub(crate) fn selector_functionals(targets: &[usize], n: usize) -> Result<DMatrix<f64>> {
    if targets.is_empty() {
        return Err(Error::invalid("at least one target is required"));
    }
    let mut f = DMatrix::zeros(targets.len(), n);
    for (k, &g) in targets.iter().enumerate() {
        if g >= n {
            return Err(Error::invalid(format!("target {g} is outside the {n}-generator model")));
        }
        f[(k, g)] = 1.0;
    }
    Ok(f)
}

/// Prediction settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    /// Ticks per conditioning window; longer records are processed in
    /// consecutive windows sharing one factorization.
    pub window: usize,
    /// Also compute posterior standard deviations.
    pub with_std: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            window: 240,
            with_std: true,
        }
    }
}

/// Predicted trajectories, `T × q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<String>,
    pub start_time: f64,
    pub reporting_rate: f64,
    pub mean: DMatrix<f64>,
    pub std: Option<DMatrix<f64>>,
    /// Dimension of the observed covariance that was factored.
    pub observed_dim: usize,
}

impl Prediction {
    /// Writes `time,predicted_<label>,...` plus `predicted_<label>_std`
    /// columns when available.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut header: Vec<String> = self.labels.iter().map(|l| format!("predicted_{l}")).collect();
        let values = match &self.std {
            None => self.mean.clone(),
            Some(std) => {
                header.extend(self.labels.iter().map(|l| format!("predicted_{l}_std")));
                let (t, q) = self.mean.shape();
                let mut v = DMatrix::zeros(t, 2 * q);
                v.columns_mut(0, q).copy_from(&self.mean);
                v.columns_mut(q, q).copy_from(std);
                v
            }
        };
        write_columns(path.as_ref(), "time", &header, self.start_time, self.reporting_rate, &values)
    }
}

/// Conditions target functionals on every column of `record` (already
/// masked), window by window.
pub fn predict_functionals(
    learned: &LearnedCovariance,
    record: &TimeSeriesRecord,
    functionals: &DMatrix<f64>,
    labels: Vec<String>,
    options: &InferenceOptions,
) -> Result<Prediction> {
    if options.window == 0 {
        return Err(Error::config("inference window must be at least one tick"));
    }
    if labels.len() != functionals.nrows() {
        return Err(Error::invalid("one label per target is required"));
    }
    let total = record.ticks();
    let w = options.window.min(total);
    let m = record.meter_set().len();
    let q = functionals.nrows();
    let blocks = assemble_functional_blocks(learned, record.meter_set(), functionals, w, record.tick_interval())?;
    let l = blocks.chol.l();
    let mut mean = DMatrix::zeros(total, q);
    let mut std = options.with_std.then(|| DMatrix::zeros(total, q));
    let mut cached: Option<(usize, Vec<f64>)> = None;
    let mut start = 0;
    while start < total {
        let len = w.min(total - start);
        let (d1, d2) = (len * m, len * q);
        // Leading principal block of the factor = factor of the leading block.
        let lk = l.view((0, 0), (d1, d1));
        let mut x = DVector::zeros(d1);
        for t in 0..len {
            for i in 0..m {
                x[t * m + i] = record.values()[(start + t, i)];
            }
        }
        let y = lk
            .solve_lower_triangular(&x)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let alpha = lk
            .tr_solve_lower_triangular(&y)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let s21 = blocks.sigma21.view((0, 0), (d2, d1));
        let mu = s21 * alpha;
        for t in 0..len {
            for j in 0..q {
                mean[(start + t, j)] = mu[t * q + j];
            }
        }
        if let Some(std) = std.as_mut() {
            // Posterior variances depend only on the window length.
            if cached.as_ref().map_or(true, |(l, _)| *l != len) {
                let z = lk
                    .solve_lower_triangular(&s21.transpose())
                    .ok_or_else(|| Error::numerical("triangular solve failed"))?;
                let var: Vec<f64> = (0..d2)
                    .map(|k| (blocks.sigma22[(k, k)] - z.column(k).norm_squared()).max(0.0).sqrt())
                    .collect();
                cached = Some((len, var));
            }
            let (_, sd) = cached.as_ref().expect("filled above");
            for t in 0..len {
                for j in 0..q {
                    std[(start + t, j)] = sd[t * q + j];
                }
            }
        }
        start += len;
    }
    Ok(Prediction {
        labels,
        start_time: record.start_time(),
        reporting_rate: record.reporting_rate(),
        mean,
        std,
        observed_dim: blocks.observed_dim(),
    })
}

/// Predicts `targets` from the meters of `record` that `weights` leaves
/// unflagged.
pub fn predict_nonmetered(
    learned: &LearnedCovariance,
    record: &TimeSeriesRecord,
    weights: &MeterWeights,
    targets: &[usize],
    options: &InferenceOptions,
) -> Result<Prediction> {
    if let Some(&g) = targets.iter().find(|g| record.meter_set().contains(g)) {
        return Err(Error::invalid(format!("target generator {g} is also a meter")));
    }
    let masked = apply_mask(record, weights)?;
    let f = selector_functionals(targets, learned.model().n())?;
    let ids = learned.model().generator_ids();
    let labels = targets.iter().map(|&g| format!("g{}", ids[g])).collect();
    predict_functionals(learned, &masked, &f, labels, options)
}
