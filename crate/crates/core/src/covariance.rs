//! Sample moments of metered data and the parameterized space-time
//! covariance `Σ_τ(A) = P (A ⊙ K_τ) Pᵀ` with `P = M^{-1/2} V_r`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{relative_asymmetry, EigenBasis, GridModel};
use crate::kernel::KernelTensor;
use crate::record::TimeSeriesRecord;

/// Relative tolerance for "lag is a whole number of ticks".
const LAG_EXACT: f64 = 1e-9;

/// Lag-indexed second moments of a set of meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    lags: Vec<f64>,
    lag_ticks: Vec<usize>,
    matrices: Vec<DMatrix<f64>>,
    meters: Vec<usize>,
    stds: DVector<f64>,
    ticks: usize,
    normalized: bool,
}

/// Rounds each lag to the nearest whole tick. Lags off by more than half a
/// tick cannot happen by construction; lags that move by more than 1e-9
/// relative are reported with a warning.
pub fn snap_lags(lags: &[f64], reporting_rate: f64) -> Result<Vec<f64>> {
    if !(reporting_rate > 0.0) {
        return Err(Error::invalid("reporting rate must be positive"));
    }
    let mut out = Vec::with_capacity(lags.len());
    for &tau in lags {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::invalid(format!("lag {tau} must be finite and non-negative")));
        }
        let k = (tau * reporting_rate).round();
        let snapped = k / reporting_rate;
        if (snapped - tau).abs() > LAG_EXACT * tau.max(1.0 / reporting_rate) {
            log::warn!(
                "lag {tau} s is not a whole number of ticks at {reporting_rate} samples/s; using {snapped} s"
            );
        }
        out.push(snapped);
    }
    Ok(out)
}

fn lag_to_ticks(tau: f64, rate: f64) -> Result<usize> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::invalid(format!("lag {tau} must be finite and non-negative")));
    }
    let k = (tau * rate).round();
    if (k / rate - tau).abs() > LAG_EXACT * tau.max(1.0 / rate) {
        return Err(Error::invalid(format!(
            "lag {tau} s is not a multiple of the {} s tick interval; nearest representable lag is {} s",
            1.0 / rate,
            k / rate
        )));
    }
    Ok(k as usize)
}

/// Mean-removed lagged moments `C_τ = (1/T′) Σ_t z(t+τ) z(t)ᵀ`, `T′ = T − τ/Δ`.
pub fn sample_moments(record: &TimeSeriesRecord, lags: &[f64]) -> Result<Moments> {
    if lags.is_empty() {
        return Err(Error::invalid("at least one lag is required"));
    }
    let rate = record.reporting_rate();
    let t = record.ticks();
    let lag_ticks = lags
        .iter()
        .map(|&tau| lag_to_ticks(tau, rate))
        .collect::<Result<Vec<_>>>()?;
    if let Some(&k) = lag_ticks.iter().find(|&&k| k >= t) {
        return Err(Error::invalid(format!(
            "lag of {k} ticks needs a record longer than its {t} ticks"
        )));
    }
    let mut z = record.values().clone();
    for mut col in z.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let matrices = lag_ticks
        .iter()
        .map(|&k| {
            let tp = t - k;
            let late = z.rows(k, tp);
            let early = z.rows(0, tp);
            late.transpose() * early / tp as f64
        })
        .collect::<Vec<_>>();
    let stds = DVector::from_iterator(
        z.ncols(),
        z.column_iter().map(|c| (c.norm_squared() / t as f64).sqrt()),
    );
    Ok(Moments {
        lags: lag_ticks.iter().map(|&k| k as f64 / rate).collect(),
        lag_ticks,
        matrices,
        meters: record.meter_set().to_vec(),
        stds,
        ticks: t,
        normalized: false,
    })
}

impl Moments {
    /// Builds moments from explicit matrices (all `m × m`).
    pub fn from_parts(
        lags: Vec<f64>,
        matrices: Vec<DMatrix<f64>>,
        meters: Vec<usize>,
        stds: DVector<f64>,
    ) -> Result<Self> {
        let m = meters.len();
        if lags.is_empty() || lags.len() != matrices.len() {
            return Err(Error::invalid("one moment matrix per lag is required"));
        }
        if matrices.iter().any(|c| c.shape() != (m, m)) || stds.len() != m {
            return Err(Error::invalid("moment matrices must be m × m over the meter set"));
        }
        Ok(Moments {
            lag_ticks: vec![0; lags.len()],
            lags,
            matrices,
            meters,
            stds,
            ticks: 0,
            normalized: false,
        })
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    /// Lags in ticks (zero when built from parts).
    pub fn lag_ticks(&self) -> &[usize] {
        &self.lag_ticks
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    /// `C_τ` for the `idx`-th lag.
    pub fn matrix(&self, idx: usize) -> &DMatrix<f64> {
        &self.matrices[idx]
    }

    /// Generator index of each row/column.
    pub fn meters(&self) -> &[usize] {
        &self.meters
    }

    /// Standard deviations of the (raw) metered signals.
    pub fn stds(&self) -> &DVector<f64> {
        &self.stds
    }

    /// Number of ticks the moments were computed from.
    pub fn ticks(&self) -> usize {
        self.ticks
    }

    /// Whether [`Moments::to_correlation`] has been applied.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides entry `(i, j)` of every `C_τ` by `stds[i]·stds[j]`.
    pub fn to_correlation(&self, stds: &DVector<f64>) -> Result<Moments> {
        if stds.len() != self.meters.len() {
            return Err(Error::invalid("one standard deviation per meter is required"));
        }
        if let Some(i) = stds.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "meter g{} has a flat signal (standard deviation {}); it cannot be normalized",
                self.meters[i], stds[i]
            )));
        }
        let inv = stds.map(|s| 1.0 / s);
        let matrices = self
            .matrices
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for j in 0..c.ncols() {
                    for i in 0..c.nrows() {
                        c[(i, j)] *= inv[i] * inv[j];
                    }
                }
                c
            })
            .collect();
        Ok(Moments {
            matrices,
            stds: stds.clone(),
            normalized: true,
            ..self.clone()
        })
    }

    /// Position of a lag.
    pub fn lag_index(&self, tau: f64) -> Result<usize> {
        self.lags
            .iter()
            .position(|&l| (l - tau).abs() <= LAG_EXACT * tau.abs().max(1.0))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "lag {tau} s is not among the moment lags {:?}",
                    self.lags
                ))
            })
    }
}

/// Learned eigeninput covariance `A` with everything needed to evaluate
/// `Σ_τ(A)` anywhere on the grid.
#[derive(Debug, Clone)]
pub struct LearnedCovariance {
    a: DMatrix<f64>,
    kernel: KernelTensor,
    basis: EigenBasis,
    model: GridModel,
    projector: DMatrix<f64>,
    meters: Vec<usize>,
    normalization: DVector<f64>,
}

/// `M^{-1/2} V_r`, mapping modal velocities to generator speeds.
pub fn modal_projector(model: &GridModel, basis: &EigenBasis) -> DMatrix<f64> {
    let mut p = basis.retained_vectors();
    for (i, m) in model.inertia().iter().enumerate() {
        p.row_mut(i).scale_mut(1.0 / m.sqrt());
    }
    p
}

impl LearnedCovariance {
    /// `meters`/`normalization` record which sample standard deviations
    /// scaled the fit.
    pub fn new(
        a: DMatrix<f64>,
        kernel: KernelTensor,
        basis: EigenBasis,
        model: GridModel,
        meters: Vec<usize>,
        normalization: DVector<f64>,
    ) -> Result<Self> {
        let r = basis.rank();
        if a.shape() != (r, r) || kernel.rank() != r {
            return Err(Error::invalid(format!(
                "A and the kernel must be {r} × {r} to match the retained modes"
            )));
        }
        if basis.n() != model.n() {
            return Err(Error::invalid("basis and model cover different generator counts"));
        }
        if relative_asymmetry(&a) > 1e-10 {
            return Err(Error::invalid("A must be symmetric"));
        }
        if meters.len() != normalization.len() {
            return Err(Error::invalid("one normalization entry per meter is required"));
        }
        let projector = modal_projector(&model, &basis);
        Ok(LearnedCovariance {
            a,
            kernel,
            basis,
            model,
            projector,
            meters,
            normalization,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn kernel(&self) -> &KernelTensor {
        &self.kernel
    }

    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    pub fn model(&self) -> &GridModel {
        &self.model
    }

    /// Meters whose sample standard deviations were used in the fit.
    pub fn meters(&self) -> &[usize] {
        &self.meters
    }

    pub fn normalization(&self) -> &DVector<f64> {
        &self.normalization
    }

    /// `P = M^{-1/2} V_r` (`n × r`).
    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    /// Same `A` with a kernel over a different lag set.
    pub fn with_lags(&self, lags: &[f64]) -> Result<Self> {
        Ok(LearnedCovariance {
            kernel: KernelTensor::build(&self.basis, lags)?,
            ..self.clone()
        })
    }

    /// Same kernel with another `A`.
    pub fn with_a(&self, a: DMatrix<f64>) -> Result<Self> {
        Self::new(
            a,
            self.kernel.clone(),
            self.basis.clone(),
            self.model.clone(),
            self.meters.clone(),
            self.normalization.clone(),
        )
    }

    fn check_selector(&self, selector: &[usize]) -> Result<()> {
        if selector.is_empty() {
            return Err(Error::invalid("selector must name at least one generator"));
        }
        if let Some(&g) = selector.iter().find(|&&g| g >= self.model.n()) {
            return Err(Error::invalid(format!(
                "generator {g} is out of range for a {}-generator model",
                self.model.n()
            )));
        }
        Ok(())
    }

    /// `A ⊙ K_τ` for a configured lag (negative lags use `K_{−τ} = K_τᵀ`).
    pub fn modal_block(&self, tau: f64) -> Result<DMatrix<f64>> {
        let k = self.kernel.at(tau.abs())?;
        let k = if tau < 0.0 { k.transpose() } else { k.clone() };
        Ok(self.a.component_mul(&k))
    }

    /// `[Σ_τ(A)]` restricted to `selector` rows and columns.
    pub fn sigma(&self, tau: f64, selector: &[usize]) -> Result<DMatrix<f64>> {
        self.sigma_cross(tau, selector, selector)
    }

    /// Rows `rows`, columns `cols` of `Σ_τ(A)`, i.e. `E[ω_rows(t+τ) ω_cols(t)ᵀ]`.
    pub fn sigma_cross(&self, tau: f64, rows: &[usize], cols: &[usize]) -> Result<DMatrix<f64>> {
        self.check_selector(rows)?;
        self.check_selector(cols)?;
        let inner = self.modal_block(tau)?;
        let pr = self.projector.select_rows(rows);
        let pc = self.projector.select_rows(cols);
        Ok(pr * inner * pc.transpose())
    }

    /// `Σ_τ(A)` over all generators.
    pub fn sigma_full(&self, tau: f64) -> Result<DMatrix<f64>> {
        let inner = self.modal_block(tau)?;
        Ok(&self.projector * inner * self.projector.transpose())
    }

    /// Standard deviations implied by `Σ_0(A)` for every generator.
    pub fn model_stds(&self) -> Result<DVector<f64>> {
        let inner = self.modal_block(0.0)?;
        let pa = &self.projector * inner;
        Ok(DVector::from_iterator(
            self.model.n(),
            (0..self.model.n()).map(|i| pa.row(i).dot(&self.projector.row(i)).max(0.0).sqrt()),
        ))
    }

    /// Per-generator scale used for correlations: the sample standard
    /// deviation where the generator was metered in the fit, the model-implied
    /// one elsewhere.
    pub fn scales(&self) -> Result<DVector<f64>> {
        let mut s = self.model_stds()?;
        for (k, &g) in self.meters.iter().enumerate() {
            s[g] = self.normalization[k];
        }
        Ok(s)
    }

    /// `Σ_τ(A)` in correlation scale over `selector`.
    pub fn correlation(&self, tau: f64, selector: &[usize]) -> Result<DMatrix<f64>> {
        let s = self.scales()?;
        let mut c = self.sigma(tau, selector)?;
        for (j, &gj) in selector.iter().enumerate() {
            for (i, &gi) in selector.iter().enumerate() {
                let d = s[gi] * s[gj];
                c[(i, j)] = if d > 0.0 { c[(i, j)] / d } else { 0.0 };
            }
        }
        Ok(c)
    }

    /// Normalized residuals `D⁻¹(Σ_τ(A) − C_τ)D⁻¹` for each lag of `moments`,
    /// using this fit's normalization for the moment meters.
    pub fn residuals(&self, moments: &Moments) -> Result<Vec<DMatrix<f64>>> {
        let d = self.normalization_for(moments)?;
        moments
            .lags()
            .iter()
            .zip(moments.matrices())
            .map(|(&tau, c)| {
                let sigma = self.sigma(tau, moments.meters())?;
                let mut r = scale_both(&sigma, &d);
                if moments.is_normalized() {
                    r -= c;
                } else {
                    r -= scale_both(c, &d);
                }
                Ok(r)
            })
            .collect()
    }

    fn normalization_for(&self, moments: &Moments) -> Result<DVector<f64>> {
        let mut d = DVector::from_element(moments.meters().len(), 1.0);
        for (k, g) in moments.meters().iter().enumerate() {
            if let Some(p) = self.meters.iter().position(|m| m == g) {
                d[k] = self.normalization[p];
            } else if !self.meters.is_empty() {
                return Err(Error::invalid(format!(
                    "meter g{g} was not part of the fit that produced this covariance"
                )));
            }
        }
        Ok(d)
    }
}

/// `D⁻¹ C D⁻¹` for diagonal `D = diag(d)`.
pub(crate) fn scale_both(c: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = c.clone();
    for j in 0..c.ncols() {
        for i in 0..c.nrows() {
            out[(i, j)] /= d[i] * d[j];
        }
    }
    out
}
