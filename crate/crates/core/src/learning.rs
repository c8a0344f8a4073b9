//! Method-of-moments fit of the eigeninput covariance `A`.
//!
//! `Σ_τ(A)` is linear in the `r(r+1)/2` free entries of symmetric `A`, so
//! every moment entry `(τ, a, b)` contributes one row of a linear design
//!
//! ```text
//! X[(τ,a,b), (i,j)] = (K_τ[i,j] U[a,i] U[b,j] + [i≠j] K_τ[j,i] U[a,j] U[b,i]) / (d_a d_b)
//! ```
//!
//! with `U = S_M M^{-1/2} V_r` and `d` the per-meter normalization. The
//! least-squares fit is a minimum-norm solve; the absolute-deviation fit
//! runs a primal-dual interior point method on the dual linear program and
//! finishes with exact vertex pivoting. Both stages produce dual-feasible
//! points, and the best of them certifies the optimality gap.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{modal_projector, LearnedCovariance, Moments};
use crate::error::{Error, Result};
use crate::grid::{EigenBasis, GridModel};
use crate::kernel::KernelTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    L2,
    L1,
}

/// Fit settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub objective: Objective,
    /// Lags (s) entering the objective; each must be in the moments and kernel.
    pub lags: Vec<f64>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Relative duality gap accepted at the end of an absolute-deviation fit.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Singular values below this fraction of the largest are treated as
    /// unidentifiable directions.
    #[serde(default = "default_rank_tolerance")]
    pub rank_tolerance: f64,
    /// Scale moments to correlations before fitting.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// `A` is always symmetric; `false` is rejected.
    #[serde(default = "yes")]
    pub symmetry: bool,
    /// Meters whose rows and columns are left out of the objective.
    #[serde(default)]
    pub exclude_meters: Vec<usize>,
}

fn default_max_iterations() -> usize {
    5000
}
fn default_tolerance() -> f64 {
    1e-9
}
fn default_rank_tolerance() -> f64 {
    1e-10
}
fn yes() -> bool {
    true
}

impl FitConfig {
    pub fn new(objective: Objective, lags: Vec<f64>) -> Self {
        FitConfig {
            objective,
            lags,
            max_iterations: default_max_iterations(),
            tolerance: default_tolerance(),
            rank_tolerance: default_rank_tolerance(),
            normalize: true,
            symmetry: true,
            exclude_meters: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lags.is_empty() {
            return Err(Error::config("the fit needs at least one lag"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("fit tolerance must be positive"));
        }
        if !(self.rank_tolerance > 0.0 && self.rank_tolerance < 1.0) {
            return Err(Error::config("rank tolerance must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if !self.symmetry {
            return Err(Error::config("only symmetric A is supported (symmetry = true)"));
        }
        Ok(())
    }
}

/// Diagnostics of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub objective: Objective,
    /// Final objective (normalized scale): sum of squared or absolute residuals.
    pub objective_value: f64,
    /// Objective after each solver iteration.
    pub trajectory: Vec<f64>,
    /// Certified upper bound on `objective − optimum` (zero for least squares).
    pub gap: f64,
    pub iterations: usize,
    /// Numerical rank of the design.
    pub rank: usize,
    /// Number of free entries of `A`.
    pub unknowns: usize,
    /// Entries `(i, j)` of `A` that are (mostly) unidentifiable and pinned to zero.
    pub unidentified: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize fit report: {e}")))
    }
}

/// Linear design of the moment-matching problem.
#[derive(Debug, Clone)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Parameter order: upper-triangle pairs `(i, j)`, `i ≤ j`, row-major.
    pub pairs: Vec<(usize, usize)>,
    /// `(lag index into moments, meter row a, meter column b)` per design row.
    pub rows: Vec<(usize, usize, usize)>,
    /// Per-meter normalization `d`.
    pub scale: DVector<f64>,
}

impl Design {
    /// Packs the parameter vector into symmetric `A`.
    pub fn unpack(&self, beta: &DVector<f64>, r: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(r, r);
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            a[(i, j)] = beta[k];
            a[(j, i)] = beta[k];
        }
        a
    }

    /// Parameter vector of symmetric `A`.
    pub fn pack(&self, a: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(i, j)| a[(i, j)]))
    }
}

/// Assembles the design for the configured lags.
pub fn build_design(
    moments: &Moments,
    kernel: &KernelTensor,
    basis: &EigenBasis,
    model: &GridModel,
    config: &FitConfig,
) -> Result<Design> {
    config.validate()?;
    let r = basis.rank();
    if kernel.rank() != r {
        return Err(Error::invalid("kernel and basis disagree on the retained modes"));
    }
    let meters = moments.meters();
    if let Some(&g) = meters.iter().find(|&&g| g >= model.n()) {
        return Err(Error::invalid(format!("meter {g} is outside the {}-generator model", model.n())));
    }
    if !config.lags.iter().any(|&t| t == 0.0) {
        log::warn!("lag 0 is not among the fit lags; the fit ignores instantaneous covariance");
    }
    let scale = if moments.is_normalized() || !config.normalize {
        if moments.is_normalized() {
            moments.stds().clone()
        } else {
            DVector::from_element(meters.len(), 1.0)
        }
    } else {
        let s = moments.stds();
        if let Some(i) = s.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::invalid(format!(
                "meter g{} has a flat signal; it cannot be normalized",
                meters[i]
            )));
        }
        s.clone()
    };
    let excluded: BTreeSet<usize> = config.exclude_meters.iter().copied().collect();
    let keep: Vec<usize> = (0..meters.len()).filter(|&k| !excluded.contains(&meters[k])).collect();
    if keep.is_empty() {
        return Err(Error::invalid("every meter is excluded from the fit"));
    }
    let u = modal_projector(model, basis).select_rows(meters);
    let pairs: Vec<(usize, usize)> = (0..r).flat_map(|i| (i..r).map(move |j| (i, j))).collect();

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut lag_kernels = Vec::new();
    for &tau in &config.lags {
        let li = moments.lag_index(tau)?;
        let k = kernel.at(tau)?;
        let c = moments.matrix(li);
        lag_kernels.push(k);
        for &a in &keep {
            for &b in &keep {
                rows.push((li, a, b));
                let v = c[(a, b)];
                targets.push(if moments.is_normalized() || !config.normalize {
                    v
                } else {
                    v / (scale[a] * scale[b])
                });
            }
        }
    }
    let per_lag = keep.len() * keep.len();
    let mut x = DMatrix::zeros(rows.len(), pairs.len());
    for (row, &(_, a, b)) in rows.iter().enumerate() {
        let k = lag_kernels[row / per_lag];
        let w = 1.0 / (scale[a] * scale[b]);
        for (col, &(i, j)) in pairs.iter().enumerate() {
            let mut v = k[(i, j)] * u[(a, i)] * u[(b, j)];
            if i != j {
                v += k[(j, i)] * u[(a, j)] * u[(b, i)];
            }
            x[(row, col)] = v * w;
        }
    }
    Ok(Design {
        x,
        y: DVector::from_vec(targets),
        pairs,
        rows,
        scale,
    })
}

/// Orthonormal reparameterization `X = U_ρ Σ_ρ V_ρᵀ` of the design's row space.
struct Reduced {
    /// `N × ρ`, orthonormal columns.
    u: DMatrix<f64>,
    /// `p × ρ`, maps reduced coordinates `z` to parameters: `β = V_ρ Σ_ρ⁻¹ z`.
    back: DMatrix<f64>,
    /// Per-parameter weight in the null space (1 = fully unidentifiable).
    null_weight: Vec<f64>,
}

fn reduce(x: &DMatrix<f64>, rank_tolerance: f64) -> Result<Reduced> {
    let (n, p) = x.shape();
    let qr = x.clone().qr();
    let (q, r) = qr.unpack();
    let svd = r.try_svd(true, true, f64::EPSILON, 0).ok_or_else(|| {
        Error::numerical(format!("singular value decomposition of the {n} × {p} design failed"))
    })?;
    let (ur, vt) = (svd.u.expect("requested u"), svd.v_t.expect("requested v_t"));
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(Error::numerical(
            "the design is identically zero; no generator mode is visible at the meters",
        ));
    }
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > rank_tolerance * smax)
        .collect();
    let u = (q * ur).select_columns(&keep);
    let mut back = DMatrix::zeros(p, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let s = svd.singular_values[k];
        for i in 0..p {
            back[(i, c)] = vt[(k, i)] / s;
        }
    }
    let null_weight = (0..p)
        .map(|i| 1.0 - keep.iter().map(|&k| vt[(k, i)] * vt[(k, i)]).sum::<f64>())
        .collect();
    Ok(Reduced { u, back, null_weight })
}

/// Least-squares fit `min_A Σ_τ ‖D⁻¹(Σ_τ(A) − C_τ)D⁻¹‖²`.
pub fn fit_l2(
    moments: &Moments,
    kernel: &KernelTensor,
    basis: &EigenBasis,
    model: &GridModel,
    config: &FitConfig,
) -> Result<(LearnedCovariance, FitReport)> {
    let config = FitConfig {
        objective: Objective::L2,
        ..config.clone()
    };
    fit(moments, kernel, basis, model, &config)
}

/// Absolute-deviation fit `min_A Σ_τ ‖vec(D⁻¹(Σ_τ(A) − C_τ)D⁻¹)‖₁`.
pub fn fit_l1(
    moments: &Moments,
    kernel: &KernelTensor,
    basis: &EigenBasis,
    model: &GridModel,
    config: &FitConfig,
) -> Result<(LearnedCovariance, FitReport)> {
    let config = FitConfig {
        objective: Objective::L1,
        ..config.clone()
    };
    fit(moments, kernel, basis, model, &config)
}

/// Fits `A` with the configured objective.
pub fn fit(
    moments: &Moments,
    kernel: &KernelTensor,
    basis: &EigenBasis,
    model: &GridModel,
    config: &FitConfig,
) -> Result<(LearnedCovariance, FitReport)> {
    let design = build_design(moments, kernel, basis, model, config)?;
    let (beta, mut report) = solve(&design, config)?;
    let r = basis.rank();
    let a = design.unpack(&beta, r);
    if !report.unidentified.is_empty() {
        let msg = format!(
            "design has rank {} for {} unknowns; entries {:?} of A are not identifiable from these meters and are pinned to zero",
            report.rank, report.unknowns, report.unidentified
        );
        log::warn!("{msg}");
        report.warnings.push(msg);
    } else if report.rank < report.unknowns {
        let msg = format!(
            "design has rank {} for {} unknowns; the minimum-norm solution is returned",
            report.rank, report.unknowns
        );
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    if !config.lags.iter().any(|&t| t == 0.0) {
        report.warnings.push("lag 0 is not among the fit lags".into());
    }
    let eig = a.symmetric_eigenvalues();
    let (min_eig, norm) = (eig.min(), eig.amax());
    if min_eig < -1e-6 * norm {
        let msg = format!("fitted A is indefinite (minimum eigenvalue {min_eig:.3e}, spectral norm {norm:.3e})");
        log::warn!("{msg}");
        report.warnings.push(msg);
    }
    let learned = LearnedCovariance::new(
        a,
        kernel.clone(),
        basis.clone(),
        model.clone(),
        moments.meters().to_vec(),
        design.scale.clone(),
    )?;
    Ok((learned, report))
}

/// Objective of `beta` on a design.
pub fn objective_value(design: &Design, beta: &DVector<f64>, objective: Objective) -> f64 {
    let r = &design.y - &design.x * beta;
    match objective {
        Objective::L2 => r.norm_squared(),
        Objective::L1 => r.iter().map(|v| v.abs()).sum(),
    }
}

/// Solves the design; returns the parameter vector and its report.
pub fn solve(design: &Design, config: &FitConfig) -> Result<(DVector<f64>, FitReport)> {
    config.validate()?;
    let reduced = reduce(&design.x, config.rank_tolerance)?;
    let rank = reduced.u.ncols();
    let unidentified = design
        .pairs
        .iter()
        .zip(&reduced.null_weight)
        .filter(|(_, &w)| w > 0.5)
        .map(|(&p, _)| p)
        .collect();
    let z_ls = reduced.u.transpose() * &design.y;
    let (z, trajectory, gap, iterations) = match config.objective {
        Objective::L2 => {
            let v = (&design.y - &reduced.u * &z_ls).norm_squared();
            (z_ls, vec![v], 0.0, 1)
        }
        Objective::L1 => l1_solve(&reduced.u, &design.y, config)?,
    };
    let beta = &reduced.back * &z;
    let value = objective_value(design, &beta, config.objective);
    Ok((
        beta,
        FitReport {
            objective: config.objective,
            objective_value: value,
            trajectory,
            gap,
            iterations,
            rank,
            unknowns: design.pairs.len(),
            unidentified,
            warnings: Vec::new(),
        },
    ))
}

fn l1(r: &DVector<f64>) -> f64 {
    r.iter().map(|v| v.abs()).sum()
}

/// Lower bound on `min_z ‖y − Uz‖₁` from any candidate dual vector `d`:
/// projected onto `Uᵀd = 0` and scaled into the unit box, `yᵀd` bounds the
/// optimum from below.
fn box_bound(u: &DMatrix<f64>, y: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let proj = d - u * (u.transpose() * d);
    let m = proj.amax();
    if m == 0.0 {
        0.0
    } else {
        y.dot(&proj) / m.max(1.0)
    }
}

fn sign_bound(u: &DMatrix<f64>, y: &DVector<f64>, r: &DVector<f64>) -> f64 {
    let s = r.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
    box_bound(u, y, &s)
}

/// Largest step in `[0, 1]` keeping `v + α dv ≥ 0` (times a safety factor).
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (a, b) in v.iter().zip(dv.iter()) {
        if *b < 0.0 {
            alpha = alpha.min(-a / b);
        }
    }
    alpha
}

/// Primal-dual interior point (Mehrotra predictor-corrector) for the dual of
/// `min_z ‖y − Uz‖₁`, i.e. `min −yᵀx` over `Uᵀx = Uᵀ1/2`, `0 ≤ x ≤ 1`
/// with `d = 2x − 1`. The equality multipliers are `−z`. Stops once the
/// certified gap is below `target`; returns the best primal point, the best
/// lower bound and the iteration count.
fn interior_point(
    u: &DMatrix<f64>,
    y: &DVector<f64>,
    max_iterations: usize,
    target: f64,
    trajectory: &mut Vec<f64>,
) -> (DVector<f64>, f64, usize) {
    let (n, rho) = u.shape();
    let c = -y;
    let mut x = DVector::from_element(n, 0.5);
    let mut s = DVector::from_element(n, 0.5);
    let mut yd = u.transpose() * &c;
    let r = &c - u * &yd;
    let shift = 0.1 * r.iter().map(|v| v.abs()).sum::<f64>() / n as f64 + 1e-12 * y.amax().max(1.0);
    let mut z = r.map(|v| v.max(0.0) + shift);
    let mut w = r.map(|v| (-v).max(0.0) + shift);
    let b = u.transpose() * DVector::from_element(n, 0.5);

    let mut best = (-&yd, f64::INFINITY);
    let mut lower = f64::NEG_INFINITY;
    let mut iterations = 0;
    while iterations < max_iterations {
        let zfit = -&yd;
        let value = l1(&(y - u * &zfit));
        if value < best.1 {
            best = (zfit, value);
        }
        lower = lower.max(box_bound(u, y, &x.map(|v| 2.0 * v - 1.0)));
        trajectory.push(value);
        if best.1 - lower <= target {
            break;
        }
        iterations += 1;

        let rd = &c - u * &yd - &z + &w;
        let rp = &b - u.transpose() * &x;
        let qinv = DVector::from_fn(n, |i, _| 1.0 / (z[i] / x[i] + w[i] / s[i]));
        let mut scaled = u.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= qinv[i].sqrt();
        }
        let mut normal = scaled.transpose() * &scaled;
        let chol = loop {
            if let Some(ch) = normal.clone().cholesky() {
                break ch;
            }
            let ridge = 1e-14 * normal.diagonal().amax().max(f64::MIN_POSITIVE);
            for k in 0..rho {
                normal[(k, k)] += ridge;
            }
        };
        let newton = |g: &DVector<f64>| {
            let dy = chol.solve(&(&rp - u.transpose() * g.component_mul(&qinv)));
            let dx = (u * &dy + g).component_mul(&qinv);
            (dy, dx)
        };

        // Predictor.
        let g = -&z + &w - &rd;
        let (_, dxa) = newton(&g);
        let dza = -&z - z.component_mul(&dxa).component_div(&x);
        let dwa = -&w + w.component_mul(&dxa).component_div(&s);
        let ap = max_step(&x, &dxa).min(max_step(&s, &(-&dxa)));
        let ad = max_step(&z, &dza).min(max_step(&w, &dwa));
        let gap = x.dot(&z) + s.dot(&w);
        let xa = &x + &dxa * ap;
        let sa = &s - &dxa * ap;
        let gap_aff = xa.dot(&(&z + &dza * ad)) + sa.dot(&(&w + &dwa * ad));
        let mu = (gap_aff / gap).powi(3) * gap / (2 * n) as f64;

        // Corrector.
        let cz = (DVector::from_element(n, mu) - x.component_mul(&z) - dxa.component_mul(&dza)).component_div(&x);
        let cw = (DVector::from_element(n, mu) - s.component_mul(&w) + dxa.component_mul(&dwa)).component_div(&s);
        let g = &cz - &cw - &rd;
        let (dy, dx) = newton(&g);
        let dz = &cz - z.component_mul(&dx).component_div(&x);
        let dw = &cw + w.component_mul(&dx).component_div(&s);
        let ap = (0.99995 * max_step(&x, &dx).min(max_step(&s, &(-&dx)))).min(1.0);
        let ad = (0.99995 * max_step(&z, &dz).min(max_step(&w, &dw))).min(1.0);
        x += &dx * ap;
        s -= &dx * ap;
        yd += &dy * ad;
        z += &dz * ad;
        w += &dw * ad;
        if !(x.iter().chain(yd.iter()).all(|v| v.is_finite())) {
            break;
        }
    }
    (best.0, lower, iterations)
}

/// `min_z ‖y − Uz‖₁` for orthonormal `U`: interior point to a near-optimal
/// point, then vertex pivoting to the exact optimum.
fn l1_solve(
    u: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &FitConfig,
) -> Result<(DVector<f64>, Vec<f64>, f64, usize)> {
    let mut trajectory = Vec::new();
    let scale = l1(y).max(1.0);
    let target = 1e-3 * config.tolerance * scale;
    let (z, lower, mut iterations) = interior_point(u, y, config.max_iterations, target, &mut trajectory);
    let budget = config.max_iterations.saturating_sub(iterations).max(config.max_iterations / 2);
    let (z, gap, pivots) = polish(u, y, z, lower, target, budget, &mut trajectory);
    iterations += pivots;
    let value = l1(&(y - u * &z));
    if gap > config.tolerance * value.max(1.0) {
        return Err(Error::numerical(format!(
            "absolute-deviation fit did not converge in {iterations} iterations: objective {value:.9e}, gap estimate {gap:.3e}"
        )));
    }
    Ok((z, trajectory, gap, iterations))
}

/// Picks `ρ` linearly independent rows of `u`, preferring small `|r|`.
fn pick_vertex_rows(u: &DMatrix<f64>, r: &DVector<f64>) -> Option<Vec<usize>> {
    let rho = u.ncols();
    let mut order: Vec<usize> = (0..u.nrows()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()).then(a.cmp(&b)));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(rho);
    let mut chosen = Vec::with_capacity(rho);
    for i in order {
        let row = u.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let rest = v.norm();
        if rest > 1e-6 * norm {
            basis.push(v / rest);
            chosen.push(i);
            if chosen.len() == rho {
                return Some(chosen);
            }
        }
    }
    None
}

/// Exact vertex pivoting for `min_z ‖y − Uz‖₁`. At a vertex `ρ` residuals
/// (rows `S`) vanish; the multipliers `λ = U_S^{-T} Σ_{i∉S} sign(r_i) u_i`
/// certify optimality when `‖λ‖∞ ≤ 1`. Otherwise row `j` with the largest
/// `|λ_j|` leaves `S` along the direction that moves only its residual, and
/// the exact line minimum (a weighted median of breakpoints) brings a new
/// row in. Returns the best point, its gap bound and the pivot count.
fn polish(
    u: &DMatrix<f64>,
    y: &DVector<f64>,
    z_start: DVector<f64>,
    lower: f64,
    target: f64,
    max_pivots: usize,
    trajectory: &mut Vec<f64>,
) -> (DVector<f64>, f64, usize) {
    let rho = u.ncols();
    let n = u.nrows();
    let r0 = y - u * &z_start;
    // Any dual-feasible point bounds every primal point, so the best bound
    // seen so far certifies the best iterate.
    let mut lower = lower.max(sign_bound(u, y, &r0));
    let mut best = (z_start, l1(&r0));
    let done = |best: (DVector<f64>, f64), lower: f64, pivots| {
        let gap = (best.1 - lower).max(0.0);
        (best.0, gap, pivots)
    };
    if rho == 0 {
        return done(best, lower, 0);
    }
    let Some(mut active) = pick_vertex_rows(u, &r0) else {
        return done(best, lower, 0);
    };
    let zero_tol = 1e-12 * y.amax().max(1.0);
    let refactor = |active: &[usize]| -> Option<(DMatrix<f64>, DVector<f64>)> {
        let b = u.select_rows(active).lu().try_inverse()?;
        let ys = DVector::from_iterator(rho, active.iter().map(|&i| y[i]));
        let z = &b * ys;
        Some((b, z))
    };
    let Some((mut binv, mut z)) = refactor(&active) else {
        return done(best, lower, 0);
    };
    let mut in_active = vec![false; n];
    for &i in &active {
        in_active[i] = true;
    }
    let mut pivots = 0;
    let mut since_refactor = 0;
    loop {
        let r = y - u * &z;
        let value = l1(&r);
        trajectory.push(value);
        if value < best.1 {
            best = (z.clone(), value);
        }
        // g = Σ_{i∉S} sign(r_i) u_i
        let mut g = DVector::zeros(rho);
        let mut dual = 0.0;
        for i in 0..n {
            if in_active[i] || r[i].abs() <= zero_tol {
                continue;
            }
            g.axpy(r[i].signum(), &u.row(i).transpose(), 1.0);
            dual += y[i] * r[i].signum();
        }
        let lambda = binv.transpose() * &g;
        let lmax = lambda.amax();
        // Dual point u_N = sign(r_N), u_S = −λ, scaled into the unit box.
        for (k, &i) in active.iter().enumerate() {
            dual -= y[i] * lambda[k];
        }
        lower = lower.max(dual / lmax.max(1.0));
        if lmax <= 1.0 + 1e-11 || best.1 - lower <= target || pivots >= max_pivots {
            return done(best, lower, pivots);
        }
        pivots += 1;
        let j = lambda.iamax();
        let d = binv.column(j) * lambda[j].signum();
        let a = u * &d;
        // Line search on f(t) = Σ_{i∉S} |r_i − t a_i| + t, slope 1 − |λ_j| at 0⁺.
        let mut slope = 1.0 - lmax;
        let mut breaks: Vec<(f64, usize)> = Vec::new();
        let mut degenerate: Option<(f64, usize)> = None;
        for i in 0..n {
            if in_active[i] || a[i] == 0.0 {
                continue;
            }
            if r[i].abs() <= zero_tol {
                slope += a[i].abs();
                if degenerate.map_or(true, |(m, _)| a[i].abs() > m) {
                    degenerate = Some((a[i].abs(), i));
                }
                continue;
            }
            let t = r[i] / a[i];
            if t > 0.0 {
                breaks.push((t, i));
            }
        }
        let entering = if slope >= 0.0 {
            match degenerate {
                Some((_, i)) => i,
                None => return done(best, lower, pivots),
            }
        } else {
            breaks.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
            let mut hit = None;
            for &(_, i) in &breaks {
                slope += 2.0 * a[i].abs();
                if slope >= 0.0 {
                    hit = Some(i);
                    break;
                }
            }
            match hit {
                Some(i) => i,
                None => return done(best, lower, pivots),
            }
        };
        // Replace row j of U_S by u_entering (Sherman–Morrison on the inverse).
        let leaving = active[j];
        let bj = binv.column(j).into_owned();
        let ui = u.row(entering).transpose();
        let denom = ui.dot(&bj);
        if denom.abs() < 1e-14 {
            return done(best, lower, pivots);
        }
        let diff = &ui - u.row(leaving).transpose();
        let row = diff.transpose() * &binv;
        binv -= &bj * row / denom;
        active[j] = entering;
        in_active[leaving] = false;
        in_active[entering] = true;
        since_refactor += 1;
        if since_refactor >= 64 {
            since_refactor = 0;
            match refactor(&active) {
                Some((b, zz)) => {
                    binv = b;
                    z = zz;
                }
                None => return done(best, lower, pivots),
            }
        } else {
            let ys = DVector::from_iterator(rho, active.iter().map(|&i| y[i]));
            z = &binv * ys;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::scale_both;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random well-conditioned model: chain-plus-random Laplacian.
    fn model(n: usize, seed: u64) -> GridModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let w = if j == i + 1 { 5.0 + rng.random::<f64>() * 5.0 } else if rng.random::<f64>() < 0.3 { rng.random::<f64>() * 3.0 } else { 0.0 };
                l[(i, j)] -= w;
                l[(j, i)] -= w;
                l[(i, i)] += w;
                l[(j, j)] += w;
            }
        }
        let inertia = DVector::from_fn(n, |_, _| 0.5 + rng.random::<f64>() * 2.0);
        GridModel::new((0..n).map(|i| format!("{i}")).collect(), inertia, 0.8, l).unwrap()
    }

    fn random_psd(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>() - 0.5);
        &b * b.transpose() + DMatrix::identity(r, r) * 0.1
    }

    /// Exact moments `Σ_τ(A)` at the meters (covariance scale).
    fn exact_moments(
        m: &GridModel,
        basis: &EigenBasis,
        a: &DMatrix<f64>,
        meters: &[usize],
        lags: &[f64],
    ) -> (Moments, KernelTensor) {
        let kernel = KernelTensor::build(basis, lags).unwrap();
        let learned = LearnedCovariance::new(
            a.clone(),
            kernel.clone(),
            basis.clone(),
            m.clone(),
            vec![],
            DVector::zeros(0),
        )
        .unwrap();
        let mats: Vec<_> = lags.iter().map(|&t| learned.sigma(t, meters).unwrap()).collect();
        let stds = mats[0].diagonal().map(f64::sqrt);
        (
            Moments::from_parts(lags.to_vec(), mats, meters.to_vec(), stds).unwrap(),
            kernel,
        )
    }

    #[test]
    fn zero_residual_recovery() {
        let m = model(4, 1);
        let basis = m.eigen_decompose().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_psd(4, &mut rng);
        let lags = [0.0, 0.1, 0.2, 0.4, 0.8];
        let meters = [0, 1, 2, 3];
        let (mom, kernel) = exact_moments(&m, &basis, &a, &meters, &lags);
        let cfg = FitConfig::new(Objective::L2, lags.to_vec());
        let (l2, rep) = fit_l2(&mom, &kernel, &basis, &m, &cfg).unwrap();
        assert_eq!(rep.rank, 10);
        assert!((l2.a() - &a).amax() < 1e-6, "{}", (l2.a() - &a).amax());
        let (l1, rep1) = fit_l1(&mom, &kernel, &basis, &m, &cfg).unwrap();
        assert!((l1.a() - &a).amax() < 1e-6);
        assert!(rep1.objective_value < 1e-9);
        assert!((l1.a() - l1.a().transpose()).amax() < 1e-10);
    }

    #[test]
    fn two_mode_toy_matches_normal_equations() {
        // 2 generators, both metered, lags 0 and 0.3; unknowns A00, A01, A11.
        let m = model(2, 3);
        let basis = m.eigen_decompose().unwrap();
        let lags = [0.0, 0.3];
        let kernel = KernelTensor::build(&basis, &lags).unwrap();
        let mats = vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.4]),
        ];
        let stds = DVector::from_vec(vec![1.0, 0.8f64.sqrt()]);
        let mom = Moments::from_parts(lags.to_vec(), mats.clone(), vec![0, 1], stds.clone()).unwrap();
        let cfg = FitConfig::new(Objective::L2, lags.to_vec());
        let (fit, _) = fit_l2(&mom, &kernel, &basis, &m, &cfg).unwrap();

        // Oracle: evaluate Σ_τ for each unit parameter, then solve XᵀX β = Xᵀy.
        let unit = |i: usize, j: usize| {
            let mut a = DMatrix::zeros(2, 2);
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
            LearnedCovariance::new(a, kernel.clone(), basis.clone(), m.clone(), vec![], DVector::zeros(0))
                .unwrap()
        };
        let params = [(0, 0), (0, 1), (1, 1)];
        let mut x = DMatrix::zeros(8, 3);
        let mut y = DVector::zeros(8);
        for (c, &(i, j)) in params.iter().enumerate() {
            let l = unit(i, j);
            for (li, &t) in lags.iter().enumerate() {
                let s = scale_both(&l.sigma(t, &[0, 1]).unwrap(), &stds);
                for a in 0..2 {
                    for b in 0..2 {
                        x[(li * 4 + a * 2 + b, c)] = s[(a, b)];
                    }
                }
            }
        }
        for (li, c) in mats.iter().enumerate() {
            let s = scale_both(c, &stds);
            for a in 0..2 {
                for b in 0..2 {
                    y[li * 4 + a * 2 + b] = s[(a, b)];
                }
            }
        }
        let beta = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        assert!((fit.a()[(0, 0)] - beta[0]).abs() < 1e-8);
        assert!((fit.a()[(0, 1)] - beta[1]).abs() < 1e-8);
        assert!((fit.a()[(1, 1)] - beta[2]).abs() < 1e-8);
    }

    fn noisy_problem(seed: u64, m_meters: usize) -> (GridModel, EigenBasis, Moments, KernelTensor, Vec<f64>) {
        let m = model(5, seed);
        let basis = m.eigen_decompose().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let a = random_psd(5, &mut rng);
        let lags = vec![0.0, 0.1, 0.3, 0.6];
        let meters: Vec<usize> = (0..m_meters).collect();
        let (mom, kernel) = exact_moments(&m, &basis, &a, &meters, &lags);
        let mats = mom
            .matrices()
            .iter()
            .map(|c| c.map(|v| v + 0.05 * (rng.random::<f64>() - 0.5)))
            .collect();
        let mom = Moments::from_parts(lags.clone(), mats, meters, mom.stds().clone()).unwrap();
        (m, basis, mom, kernel, lags)
    }

    #[test]
    fn l2_is_locally_optimal() {
        let (m, basis, mom, kernel, lags) = noisy_problem(11, 5);
        let cfg = FitConfig::new(Objective::L2, lags);
        let design = build_design(&mom, &kernel, &basis, &m, &cfg).unwrap();
        let (beta, rep) = solve(&design, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let e = DVector::from_fn(beta.len(), |_, _| rng.random::<f64>() - 0.5) * 1e-3;
            assert!(objective_value(&design, &(&beta + e), Objective::L2) >= rep.objective_value - 1e-12);
        }
    }

    #[test]
    fn l1_vertex_is_certified() {
        let (m, basis, mom, kernel, lags) = noisy_problem(12, 4);
        let cfg = FitConfig::new(Objective::L1, lags);
        let design = build_design(&mom, &kernel, &basis, &m, &cfg).unwrap();
        let (beta, rep) = solve(&design, &cfg).unwrap();
        assert!(rep.gap <= 1e-9 * rep.objective_value.max(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let e = DVector::from_fn(beta.len(), |_, _| rng.random::<f64>() - 0.5) * 1e-4;
            assert!(objective_value(&design, &(&beta + e), Objective::L1) >= rep.objective_value - 1e-10);
        }
    }

    #[test]
    fn more_lags_never_lower_the_optimum() {
        let (m, basis, mom, kernel, lags) = noisy_problem(13, 5);
        for objective in [Objective::L2, Objective::L1] {
            let sub = FitConfig::new(objective, lags[..2].to_vec());
            let sup = FitConfig::new(objective, lags.clone());
            let (_, a) = fit(&mom, &kernel, &basis, &m, &sub).unwrap();
            let (_, b) = fit(&mom, &kernel, &basis, &m, &sup).unwrap();
            assert!(b.objective_value >= a.objective_value - 1e-9);
        }
    }

    #[test]
    fn unobservable_modes_are_reported() {
        // One meter with only lag 0: one equation for many unknowns.
        let (m, basis, mom, kernel, _) = noisy_problem(14, 5);
        let single = Moments::from_parts(
            vec![0.0],
            vec![mom.matrix(0).view((0, 0), (1, 1)).into_owned()],
            vec![0],
            DVector::from_element(1, mom.stds()[0]),
        )
        .unwrap();
        let cfg = FitConfig::new(Objective::L2, vec![0.0]);
        let (_, rep) = fit_l2(&single, &kernel, &basis, &m, &cfg).unwrap();
        assert_eq!(rep.rank, 1);
        assert!(!rep.warnings.is_empty());
        assert!(rep.unidentified.len() >= 10);
    }

    #[test]
    fn config_rejections() {
        let (m, basis, mom, kernel, _) = noisy_problem(15, 3);
        let mut cfg = FitConfig::new(Objective::L2, vec![]);
        assert!(fit(&mom, &kernel, &basis, &m, &cfg).is_err());
        cfg.lags = vec![0.0];
        cfg.symmetry = false;
        assert!(fit(&mom, &kernel, &basis, &m, &cfg).is_err());
        cfg.symmetry = true;
        cfg.lags = vec![0.2];
        let err = fit(&mom, &kernel, &basis, &m, &cfg).unwrap_err().to_string();
        assert!(err.contains("not among the moment lags"), "{err}");
    }
}
