//! Spatio-temporal kernel of the modal velocities.
//!
//! Each retained mode `i` is a scalar oscillator `y'' + γ y' + Λ_i y = x_i`
//! with unit-impulse response `h_i`. If the eigeninputs are white noise with
//! cross-intensity `A_ij`, the modal velocities have stationary
//! cross-covariance
//!
//! ```text
//! E[y_i'(t + τ) y_j'(t)] = A_ij K_τ[i, j],   K_τ[i, j] = ∫₀^∞ h_i'(τ + s) h_j'(s) ds   (τ ≥ 0)
//! ```
//!
//! and `K_{−τ} = K_τᵀ`. Writing `h_i'(t) = Σ_k α_k e^{s_k t}` over the two
//! characteristic roots gives the closed form
//! `K_τ[i, j] = −Σ_{k,l} α_k α_l e^{s_k τ} / (s_k + s_l)`, used everywhere
//! except within a hair of critical damping, where the root expansion loses
//! precision and adaptive quadrature of the defining integral takes over.

use num_complex::Complex64;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::EigenBasis;
use crate::quadrature;

/// Relative distance from critical damping below which quadrature is used.
const CRITICAL_BAND: f64 = 1e-6;
/// Relative tolerance of the quadrature route.
pub const QUADRATURE_RTOL: f64 = 1e-8;

/// Two-exponential representation of a mode's impulse-response derivative.
#[derive(Debug, Clone, Copy)]
struct ModeResponse {
    terms: [(Complex64, Complex64); 2], // (α, s)
}

impl ModeResponse {
    fn new(gamma: f64, lambda: f64) -> Self {
        let lambda = lambda.max(0.0);
        let half = gamma / 2.0;
        let disc = half * half - lambda;
        let (s1, s2) = if disc >= 0.0 {
            // Real roots; the slow root via Vieta to keep Λ = 0 exact.
            let fast = -half - disc.sqrt();
            (Complex64::new(lambda / fast, 0.0), Complex64::new(fast, 0.0))
        } else {
            let w = (-disc).sqrt();
            (Complex64::new(-half, w), Complex64::new(-half, -w))
        };
        let d = s1 - s2;
        ModeResponse {
            terms: [(s1 / d, s1), (-s2 / d, s2)],
        }
    }
}

fn near_critical(gamma: f64, lambda: f64) -> bool {
    let crit = gamma * gamma / 4.0;
    (lambda.max(0.0) - crit).abs() <= CRITICAL_BAND * crit
}

fn closed_form(gamma: f64, li: f64, lj: f64, tau: f64) -> f64 {
    let ri = ModeResponse::new(gamma, li);
    let rj = ModeResponse::new(gamma, lj);
    let mut acc = Complex64::new(0.0, 0.0);
    for &(ai, si) in &ri.terms {
        if ai.norm() == 0.0 {
            continue;
        }
        for &(aj, sj) in &rj.terms {
            if aj.norm() == 0.0 {
                continue;
            }
            acc -= ai * aj * (si * tau).exp() / (si + sj);
        }
    }
    acc.re
}

/// Real-arithmetic `h'(t)` valid through critical damping.
fn impulse_velocity(gamma: f64, lambda: f64, t: f64) -> f64 {
    let lambda = lambda.max(0.0);
    let half = gamma / 2.0;
    let disc = lambda - half * half;
    let (c, s) = if disc > 0.0 {
        let w = disc.sqrt();
        ((w * t).cos(), (w * t).sin() / w)
    } else {
        let k = (-disc).sqrt();
        let kt = k * t;
        let sinhc = if kt < 1e-4 {
            t * (1.0 + kt * kt / 6.0)
        } else {
            kt.sinh() / k
        };
        (kt.cosh(), sinhc)
    };
    (-half * t).exp() * (c - half * s)
}

/// Slowest decay rate of `h'` (for truncating the quadrature range).
fn decay_rate(gamma: f64, lambda: f64) -> f64 {
    let lambda = lambda.max(0.0);
    let half = gamma / 2.0;
    if lambda == 0.0 {
        gamma
    } else if lambda >= half * half {
        half
    } else {
        let fast = -half - (half * half - lambda).sqrt();
        (lambda / fast).abs()
    }
}

/// `K_τ[i, j]` by adaptive quadrature of the defining integral.
pub fn kernel_entry_quadrature(gamma: f64, li: f64, lj: f64, tau: f64) -> Result<f64> {
    if tau < 0.0 {
        return kernel_entry_quadrature(gamma, lj, li, -tau);
    }
    let rate = decay_rate(gamma, li) + decay_rate(gamma, lj);
    let span = (60.0 / rate).min(1e5);
    let wmax = [li, lj]
        .iter()
        .map(|l| (l.max(0.0) - gamma * gamma / 4.0).max(0.0).sqrt())
        .fold(0.0, f64::max);
    // At least ~4 panels per oscillation period.
    let panels = if wmax > 0.0 {
        ((span * wmax / (2.0 * std::f64::consts::PI)) * 4.0).ceil() as usize
    } else {
        16
    }
    .clamp(16, 200_000);
    quadrature::integrate(
        |s| impulse_velocity(gamma, li, tau + s) * impulse_velocity(gamma, lj, s),
        0.0,
        span,
        panels,
        QUADRATURE_RTOL * 0.1,
        0.0,
        panels * 64,
    )
    .ok_or_else(|| {
        Error::numerical(format!(
            "kernel quadrature did not converge for mode pair (Λ_i = {li}, Λ_j = {lj}) at τ = {tau}"
        ))
    })
}

/// Scalar kernel value `K_τ[i, j]` for modes with eigenvalues `li`, `lj`.
pub fn kernel_entry(gamma: f64, li: f64, lj: f64, tau: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("kernel requires a positive damping ratio"));
    }
    if !tau.is_finite() {
        return Err(Error::invalid("kernel lag must be finite"));
    }
    if tau < 0.0 {
        return kernel_entry(gamma, lj, li, -tau);
    }
    if near_critical(gamma, li) || near_critical(gamma, lj) {
        kernel_entry_quadrature(gamma, li, lj, tau)
    } else {
        Ok(closed_form(gamma, li, lj, tau))
    }
}

/// `r × r` kernel matrix over the retained modes of `basis` at lag `tau` (s).
pub fn kernel_matrix(basis: &EigenBasis, tau: f64) -> Result<DMatrix<f64>> {
    let lam = basis.retained_eigenvalues();
    let r = lam.len();
    let g = basis.gamma();
    let mut k = DMatrix::zeros(r, r);
    for j in 0..r {
        for i in 0..r {
            k[(i, j)] = kernel_entry(g, lam[i], lam[j], tau)?;
        }
    }
    Ok(k)
}

/// Kernel matrices for an ordered list of lags.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor {
    lags: Vec<f64>,
    entries: Vec<DMatrix<f64>>,
    gamma: f64,
    lambda: Vec<f64>,
}

impl KernelTensor {
    pub fn build(basis: &EigenBasis, lags: &[f64]) -> Result<Self> {
        if lags.is_empty() {
            return Err(Error::invalid("kernel needs at least one lag"));
        }
        let entries = lags
            .iter()
            .map(|&t| kernel_matrix(basis, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelTensor {
            lags: lags.to_vec(),
            entries,
            gamma: basis.gamma(),
            lambda: basis.retained_eigenvalues(),
        })
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Eigenvalues of the modes the kernel covers.
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// Number of modes.
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    /// Position of a lag in the tensor.
    pub fn lag_index(&self, tau: f64) -> Result<usize> {
        self.lags
            .iter()
            .position(|&l| (l - tau).abs() <= 1e-9 * tau.abs().max(1.0))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "lag {tau} s is not in the kernel; available lags: {:?}",
                    self.lags
                ))
            })
    }

    /// `K_τ` for a configured lag.
    pub fn at(&self, tau: f64) -> Result<&DMatrix<f64>> {
        Ok(&self.entries[self.lag_index(tau)?])
    }

    /// `K` at the `idx`-th configured lag.
    pub fn matrix(&self, idx: usize) -> &DMatrix<f64> {
        &self.entries[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    #[test]
    fn zero_lag_autocovariance_is_one_over_two_gamma() {
        // E[y'²] for unit white noise is 1 / (2γ), independent of Λ.
        for &(g, l) in &[(0.4, 4.0), (1.0, 0.0), (2.0, 0.3), (0.5, 100.0)] {
            let k = kernel_entry(g, l, l, 0.0).unwrap();
            assert!((k - 1.0 / (2.0 * g)).abs() < 1e-12, "γ={g} Λ={l}: {k}");
        }
    }

    #[test]
    fn rigid_mode_is_exponential() {
        // Λ = 0: h' = e^{-γt} so K_τ = e^{-γτ} / (2γ).
        let g = 0.7;
        for &tau in &[0.0, 0.3, 2.0] {
            let k = kernel_entry(g, 0.0, 0.0, tau).unwrap();
            assert!((k - (-g * tau).exp() / (2.0 * g)).abs() < 1e-14);
        }
    }

    #[test]
    fn negative_lag_transposes() {
        let a = kernel_entry(0.5, 3.0, 7.0, -0.4).unwrap();
        let b = kernel_entry(0.5, 7.0, 3.0, 0.4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decays_at_long_lag() {
        let g = 0.4;
        let k0 = kernel_entry(g, 4.0, 4.0, 0.0).unwrap();
        let k = kernel_entry(g, 4.0, 9.0, 40.0 / g).unwrap();
        assert!(k.abs() < 1e-6 * k0);
    }

    #[test]
    fn matrix_is_symmetric_at_zero_lag() {
        let basis = EigenBasis::from_parts(
            DMatrix::identity(3, 3),
            DVector::from_vec(vec![0.0, 5.0, 40.0]),
            0.8,
        )
        .unwrap();
        let k = kernel_matrix(&basis, 0.0).unwrap();
        assert!((&k - k.transpose()).amax() < 1e-12);
        assert!(k.diagonal().iter().all(|v| *v > 0.0));
        let t = KernelTensor::build(&basis, &[0.0, 0.25]).unwrap();
        assert!(t.at(0.25).is_ok());
        let err = t.at(0.3).unwrap_err().to_string();
        assert!(err.contains("available lags"));
    }

    #[test]
    fn critical_damping_uses_quadrature_and_is_continuous() {
        let g = 2.0;
        let crit = 1.0;
        let at = kernel_entry(g, crit, 3.0, 0.7).unwrap();
        let below = closed_form(g, crit * (1.0 - 1e-4), 3.0, 0.7);
        let above = closed_form(g, crit * (1.0 + 1e-4), 3.0, 0.7);
        assert!((at - below).abs() < 1e-4 && (at - above).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn closed_form_matches_quadrature(
            g in 0.2f64..3.0,
            li in 0.0f64..200.0,
            lj in 0.0f64..200.0,
            tau in -3.0f64..3.0,
        ) {
            let cf = closed_form(g, li, lj, tau.abs());
            let cf = if tau < 0.0 { closed_form(g, lj, li, -tau) } else { cf };
            let q = kernel_entry_quadrature(g, li, lj, tau).unwrap();
            let scale = 1.0 / (2.0 * g);
            prop_assert!((cf - q).abs() <= 1e-6 * scale, "cf {} quad {}", cf, q);
        }
    }
}
