//! Reference computations the acceptance tests compare against. None of them
//! calls into the routine it checks.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use gridgp::bench::Scenario;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// Loads a bundled scenario with its seeds replaced by `seed`.
pub fn bundled(name: &str, seed: Option<u64>) -> Scenario {
    let mut s = Scenario::load(scenario_dir().join(name)).expect("bundled scenario loads");
    s.outputs = None;
    match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    }
}

/// Slowest envelope decay rate (1/s) of `y'' + γy' + Λy`.
pub fn envelope_decay(gamma: f64, lambda: f64) -> f64 {
    let disc = gamma * gamma / 4.0 - lambda;
    if disc > 0.0 {
        gamma / 2.0 - disc.sqrt()
    } else {
        gamma / 2.0
    }
}

/// Monte-Carlo estimate of `E[y_i'(t + τ) y_j'(t)]` for two oscillators
/// `y'' + γy' + Λ y = ξ` sharing one unit white-noise input `ξ`.
///
/// Stochastic Heun integration; the record is long enough for
/// `effective` correlation times of the slower oscillator.
pub fn siso_cross_covariance(gamma: f64, li: f64, lj: f64, tau: f64, effective: f64, seed: u64) -> f64 {
    let decay = envelope_decay(gamma, li).min(envelope_decay(gamma, lj));
    let omega = li.max(lj).sqrt().max(gamma);
    let dt_max = (0.04 / omega).min(0.01);
    let lag_steps = if tau > 0.0 { (tau / dt_max).ceil() as usize } else { 0 };
    let dt = if lag_steps > 0 { tau / lag_steps as f64 } else { dt_max };
    let burn = (40.0 / decay / dt).ceil() as usize;
    let steps = (effective / decay / dt).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sq = dt.sqrt();
    let (mut y1, mut v1, mut y2, mut v2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut history = vec![0.0f64; lag_steps + 1];
    let mut head = 0usize;
    let mut acc = 0.0f64;
    for step in 0..burn + steps {
        let dw = sq * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let a1 = -gamma * v1 - li * y1;
        let a2 = -gamma * v2 - lj * y2;
        let (py1, pv1) = (y1 + v1 * dt, v1 + a1 * dt + dw);
        let (py2, pv2) = (y2 + v2 * dt, v2 + a2 * dt + dw);
        let b1 = -gamma * pv1 - li * py1;
        let b2 = -gamma * pv2 - lj * py2;
        y1 += 0.5 * (v1 + pv1) * dt;
        y2 += 0.5 * (v2 + pv2) * dt;
        v1 += 0.5 * (a1 + b1) * dt + dw;
        v2 += 0.5 * (a2 + b2) * dt + dw;

        history[head] = v2;
        let lagged = history[(head + 1) % history.len()];
        head = (head + 1) % history.len();
        if step >= burn + lag_steps {
            acc += v1 * lagged;
        }
    }
    acc / (steps - lag_steps) as f64
}

/// `min_β ‖y − Xβ‖₁` through the epigraph LP
/// `min Σ t  s.t.  t ≥ y − Xβ,  t ≥ Xβ − y`.
pub fn l1_epigraph(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let (n, p) = x.shape();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let beta: Vec<_> = (0..p)
        .map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY)))
        .collect();
    let t: Vec<_> = (0..n).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for k in 0..n {
        let mut up = vec![(t[k], 1.0)];
        let mut down = vec![(t[k], 1.0)];
        for c in 0..p {
            let v = x[(k, c)];
            if v != 0.0 {
                up.push((beta[c], v));
                down.push((beta[c], -v));
            }
        }
        lp.add_constraint(up.as_slice(), ComparisonOp::Ge, y[k]);
        lp.add_constraint(down.as_slice(), ComparisonOp::Ge, -y[k]);
    }
    let solution = lp.solve().expect("epigraph LP is feasible and bounded");
    solution.objective()
}

/// Minimizer of `Σ_ij G_ij (1 − w_i)(1 − w_j) + β Σ_i w_i` over binary `w`,
/// by enumeration. Returns the flagged positions.
pub fn exhaustive_mask(g: &DMatrix<f64>, beta: f64) -> Vec<usize> {
    let m = g.nrows();
    assert!(m <= 16, "enumeration is for small meter sets");
    let mut best = (f64::INFINITY, 0u32);
    for bits in 0..(1u32 << m) {
        let mut f = beta * bits.count_ones() as f64;
        for i in 0..m {
            for j in 0..m {
                if bits & (1 << i) == 0 && bits & (1 << j) == 0 {
                    f += g[(i, j)];
                }
            }
        }
        if f < best.0 {
            best = (f, bits);
        }
    }
    (0..m).filter(|&i| best.1 & (1 << i) != 0).collect()
}

/// Share of `Σ_ij |R_ij|` lying in rows or columns listed in `inside`.
pub fn mass_share(residual: &DMatrix<f64>, inside: &[bool]) -> f64 {
    let (mut hit, mut total) = (0.0, 0.0);
    for i in 0..residual.nrows() {
        for j in 0..residual.ncols() {
            let v = residual[(i, j)].abs();
            total += v;
            if inside[i] || inside[j] {
                hit += v;
            }
        }
    }
    hit / total
}

/// `(μ₂ + Σ₂₁ S⁻¹ (x₁ − μ₁), Σ₂₂ − Σ₂₁ S⁻¹ Σ₂₁ᵀ)` with `S⁻¹` from an LU inverse.
pub fn explicit_conditional(
    s11: &DMatrix<f64>,
    s21: &DMatrix<f64>,
    s22: &DMatrix<f64>,
    mu1: &DVector<f64>,
    mu2: &DVector<f64>,
    x1: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let inv = s11.clone().lu().try_inverse().expect("observed block is invertible");
    let gain = s21 * inv;
    (mu2 + &gain * (x1 - mu1), s22 - &gain * s21.transpose())
}
