//! Stochastic swing-equation simulator.
//!
//! Integrates `M ω' = −γ M ω − L θ + p`, `θ' = ω` driven by zero-mean white
//! noise `p` of intensity `Q`, then decimates to the PMU reporting rate.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{relative_asymmetry, EigenBasis, GridModel};
use crate::record::{RecordMetadata, TimeSeriesRecord};

const BLOWUP: f64 = 1e6;

fn default_sigma() -> f64 {
    1.0
}

/// Simulation settings.
///
/// The input intensity is `input_intensity` when given, else `noise_sigma² I`.
/// Burn-in defaults to `20 / γ` seconds, capped at `duration` so that it never
/// exceeds half of the integrated span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Integration step (s).
    pub integration_step: f64,
    /// Length of the recorded window after burn-in (s).
    pub duration: f64,
    /// PMU reporting rate (samples/s).
    pub reporting_rate: f64,
    pub seed: u64,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_intensity: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    /// Initial generator speeds (defaults to rest).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_speed: Option<Vec<f64>>,
}

impl SimulationConfig {
    pub fn new(integration_step: f64, duration: f64, reporting_rate: f64, seed: u64) -> Self {
        SimulationConfig {
            integration_step,
            duration,
            reporting_rate,
            seed,
            noise_sigma: 1.0,
            input_intensity: None,
            burn_in: None,
            initial_speed: None,
        }
    }

    /// Number of reporting ticks in the recorded window.
    pub fn ticks(&self) -> usize {
        (self.duration * self.reporting_rate).round() as usize
    }

    /// Input intensity matrix `Q` for `n` generators.
    pub fn intensity(&self, n: usize) -> Result<DMatrix<f64>> {
        match &self.input_intensity {
            None => Ok(DMatrix::identity(n, n) * self.noise_sigma.powi(2)),
            Some(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config(format!("input intensity must be {n}x{n}")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }

    /// Effective burn-in for damping ratio `gamma`.
    pub fn burn_in_for(&self, gamma: f64) -> Result<f64> {
        match self.burn_in {
            Some(b) if b < 0.0 => Err(Error::invalid("burn-in must be non-negative")),
            Some(b) if b > self.duration => Err(Error::invalid(format!(
                "duration {} s is shorter than the requested burn-in {b} s",
                self.duration
            ))),
            Some(b) => Ok(b),
            None => Ok((20.0 / gamma).min(self.duration)),
        }
    }

    fn validate(&self, n: usize) -> Result<DMatrix<f64>> {
        if !(self.reporting_rate > 0.0 && self.reporting_rate.is_finite()) {
            return Err(Error::invalid("reporting rate must be positive"));
        }
        if !(self.integration_step > 0.0)
            || self.integration_step > 1.0 / (2.0 * self.reporting_rate) + 1e-15
        {
            return Err(Error::invalid(format!(
                "integration step {} s must be positive and at most half the reporting interval ({} s)",
                self.integration_step,
                1.0 / (2.0 * self.reporting_rate)
            )));
        }
        if self.ticks() < 2 {
            return Err(Error::invalid("duration yields fewer than 2 reporting ticks"));
        }
        let q = self.intensity(n)?;
        if relative_asymmetry(&q) > 1e-10 {
            return Err(Error::invalid("input intensity Q is not symmetric"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input intensity Q has non-finite entries"));
        }
        let scale = q.amax().max(f64::MIN_POSITIVE);
        if q.norm() > 0.0 && q.clone().symmetric_eigenvalues().min() < -1e-10 * scale {
            return Err(Error::invalid("input intensity Q is not positive semidefinite"));
        }
        if let Some(w0) = &self.initial_speed {
            if w0.len() != n {
                return Err(Error::invalid(format!("initial speed needs {n} entries")));
            }
        }
        Ok(q)
    }
}

/// Symmetric PSD square root via eigen decomposition (handles singular `Q`).
pub(crate) fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = q.clone().symmetric_eigen();
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Runs the stochastic swing equations and returns all `n` speed columns.
///
/// The scheme is the semi-implicit Euler–Maruyama step (speed first, then
/// angle with the updated speed), which keeps the discrete oscillator's
/// damping equal to γ. Recording starts after the burn-in and samples the
/// state at each reporting instant without averaging.
pub fn simulate(model: &GridModel, config: &SimulationConfig) -> Result<TimeSeriesRecord> {
    let n = model.n();
    let q = config.validate(n)?;
    let burn_in = config.burn_in_for(model.gamma())?;
    let dt = config.integration_step;
    let ticks = config.ticks();
    let rate = config.reporting_rate;

    let minv = model.inertia().map(|m| 1.0 / m);
    // B = M⁻¹ L, column-major for the inner product loop.
    let b = DMatrix::from_fn(n, n, |i, j| minv[i] * model.laplacian()[(i, j)]);
    // G = M⁻¹ Q^{1/2} √dt
    let root = psd_sqrt(&q);
    let g = DMatrix::from_fn(n, n, |i, j| minv[i] * root[(i, j)] * dt.sqrt());
    let noisy = g.amax() > 0.0;

    let tick_step = |k: usize| ((burn_in + k as f64 / rate) / dt).round() as u64;
    let total_steps = tick_step(ticks - 1);

    let mut theta = DVector::<f64>::zeros(n);
    let mut omega = match &config.initial_speed {
        Some(w0) => DVector::from_column_slice(w0),
        None => DVector::zeros(n),
    };
    let mut lt = DVector::<f64>::zeros(n);
    let mut xi = DVector::<f64>::zeros(n);
    let mut kick = DVector::<f64>::zeros(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gamma = model.gamma();

    let mut out = DMatrix::<f64>::zeros(ticks, n);
    let mut next_tick = 0usize;
    let mut next_step = tick_step(0);
    let mut step: u64 = 0;
    loop {
        while next_tick < ticks && step == next_step {
            out.row_mut(next_tick).copy_from(&omega.transpose());
            next_tick += 1;
            if next_tick < ticks {
                next_step = tick_step(next_tick);
            }
        }
        if step >= total_steps {
            break;
        }
        lt.gemv(1.0, &b, &theta, 0.0);
        if noisy {
            for v in xi.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            kick.gemv(1.0, &g, &xi, 0.0);
        }
        for i in 0..n {
            let mut w = omega[i] + dt * (-gamma * omega[i] - lt[i]);
            if noisy {
                w += kick[i];
            }
            omega[i] = w;
            theta[i] += dt * w;
        }
        step += 1;
        if step % 4096 == 0 && !state_ok(&omega, &theta) {
            return Err(unstable(dt, step));
        }
    }
    if !state_ok(&omega, &theta) || out.iter().any(|v| !v.is_finite()) {
        return Err(unstable(dt, step));
    }

    TimeSeriesRecord::new(
        out,
        rate,
        0.0,
        (0..n).collect(),
        model.generator_ids().to_vec(),
        RecordMetadata {
            units: "p.u. speed deviation".into(),
            seed: Some(config.seed),
            provenance: vec![format!(
                "simulated: dt={dt} s, burn_in={burn_in} s, rate={rate}/s"
            )],
        },
    )
}

fn state_ok(omega: &DVector<f64>, theta: &DVector<f64>) -> bool {
    omega.iter().chain(theta.iter()).all(|v| v.is_finite() && v.abs() < BLOWUP)
}

fn unstable(dt: f64, step: u64) -> Error {
    Error::numerical(format!(
        "integration became unstable at step {step} (state norm above {BLOWUP:e}); \
         reduce the integration step {dt} s"
    ))
}

/// Eigeninput intensity `Vᵀ M^{-1/2} Q M^{-1/2} V` over the retained modes:
/// the parameter matrix that reproduces the simulator's stationary speed
/// covariance exactly.
pub fn eigeninput_intensity(model: &GridModel, basis: &EigenBasis, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = model.n();
    let s = model.inertia().map(|m| 1.0 / m.sqrt());
    let scaled = DMatrix::from_fn(n, n, |i, j| s[i] * q[(i, j)] * s[j]);
    let v = basis.retained_vectors();
    let a = v.transpose() * scaled * &v;
    (&a + a.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_machine() -> GridModel {
        GridModel::new(
            vec!["1".into()],
            DVector::from_element(1, 1.0),
            0.4,
            DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap()
    }

    fn three_machine() -> GridModel {
        let l = DMatrix::from_row_slice(
            3,
            3,
            &[3.0, -2.0, -1.0, -2.0, 5.0, -3.0, -1.0, -3.0, 4.0],
        );
        GridModel::new(
            vec!["a".into(), "b".into(), "c".into()],
            DVector::from_vec(vec![2.0, 3.0, 4.0]),
            1.0,
            l,
        )
        .unwrap()
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let mut cfg = SimulationConfig::new(1e-3, 2.0, 50.0, 1);
        cfg.noise_sigma = 0.0;
        let r = simulate(&three_machine(), &cfg).unwrap();
        assert!(r.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reporting_rate_240_for_10_seconds() {
        let cfg = SimulationConfig::new(1e-3, 10.0, 240.0, 1);
        assert_eq!(cfg.ticks(), 2400);
        let mut quick = cfg.clone();
        quick.burn_in = Some(0.0);
        let r = simulate(&single_machine(), &quick).unwrap();
        assert_eq!(r.ticks(), 2400);
    }

    /// Analytic speed response to a unit impulse of the scalar oscillator
    /// `y'' + 0.4 y' + 4 y = δ`: the derivative of `e^{-γt/2} sin(ω_d t)/ω_d`.
    fn impulse_speed(t: f64) -> f64 {
        let (g, lam) = (0.4f64, 4.0f64);
        let wd = (lam - g * g / 4.0).sqrt();
        (-g * t / 2.0).exp() * ((wd * t).cos() - g / (2.0 * wd) * (wd * t).sin())
    }

    fn impulse_error(dt: f64) -> f64 {
        let mut cfg = SimulationConfig::new(dt, 10.0, 20.0, 0);
        cfg.noise_sigma = 0.0;
        cfg.burn_in = Some(0.0);
        cfg.initial_speed = Some(vec![1.0]);
        let r = simulate(&single_machine(), &cfg).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..r.ticks() {
            let want = impulse_speed(r.time(k));
            num += (r.values()[(k, 0)] - want).powi(2);
            den += want * want;
        }
        (num / den).sqrt()
    }

    #[test]
    fn impulse_matches_damped_oscillator() {
        let coarse = impulse_error(1e-3);
        let fine = impulse_error(1e-4);
        assert!(fine < 0.01, "relative error {fine}");
        assert!(fine < coarse);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let cfg = SimulationConfig::new(1e-3, 3.0, 30.0, 42);
        let a = simulate(&three_machine(), &cfg).unwrap();
        let b = simulate(&three_machine(), &cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(a, simulate(&three_machine(), &other).unwrap());
    }

    #[test]
    fn step_halving_converges() {
        // Different step sizes draw different noise increments, so the
        // comparison uses the deterministic impulse response.
        let mut det = SimulationConfig::new(2e-3, 20.0, 10.0, 0);
        det.noise_sigma = 0.0;
        det.burn_in = Some(0.0);
        det.initial_speed = Some(vec![1.0, 0.0, -0.5]);
        let a = simulate(&three_machine(), &det).unwrap();
        det.integration_step = 1e-3;
        let b = simulate(&three_machine(), &det).unwrap();
        let diff = (a.values() - b.values()).norm() / b.values().norm();
        assert!(diff < 0.02, "rms change {diff}");
    }

    #[test]
    fn variance_is_stationary() {
        let mut cfg = SimulationConfig::new(2e-3, 4000.0, 10.0, 11);
        cfg.burn_in = Some(20.0);
        let long = simulate(&three_machine(), &cfg).unwrap();
        let var = |r: &TimeSeriesRecord, upto: usize| -> Vec<f64> {
            (0..3)
                .map(|c| {
                    let col = r.values().column(c);
                    let x = col.rows(0, upto);
                    let mean = x.mean();
                    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / upto as f64
                })
                .collect()
        };
        let half = var(&long, long.ticks() / 2);
        let full = var(&long, long.ticks());
        for (h, f) in half.iter().zip(&full) {
            assert!(((h - f) / f).abs() < 0.1, "{h} vs {f}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let m = single_machine();
        let cfg = SimulationConfig::new(0.1, 1.0, 10.0, 0);
        assert!(simulate(&m, &cfg).is_err());
        let mut cfg = SimulationConfig::new(1e-3, 1.0, 10.0, 0);
        cfg.burn_in = Some(5.0);
        assert!(simulate(&m, &cfg).unwrap_err().to_string().contains("shorter than"));
    }

    #[test]
    fn unstable_step_is_reported() {
        // Explicit position step with ω dt ≫ 2 diverges.
        let stiff = GridModel::new(
            vec!["1".into()],
            DVector::from_element(1, 1.0),
            0.1,
            DMatrix::from_element(1, 1, 4.0e6),
        )
        .unwrap();
        let mut cfg = SimulationConfig::new(4e-3, 20.0, 100.0, 0);
        cfg.burn_in = Some(0.0);
        let err = simulate(&stiff, &cfg).unwrap_err();
        assert!(err.to_string().contains("0.004"), "{err}");
    }

    #[test]
    fn default_burn_in_is_capped() {
        let cfg = SimulationConfig::new(1e-3, 10.0, 30.0, 0);
        assert_eq!(cfg.burn_in_for(0.5).unwrap(), 10.0);
        assert_eq!(cfg.burn_in_for(4.0).unwrap(), 5.0);
    }
}
