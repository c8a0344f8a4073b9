//! Injection of false data, gross errors and clock drift into a record,
//! with ground-truth labels.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::record::TimeSeriesRecord;
use crate::simulate::{simulate, SimulationConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    FalseDataInjection,
    GrossErrors,
    ClockDrift,
}

/// What to corrupt and how. Parameters not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionPlan {
    pub kind: CorruptionKind,
    /// Generator indices of the attacked meters.
    pub target_meters: Vec<usize>,
    pub seed: u64,
    /// False data: perturbation scale (1 = input intensity ×1.5 and ±10% load).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Gross errors: number of corrupted samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Gross errors: absolute size of each error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// Clock drift: seconds of drift per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    /// Clock drift: resynchronization period in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
}

impl CorruptionPlan {
    pub fn fdi(target_meters: Vec<usize>, scale: f64, seed: u64) -> Self {
        Self::bare(CorruptionKind::FalseDataInjection, target_meters, seed).with(|p| p.scale = Some(scale))
    }

    pub fn gross(target_meters: Vec<usize>, count: usize, magnitude: f64, seed: u64) -> Self {
        Self::bare(CorruptionKind::GrossErrors, target_meters, seed).with(|p| {
            p.count = Some(count);
            p.magnitude = Some(magnitude);
        })
    }

    pub fn drift(target_meters: Vec<usize>, rate: f64, period: f64, seed: u64) -> Self {
        Self::bare(CorruptionKind::ClockDrift, target_meters, seed).with(|p| {
            p.rate = Some(rate);
            p.period = Some(period);
        })
    }

    fn bare(kind: CorruptionKind, target_meters: Vec<usize>, seed: u64) -> Self {
        CorruptionPlan {
            kind,
            target_meters,
            seed,
            scale: None,
            count: None,
            magnitude: None,
            rate: None,
            period: None,
        }
    }

    fn with(mut self, f: impl FnOnce(&mut Self)) -> Self {
        f(&mut self);
        self
    }

    fn expect_kind(&self, kind: CorruptionKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "plan is for {:?}, not {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Column positions of the targets in `record`.
    fn columns(&self, record: &TimeSeriesRecord) -> Result<Vec<usize>> {
        if self.target_meters.is_empty() {
            return Err(Error::invalid("corruption plan has no target meters"));
        }
        let mut cols = Vec::with_capacity(self.target_meters.len());
        for &g in &self.target_meters {
            let c = record.column_of(g).ok_or_else(|| {
                Error::invalid(format!("target generator {g} is not in the record's meter set"))
            })?;
            if cols.contains(&c) {
                return Err(Error::invalid(format!("target generator {g} is listed twice")));
            }
            cols.push(c);
        }
        Ok(cols)
    }
}

/// Generators whose columns were modified.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthLabels {
    pub corrupted: Vec<usize>,
}

impl TruthLabels {
    fn from_diff(original: &TimeSeriesRecord, corrupted: &DMatrix<f64>) -> Self {
        let mut out: Vec<usize> = (0..corrupted.ncols())
            .filter(|&c| original.values().column(c) != corrupted.column(c))
            .map(|c| original.meter_set()[c])
            .collect();
        out.sort_unstable();
        TruthLabels { corrupted: out }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize labels: {e}")))
    }
}

fn finish(record: &TimeSeriesRecord, values: DMatrix<f64>, note: String) -> Result<(TimeSeriesRecord, TruthLabels)> {
    let labels = TruthLabels::from_diff(record, &values);
    let mut out = record.with_values(values)?;
    out.metadata.provenance.push(note);
    Ok((out, labels))
}

/// Replaces each target column with the same generator's speed from a
/// parallel simulation under a perturbed input intensity and loading.
///
/// `simulation` must be the configuration that produced `record`. The
/// parallel run uses the plan's seed, intensity `Q·(1 + 0.5·scale)` and
/// Laplacian `S L S` with `S = diag(√(1 + δ_i))`, `δ_i ~ U[−0.1, 0.1]·scale`,
/// which keeps the network PSD.
pub fn inject_fdi(
    record: &TimeSeriesRecord,
    model: &GridModel,
    simulation: &SimulationConfig,
    plan: &CorruptionPlan,
) -> Result<(TimeSeriesRecord, TruthLabels)> {
    plan.expect_kind(CorruptionKind::FalseDataInjection)?;
    let cols = plan.columns(record)?;
    let scale = plan.scale.unwrap_or(1.0);
    if !(scale >= 0.0) {
        return Err(Error::invalid("false-data perturbation scale must be non-negative"));
    }
    if simulation.ticks() != record.ticks() || simulation.reporting_rate != record.reporting_rate() {
        return Err(Error::invalid(
            "the simulation configuration does not match the record's ticks and rate",
        ));
    }
    let n = model.n();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_fd1);
    let s = DVector::from_fn(n, |_, _| (1.0 + scale * 0.1 * (2.0 * rng.random::<f64>() - 1.0)).sqrt());
    let l = model.laplacian();
    let perturbed = if scale == 0.0 {
        model.clone()
    } else {
        model.with_laplacian(DMatrix::from_fn(n, n, |i, j| s[i] * l[(i, j)] * s[j]))?
    };
    let q = simulation.intensity(n)? * (1.0 + 0.5 * scale);
    let parallel = SimulationConfig {
        seed: plan.seed,
        input_intensity: Some((0..n).map(|i| q.row(i).iter().copied().collect()).collect()),
        ..simulation.clone()
    };
    let fake = simulate(&perturbed, &parallel)?;
    let mut values = record.values().clone();
    for (&g, &c) in plan.target_meters.iter().zip(&cols) {
        values.set_column(c, &fake.values().column(g));
    }
    finish(
        record,
        values,
        format!("false data injected on {:?} (scale {scale}, seed {})", plan.target_meters, plan.seed),
    )
}

/// Adds `±magnitude` at `count` distinct (target meter, tick) positions.
pub fn inject_gross_errors(record: &TimeSeriesRecord, plan: &CorruptionPlan) -> Result<(TimeSeriesRecord, TruthLabels)> {
    plan.expect_kind(CorruptionKind::GrossErrors)?;
    let cols = plan.columns(record)?;
    let count = plan
        .count
        .ok_or_else(|| Error::config("gross-error plan needs `count`"))?;
    let magnitude = plan.magnitude.unwrap_or(0.1);
    if !(magnitude.is_finite() && magnitude >= 0.0) {
        return Err(Error::invalid("gross-error magnitude must be finite and non-negative"));
    }
    let t = record.ticks();
    let positions = cols.len() * t;
    if count > positions {
        return Err(Error::invalid(format!(
            "{count} gross errors requested but only {positions} (meter, tick) positions exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut picks = index::sample(&mut rng, positions, count).into_vec();
    picks.sort_unstable();
    let mut values = record.values().clone();
    for p in picks {
        let (c, k) = (cols[p / t], p % t);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        values[(k, c)] += sign * magnitude;
    }
    finish(
        record,
        values,
        format!("{count} gross errors of ±{magnitude} on {:?} (seed {})", plan.target_meters, plan.seed),
    )
}

/// Reports each target at `t + rate·((t − t₀) mod period)`, linearly
/// interpolated between ticks; times past the last tick hold the last sample.
pub fn inject_clock_drift(record: &TimeSeriesRecord, plan: &CorruptionPlan) -> Result<(TimeSeriesRecord, TruthLabels)> {
    plan.expect_kind(CorruptionKind::ClockDrift)?;
    let cols = plan.columns(record)?;
    let rate = plan.rate.ok_or_else(|| Error::config("clock-drift plan needs `rate`"))?;
    let period = plan.period.unwrap_or(1.0);
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::invalid("drift rate must be non-negative"));
    }
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::invalid("resync period must be positive"));
    }
    let t = record.ticks();
    let dt = record.tick_interval();
    let duration = (t - 1) as f64 * dt;
    if rate * period >= duration {
        return Err(Error::invalid(format!(
            "maximum drift offset {} s exceeds the record duration {duration} s",
            rate * period
        )));
    }
    let mut values = record.values().clone();
    for &c in &cols {
        let src = record.values().column(c);
        for k in 0..t {
            let elapsed = k as f64 * dt;
            let cycles = ((elapsed + 1e-9 * period) / period).floor();
            let phase = (elapsed - cycles * period).max(0.0);
            let pos = k as f64 + rate * phase / dt;
            let lo = pos.floor() as usize;
            values[(k, c)] = if lo + 1 >= t {
                src[t - 1]
            } else {
                let frac = pos - lo as f64;
                src[lo] + frac * (src[lo + 1] - src[lo])
            };
        }
    }
    finish(
        record,
        values,
        format!("clock drift {rate} s/s, resync every {period} s on {:?}", plan.target_meters),
    )
}

/// Dispatches on the plan's kind.
pub fn inject(
    record: &TimeSeriesRecord,
    model: &GridModel,
    simulation: &SimulationConfig,
    plan: &CorruptionPlan,
) -> Result<(TimeSeriesRecord, TruthLabels)> {
    match plan.kind {
        CorruptionKind::FalseDataInjection => inject_fdi(record, model, simulation, plan),
        CorruptionKind::GrossErrors => inject_gross_errors(record, plan),
        CorruptionKind::ClockDrift => inject_clock_drift(record, plan),
    }
}
