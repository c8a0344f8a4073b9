//! k-medoids grouping of generators by learned correlation, and the
//! reduced inference paths built on it.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::LearnedCovariance;
use crate::error::{Error, Result};
use crate::identify::{apply_mask, MeterWeights};
use crate::inference::{predict_functionals, selector_functionals, InferenceOptions, Prediction};
use crate::record::TimeSeriesRecord;

const MAX_SWAPS: usize = 200;
const RESTARTS: usize = 4;

/// Result of k-medoids on the generator distance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Medoid generator of each cluster, ascending.
    pub medoids: Vec<usize>,
    /// Cluster index of each generator.
    pub membership: Vec<usize>,
    #[serde(skip)]
    pub distances: DMatrix<f64>,
    /// Sum of member-to-medoid distances.
    pub cost: f64,
}

impl ClusterAssignment {
    /// Generators of cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.membership.len()).filter(|&g| self.membership[g] == c).collect()
    }

    /// Text export: one `generator_id = cluster` line per generator plus
    /// the medoid list.
    pub fn to_toml(&self, generator_ids: &[String]) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            k: usize,
            cost: f64,
            medoids: Vec<&'a str>,
            membership: std::collections::BTreeMap<&'a str, usize>,
        }
        let e = Export {
            k: self.k,
            cost: self.cost,
            medoids: self.medoids.iter().map(|&g| generator_ids[g].as_str()).collect(),
            membership: generator_ids
                .iter()
                .zip(&self.membership)
                .map(|(id, &c)| (id.as_str(), c))
                .collect(),
        };
        toml::to_string(&e).map_err(|err| Error::config(format!("cannot serialize clusters: {err}")))
    }
}

/// `max(2, round(n / 10))`, capped at `n`.
pub fn default_k(n: usize) -> usize {
    ((n as f64 / 10.0).round() as usize).max(2).min(n)
}

/// `d(i, j) = 1 − |ρ_ij|` from `Σ_0(A)` over all generators.
pub fn correlation_distances(learned: &LearnedCovariance) -> Result<DMatrix<f64>> {
    let s = learned.sigma_full(0.0)?;
    let n = s.nrows();
    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].max(0.0).sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            let rho = s[(i, j)] / (sd[i] * sd[j]);
            (1.0 - rho.abs()).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }))
}

fn total_cost(d: &DMatrix<f64>, medoids: &[usize]) -> f64 {
    (0..d.nrows())
        .map(|g| medoids.iter().map(|&m| d[(g, m)]).fold(f64::INFINITY, f64::min))
        .sum()
}

fn build(d: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let n = d.nrows();
    let mut medoids = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    for _ in 0..k {
        let mut best = (f64::INFINITY, usize::MAX);
        for c in (0..n).filter(|c| !medoids.contains(c)) {
            let cost: f64 = (0..n).map(|g| nearest[g].min(d[(g, c)])).sum();
            if cost < best.0 {
                best = (cost, c);
            }
        }
        medoids.push(best.1);
        for g in 0..n {
            nearest[g] = nearest[g].min(d[(g, best.1)]);
        }
    }
    medoids
}

/// Steepest-descent swap phase; returns the cost after each accepted swap.
fn swap(d: &DMatrix<f64>, medoids: &mut [usize]) -> Vec<f64> {
    let n = d.nrows();
    let mut cost = total_cost(d, medoids);
    let mut trace = vec![cost];
    for _ in 0..MAX_SWAPS {
        let mut best = (cost, usize::MAX, usize::MAX);
        let candidates: Vec<usize> = (0..n).filter(|c| !medoids.contains(c)).collect();
        for slot in 0..medoids.len() {
            let old = medoids[slot];
            for &c in &candidates {
                medoids[slot] = c;
                let trial = total_cost(d, medoids);
                if trial < best.0 - 1e-12 {
                    best = (trial, slot, c);
                }
            }
            medoids[slot] = old;
        }
        if best.1 == usize::MAX {
            break;
        }
        medoids[best.1] = best.2;
        cost = best.0;
        trace.push(cost);
    }
    trace
}

/// PAM on a precomputed distance matrix. Runs the greedy build plus
/// `RESTARTS` seeded random initializations and keeps the cheapest result
/// (earliest on ties).
pub fn k_medoids(d: &DMatrix<f64>, k: usize, seed: u64) -> Result<(ClusterAssignment, Vec<f64>)> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::invalid("distance matrix must be square"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cluster count {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inits = vec![build(d, k)];
    for _ in 0..RESTARTS {
        inits.push(index::sample(&mut rng, n, k).into_vec());
    }
    let mut best: Option<(Vec<usize>, f64, Vec<f64>)> = None;
    for mut medoids in inits {
        let trace = swap(d, &mut medoids);
        let cost = *trace.last().expect("nonempty");
        if best.as_ref().map_or(true, |b| cost < b.1 - 1e-12) {
            best = Some((medoids, cost, trace));
        }
    }
    let (mut medoids, cost, trace) = best.expect("at least one init");
    medoids.sort_unstable();
    let mut membership = (0..n)
        .map(|g| {
            let mut c = 0;
            for (idx, &m) in medoids.iter().enumerate() {
                if d[(g, m)] < d[(g, medoids[c])] {
                    c = idx;
                }
            }
            c
        })
        .collect::<Vec<_>>();
    for (c, &m) in medoids.iter().enumerate() {
        membership[m] = c;
    }
    Ok((
        ClusterAssignment {
            k,
            medoids,
            membership,
            distances: d.clone(),
            cost,
        },
        trace,
    ))
}

/// Clusters the generators of `learned` into `k` groups.
pub fn cluster_generators(learned: &LearnedCovariance, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let d = correlation_distances(learned)?;
    Ok(k_medoids(&d, k, seed)?.0)
}

/// Surviving meters of each cluster, in record column order.
fn cluster_meters(masked: &TimeSeriesRecord, assignment: &ClusterAssignment, c: usize) -> Vec<usize> {
    masked
        .meter_set()
        .iter()
        .copied()
        .filter(|&g| assignment.membership[g] == c)
        .collect()
}

fn check_assignment(learned: &LearnedCovariance, assignment: &ClusterAssignment) -> Result<()> {
    if assignment.membership.len() != learned.model().n() {
        return Err(Error::invalid("cluster assignment does not cover the model's generators"));
    }
    Ok(())
}

/// Predicts each target from the surviving meters of its own cluster.
pub fn infer_dimension_reduced(
    learned: &LearnedCovariance,
    record: &TimeSeriesRecord,
    weights: &MeterWeights,
    targets: &[usize],
    assignment: &ClusterAssignment,
    options: &InferenceOptions,
) -> Result<Prediction> {
    check_assignment(learned, assignment)?;
    if let Some(&g) = targets.iter().find(|g| record.meter_set().contains(g)) {
        return Err(Error::invalid(format!("target generator {g} is also a meter")));
    }
    if let Some(&g) = targets.iter().find(|&&g| g >= learned.model().n()) {
        return Err(Error::invalid(format!("target {g} is outside the model")));
    }
    let masked = apply_mask(record, weights)?;
    let orphans: Vec<usize> = targets
        .iter()
        .copied()
        .filter(|&g| cluster_meters(&masked, assignment, assignment.membership[g]).is_empty())
        .collect();
    if !orphans.is_empty() {
        return Err(Error::invalid(format!(
            "targets {orphans:?} lie in clusters without a surviving meter; use full conditioning for them or fewer clusters"
        )));
    }
    let ids = learned.model().generator_ids();
    let n = learned.model().n();
    let mut mean = DMatrix::zeros(record.ticks(), targets.len());
    let mut std = options.with_std.then(|| DMatrix::zeros(record.ticks(), targets.len()));
    let mut observed_dim = 0;
    for c in 0..assignment.k {
        let cols: Vec<usize> = (0..targets.len()).filter(|&j| assignment.membership[targets[j]] == c).collect();
        if cols.is_empty() {
            continue;
        }
        let group: Vec<usize> = cols.iter().map(|&j| targets[j]).collect();
        let local = masked.restrict_to_meters(&cluster_meters(&masked, assignment, c))?;
        let f = selector_functionals(&group, n)?;
        let labels = group.iter().map(|&g| format!("g{}", ids[g])).collect();
        let p = predict_functionals(learned, &local, &f, labels, options)?;
        observed_dim = observed_dim.max(p.observed_dim);
        for (k, &j) in cols.iter().enumerate() {
            mean.set_column(j, &p.mean.column(k));
            if let (Some(dst), Some(src)) = (std.as_mut(), p.std.as_ref()) {
                dst.set_column(j, &src.column(k));
            }
        }
    }
    Ok(Prediction {
        labels: targets.iter().map(|&g| format!("g{}", ids[g])).collect(),
        start_time: record.start_time(),
        reporting_rate: record.reporting_rate(),
        mean,
        std,
        observed_dim,
    })
}

/// Inertia weights `M_i / Σ_{j∈c} M_j` of each cluster, as `k × n` rows.
pub fn aggregate_functionals(learned: &LearnedCovariance, assignment: &ClusterAssignment) -> DMatrix<f64> {
    let n = learned.model().n();
    let m = learned.model().inertia();
    let mut f = DMatrix::zeros(assignment.k, n);
    for c in 0..assignment.k {
        let members = assignment.members(c);
        let total: f64 = members.iter().map(|&g| m[g]).sum();
        for g in members {
            f[(c, g)] = m[g] / total;
        }
    }
    f
}

/// Inertia-weighted cluster speeds of a full `T × n` speed matrix.
pub fn aggregate_signal(
    learned: &LearnedCovariance,
    assignment: &ClusterAssignment,
    speeds: &DMatrix<f64>,
) -> DMatrix<f64> {
    speeds * aggregate_functionals(learned, assignment).transpose()
}

/// Predicts one inertia-weighted aggregate speed per cluster from the
/// cluster's surviving meters.
pub fn infer_aggregate(
    learned: &LearnedCovariance,
    record: &TimeSeriesRecord,
    weights: &MeterWeights,
    assignment: &ClusterAssignment,
    options: &InferenceOptions,
) -> Result<Prediction> {
    check_assignment(learned, assignment)?;
    let masked = apply_mask(record, weights)?;
    let empty: Vec<usize> = (0..assignment.k)
        .filter(|&c| cluster_meters(&masked, assignment, c).is_empty())
        .collect();
    if !empty.is_empty() {
        let affected: Vec<usize> = empty.iter().flat_map(|&c| assignment.members(c)).collect();
        return Err(Error::invalid(format!(
            "clusters {empty:?} (generators {affected:?}) have no surviving meter; use full conditioning or fewer clusters"
        )));
    }
    let all = aggregate_functionals(learned, assignment);
    let mut mean = DMatrix::zeros(record.ticks(), assignment.k);
    let mut std = options.with_std.then(|| DMatrix::zeros(record.ticks(), assignment.k));
    let mut observed_dim = 0;
    for c in 0..assignment.k {
        let local = masked.restrict_to_meters(&cluster_meters(&masked, assignment, c))?;
        let f = all.rows(c, 1).into_owned();
        let p = predict_functionals(learned, &local, &f, vec![format!("cluster{c}")], options)?;
        observed_dim = observed_dim.max(p.observed_dim);
        mean.set_column(c, &p.mean.column(0));
        if let (Some(dst), Some(src)) = (std.as_mut(), p.std.as_ref()) {
            dst.set_column(c, &src.column(0));
        }
    }
    Ok(Prediction {
        labels: (0..assignment.k).map(|c| format!("cluster{c}")).collect(),
        start_time: record.start_time(),
        reporting_rate: record.reporting_rate(),
        mean,
        std,
        observed_dim,
    })
}
