//! Scenario files and the end-to-end experiment runner.
//!
//! A scenario names a model file, a simulation, the metered and target
//! generators, an optional corruption plan and the learning settings. Running
//! it simulates, corrupts, fits both objectives, identifies corrupted meters,
//! predicts the targets with and without the mask (and with the clustered
//! shortcuts when configured), scores everything and writes plot-ready files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    aggregate_signal, cluster_generators, default_k, infer_aggregate, infer_dimension_reduced, ClusterAssignment,
};
use crate::corruption::{inject, CorruptionPlan, TruthLabels};
use crate::covariance::{sample_moments, snap_lags, LearnedCovariance, Moments};
use crate::error::{Error, Result};
use crate::grid::{EigenBasis, GridModel};
use crate::identify::{identify, identify_refined, IdentifyConfig, MeterWeights};
use crate::inference::{predict_nonmetered, InferenceOptions, Prediction};
use crate::kernel::KernelTensor;
use crate::learning::{fit_l1, fit_l2, FitConfig, FitReport, Objective};
use crate::metrics::{normalized_rmse, score_identification, IdentificationScore};
use crate::record::{write_columns, TimeSeriesRecord};
use crate::simulate::{simulate, SimulationConfig};

/// Either an explicit index list or a spec string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexSpec {
    List(Vec<usize>),
    /// `"random:<count>@<seed>"` for meters, `"unmetered"` for targets.
    Spec(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    /// Lags (s) of the covariance fit.
    pub lags: Vec<f64>,
    pub beta: f64,
    /// Lags of the identification objective (default: the fit lags).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identify_lags: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub identify_seed: u64,
    #[serde(default)]
    pub refine_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    /// Number of clusters (default `max(2, round(n/10))`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    /// Ticks per conditioning window.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Seconds at the start of the record that are predicted and scored
    /// (default: the whole record).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "yes")]
    pub with_std: bool,
}

fn default_window() -> usize {
    240
}
fn yes() -> bool {
    true
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            window: default_window(),
            horizon: None,
            with_std: true,
        }
    }
}

/// One experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Model file, relative to the scenario file.
    pub model_path: PathBuf,
    pub simulation: SimulationConfig,
    pub meters: IndexSpec,
    pub targets: IndexSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionPlan>,
    pub learning: LearningSection,
    /// Retain only modes whose damped frequency lies in `[lo, hi]` Hz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandpass: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringSection>,
    #[serde(default)]
    pub inference: InferenceSection,
    /// Output directory (default `out/<name>`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        s.base_dir = base_dir.into();
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize scenario: {e}")))
    }

    pub fn resolved_model_path(&self) -> PathBuf {
        self.base_dir.join(&self.model_path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.outputs.clone().unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }

    pub fn load_model(&self) -> Result<GridModel> {
        let path = self.resolved_model_path();
        if !path.exists() {
            return Err(Error::config(format!("model file {} does not exist", path.display())));
        }
        GridModel::load(path)
    }

    /// Resolved `(meters, targets)`, validated against `n` generators.
    pub fn index_sets(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let explicit_targets = match &self.targets {
            IndexSpec::List(t) => Some(sorted(t)),
            IndexSpec::Spec(s) if s == "unmetered" => None,
            IndexSpec::Spec(s) => {
                return Err(Error::config(format!("targets must be a list or \"unmetered\", got {s:?}")))
            }
        };
        let meters = match &self.meters {
            IndexSpec::List(m) => sorted(m),
            IndexSpec::Spec(s) => {
                let (count, seed) = parse_random(s)?;
                let pool: Vec<usize> = (0..n)
                    .filter(|g| explicit_targets.as_ref().map_or(true, |t| !t.contains(g)))
                    .collect();
                if count > pool.len() {
                    return Err(Error::config(format!(
                        "{count} meters requested but only {} generators are available",
                        pool.len()
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
                picked.sort_unstable();
                picked
            }
        };
        let targets = explicit_targets.unwrap_or_else(|| (0..n).filter(|g| !meters.contains(g)).collect());
        if meters.is_empty() {
            return Err(Error::config("the scenario has no meters"));
        }
        if targets.is_empty() {
            return Err(Error::config("the scenario has no targets"));
        }
        if let Some(g) = meters.iter().chain(&targets).find(|&&g| g >= n) {
            return Err(Error::config(format!("generator index {g} is outside the {n}-generator model")));
        }
        if meters.windows(2).any(|w| w[0] == w[1]) || targets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("meter and target lists must not repeat generators"));
        }
        if let Some(g) = targets.iter().find(|g| meters.contains(g)) {
            return Err(Error::config(format!("generator {g} is both a meter and a target")));
        }
        if let Some(plan) = &self.corruption {
            if let Some(g) = plan.target_meters.iter().find(|g| !meters.contains(g)) {
                return Err(Error::config(format!("corrupted generator {g} is not metered")));
            }
        }
        Ok((meters, targets))
    }

    /// Replaces the simulation and corruption seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.simulation.seed = seed;
        if let Some(plan) = self.corruption.as_mut() {
            plan.seed = seed;
        }
        self
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            window: self.inference.window,
            with_std: self.inference.with_std,
        }
    }

    /// Ticks of a `ticks`-long record used for prediction and scoring.
    pub fn horizon_ticks(&self, ticks: usize) -> usize {
        match self.inference.horizon {
            Some(h) => ((h * self.simulation.reporting_rate).round() as usize).clamp(2, ticks),
            None => ticks,
        }
    }

    fn fit_config(&self, lags: Vec<f64>) -> FitConfig {
        let mut c = FitConfig::new(Objective::L1, lags);
        if let Some(t) = self.learning.tolerance {
            c.tolerance = t;
        }
        if let Some(m) = self.learning.max_iterations {
            c.max_iterations = m;
        }
        if let Some(r) = self.learning.rank_tolerance {
            c.rank_tolerance = r;
        }
        c
    }

    fn identify_config(&self, lags: Vec<f64>) -> IdentifyConfig {
        let mut c = IdentifyConfig::new(self.learning.beta, lags);
        if let Some(r) = self.learning.restarts {
            c.restarts = r;
        }
        c.seed = self.learning.identify_seed;
        c.refine_rounds = self.learning.refine_rounds;
        c
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

fn parse_random(s: &str) -> Result<(usize, u64)> {
    let bad = || Error::config(format!("meter spec {s:?} is not of the form \"random:<count>@<seed>\""));
    let rest = s.strip_prefix("random:").ok_or_else(bad)?;
    let (count, seed) = rest.split_once('@').ok_or_else(bad)?;
    Ok((count.trim().parse().map_err(|_| bad())?, seed.trim().parse().map_err(|_| bad())?))
}

/// Eigenbasis of `model`, band-limited when the scenario asks for it.
pub fn scenario_basis(model: &GridModel, bandpass: Option<[f64; 2]>) -> Result<EigenBasis> {
    let basis = model.eigen_decompose()?;
    match bandpass {
        Some([lo, hi]) => basis.select_modes(lo, hi),
        None => Ok(basis),
    }
}

/// Fit and identification lags snapped to the reporting grid, plus their union.
pub fn scenario_lags(scenario: &Scenario) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let rate = scenario.simulation.reporting_rate;
    let fit = snap_lags(&scenario.learning.lags, rate)?;
    let ident = match &scenario.learning.identify_lags {
        Some(l) => snap_lags(l, rate)?,
        None => fit.clone(),
    };
    let mut all: Vec<f64> = fit.iter().chain(&ident).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    Ok((fit, ident, all))
}

/// Learned `A` with the metadata needed to rebuild the covariance model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedFile {
    pub objective: Objective,
    pub lags: Vec<f64>,
    pub retained_modes: Vec<usize>,
    pub meters: Vec<usize>,
    pub normalization: Vec<f64>,
    pub a: Vec<Vec<f64>>,
}

impl LearnedFile {
    pub fn from_learned(learned: &LearnedCovariance, objective: Objective) -> Self {
        let a = learned.a();
        LearnedFile {
            objective,
            lags: learned.kernel().lags().to_vec(),
            retained_modes: learned.basis().retained_modes().to_vec(),
            meters: learned.meters().to_vec(),
            normalization: learned.normalization().iter().copied().collect(),
            a: (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect(),
        }
    }

    pub fn into_learned(self, model: &GridModel) -> Result<LearnedCovariance> {
        let basis = model.eigen_decompose()?.with_retained(self.retained_modes)?;
        let r = basis.rank();
        if self.a.len() != r || self.a.iter().any(|row| row.len() != r) {
            return Err(Error::config(format!("learned A must be {r} × {r}")));
        }
        let a = DMatrix::from_fn(r, r, |i, j| self.a[i][j]);
        let kernel = KernelTensor::build(&basis, &self.lags)?;
        LearnedCovariance::new(
            a,
            kernel,
            basis,
            model.clone(),
            self.meters,
            DVector::from_vec(self.normalization),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::config(e.to_string()))?;
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Both fits on one set of moments.
pub struct Fits {
    pub moments: Moments,
    pub l1: LearnedCovariance,
    pub l1_report: FitReport,
    pub l2: LearnedCovariance,
    pub l2_report: FitReport,
}

/// Sample moments of `record` over every fit and identification lag.
pub fn scenario_moments(scenario: &Scenario, record: &TimeSeriesRecord) -> Result<Moments> {
    sample_moments(record, &scenario_lags(scenario)?.2)
}

/// Sample moments of `record` over every scenario lag, then both fits.
pub fn learn_stage(scenario: &Scenario, model: &GridModel, record: &TimeSeriesRecord) -> Result<Fits> {
    let (fit_lags, _, all) = scenario_lags(scenario)?;
    let basis = scenario_basis(model, scenario.bandpass)?;
    let moments = scenario_moments(scenario, record)?;
    let kernel = KernelTensor::build(&basis, &all)?;
    let cfg = scenario.fit_config(fit_lags);
    let (l2, l2_report) = fit_l2(&moments, &kernel, &basis, model, &cfg)?;
    let (l1, l1_report) = fit_l1(&moments, &kernel, &basis, model, &cfg)?;
    Ok(Fits {
        moments,
        l1,
        l1_report,
        l2,
        l2_report,
    })
}

/// Identification on the absolute-deviation fit; returns the weights and
/// the covariance model to use for masked inference.
pub fn identify_stage(
    scenario: &Scenario,
    moments: &Moments,
    l1: &LearnedCovariance,
) -> Result<(MeterWeights, LearnedCovariance)> {
    let (fit_lags, ident_lags, _) = scenario_lags(scenario)?;
    let cfg = scenario.identify_config(ident_lags);
    if cfg.refine_rounds > 0 {
        identify_refined(moments, l1, &scenario.fit_config(fit_lags), &cfg)
    } else {
        Ok((identify(moments, l1, &cfg)?, l1.clone()))
    }
}

/// Wall-clock seconds of the three inference paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferenceTimings {
    pub full: f64,
    pub dimension_reduced: Option<f64>,
    pub aggregate: Option<f64>,
}

/// Clustered inference outcome.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub assignment: ClusterAssignment,
    pub dimension_reduced: Prediction,
    pub aggregate: Prediction,
    pub actual_aggregate: DMatrix<f64>,
    pub nrmse_dimension_reduced: Vec<f64>,
    pub nrmse_aggregate: Vec<f64>,
}

/// Everything a scenario run produces.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub generator_ids: Vec<String>,
    pub meters: Vec<usize>,
    pub targets: Vec<usize>,
    pub truth: TruthLabels,
    pub moments: Moments,
    pub l1: LearnedCovariance,
    pub l1_report: FitReport,
    pub l2: LearnedCovariance,
    pub l2_report: FitReport,
    /// Covariance model used for masked inference (refined when configured).
    pub masked_model: LearnedCovariance,
    pub weights: MeterWeights,
    pub identification: IdentificationScore,
    pub actual: TimeSeriesRecord,
    pub predicted_l2: Prediction,
    pub predicted_l1_masked: Prediction,
    pub nrmse_l2: Vec<f64>,
    pub nrmse_l1_masked: Vec<f64>,
    pub clusters: Option<ClusterOutcome>,
    pub timings: InferenceTimings,
    /// Seconds per pipeline stage, in execution order.
    pub stage_seconds: Vec<(String, f64)>,
}

impl ScenarioResult {
    /// Per-meter `|Σ₀(A) − C₀|` in correlation scale for the given fit.
    pub fn residual_grid(&self, learned: &LearnedCovariance) -> Result<DMatrix<f64>> {
        let idx = self.moments.lag_index(0.0)?;
        Ok(learned.residuals(&self.moments)?[idx].abs())
    }

    /// Share of the residual grid's mass inside the rows and columns of `meters`.
    pub fn residual_share(&self, learned: &LearnedCovariance, meters: &[usize]) -> Result<f64> {
        let g = self.residual_grid(learned)?;
        let inside: Vec<bool> = self.moments.meters().iter().map(|m| meters.contains(m)).collect();
        let (mut hit, mut total) = (0.0, 0.0);
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                total += g[(i, j)];
                if inside[i] || inside[j] {
                    hit += g[(i, j)];
                }
            }
        }
        Ok(if total > 0.0 { hit / total } else { 0.0 })
    }
}

fn staged<T>(stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(stage))
}

fn scores(pred: &Prediction, actual: &DMatrix<f64>) -> Result<Vec<f64>> {
    (0..pred.mean.ncols())
        .map(|j| {
            let est: Vec<f64> = pred.mean.column(j).iter().copied().collect();
            let act: Vec<f64> = actual.column(j).iter().copied().collect();
            normalized_rmse(&est, &act)
        })
        .collect()
}

/// Runs a scenario. Artifacts are written to `out` stage by stage, so a
/// failure leaves everything produced before it in place.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>) -> Result<ScenarioResult> {
    let mut clock = StageClock::default();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("scenario.toml"), &scenario.to_toml()?)?;
    }
    let model = staged("config", || scenario.load_model())?;
    let n = model.n();
    let ids = model.generator_ids().to_vec();
    let (meters, targets) = staged("config", || scenario.index_sets(n))?;
    staged("config", || scenario_lags(scenario).map(|_| ()))?;

    let full = clock.run("simulate", || simulate(&model, &scenario.simulation))?;
    let metered = staged("simulate", || full.restrict_to_meters(&meters))?;
    let (corrupted, truth) = clock.run("corrupt", || match &scenario.corruption {
        Some(plan) => inject(&metered, &model, &scenario.simulation, plan),
        None => Ok((metered.clone(), TruthLabels::default())),
    })?;
    if let Some(dir) = out {
        write_text(&dir.join("truth.toml"), &truth.to_toml()?)?;
    }

    let fits = clock.run("learn", || learn_stage(scenario, &model, &corrupted))?;
    if let Some(dir) = out {
        write_text(&dir.join("fit_l1.toml"), &fits.l1_report.to_toml()?)?;
        write_text(&dir.join("fit_l2.toml"), &fits.l2_report.to_toml()?)?;
        LearnedFile::from_learned(&fits.l1, Objective::L1).save(&dir.join("learned_l1.toml"))?;
        LearnedFile::from_learned(&fits.l2, Objective::L2).save(&dir.join("learned_l2.toml"))?;
    }

    let (weights, masked_model) = clock.run("identify", || identify_stage(scenario, &fits.moments, &fits.l1))?;
    let identification = score_identification(&weights.flagged(), &truth.corrupted);
    if let Some(dir) = out {
        write_text(&dir.join("weights.toml"), &weights.to_toml()?)?;
    }

    let horizon_ticks = scenario.horizon_ticks(corrupted.ticks());
    let observed = staged("infer", || corrupted.window(0, horizon_ticks))?;
    let actual = staged("infer", || full.window(0, horizon_ticks)?.restrict_to_meters(&targets))?;
    let options = scenario.inference_options();
    let predicted_l2 = clock.run("infer_l2", || {
        predict_nonmetered(&fits.l2, &observed, &MeterWeights::trusted(meters.clone()), &targets, &options)
    })?;
    let start = Instant::now();
    let predicted_l1_masked = clock.run("infer_full", || {
        predict_nonmetered(&masked_model, &observed, &weights, &targets, &options)
    })?;
    let mut timings = InferenceTimings {
        full: start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    let nrmse_l2 = staged("score", || scores(&predicted_l2, actual.values()))?;
    let nrmse_l1_masked = staged("score", || scores(&predicted_l1_masked, actual.values()))?;
    if let Some(dir) = out {
        predicted_l2.save(dir.join("predictions_l2.csv"))?;
        predicted_l1_masked.save(dir.join("predictions_l1_masked.csv"))?;
    }

    let clusters = match &scenario.clustering {
        None => None,
        Some(section) => {
            let k = section.k.unwrap_or_else(|| default_k(n));
            let assignment = clock.run("cluster", || cluster_generators(&masked_model, k, section.seed))?;
            let start = Instant::now();
            let dr = clock.run("infer_dimension_reduced", || {
                infer_dimension_reduced(&masked_model, &observed, &weights, &targets, &assignment, &options)
            })?;
            timings.dimension_reduced = Some(start.elapsed().as_secs_f64());
            let start = Instant::now();
            let ar = clock.run("infer_aggregate", || {
                infer_aggregate(&masked_model, &observed, &weights, &assignment, &options)
            })?;
            timings.aggregate = Some(start.elapsed().as_secs_f64());
            let speeds = full.window(0, horizon_ticks)?;
            let actual_aggregate = aggregate_signal(&masked_model, &assignment, speeds.values());
            let nrmse_dimension_reduced = staged("score", || scores(&dr, actual.values()))?;
            let nrmse_aggregate = staged("score", || scores(&ar, &actual_aggregate))?;
            if let Some(dir) = out {
                write_text(&dir.join("clusters.toml"), &assignment.to_toml(&ids)?)?;
                dr.save(dir.join("predictions_dimension_reduced.csv"))?;
                ar.save(dir.join("predictions_aggregate.csv"))?;
            }
            Some(ClusterOutcome {
                assignment,
                dimension_reduced: dr,
                aggregate: ar,
                actual_aggregate,
                nrmse_dimension_reduced,
                nrmse_aggregate,
            })
        }
    };

    let result = ScenarioResult {
        name: scenario.name.clone(),
        generator_ids: ids,
        meters,
        targets,
        truth,
        moments: fits.moments,
        l1: fits.l1,
        l1_report: fits.l1_report,
        l2: fits.l2,
        l2_report: fits.l2_report,
        masked_model,
        weights,
        identification,
        actual,
        predicted_l2,
        predicted_l1_masked,
        nrmse_l2,
        nrmse_l1_masked,
        clusters,
        timings,
        stage_seconds: clock.stages,
    };
    if let Some(dir) = out {
        emit_plot_data(&result, dir)?;
        write_text(&dir.join("scores.toml"), &score_summary(&result)?)?;
    }
    Ok(result)
}

#[derive(Default)]
struct StageClock {
    stages: Vec<(String, f64)>,
}

impl StageClock {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = staged(stage, f);
        self.stages.push((stage.to_string(), start.elapsed().as_secs_f64()));
        log::info!("stage {stage}: {:.3} s", start.elapsed().as_secs_f64());
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Square grid with a label column and a label header row.
pub fn write_grid(path: &Path, labels: &[String], grid: &DMatrix<f64>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["meter".to_string()];
    head.extend(labels.iter().cloned());
    w.write_record(&head).map_err(csv_err)?;
    for (i, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend((0..grid.ncols()).map(|j| grid[(i, j)].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes trajectory files (one per target), residual grids for both fits
/// and the inference timing table.
pub fn emit_plot_data(result: &ScenarioResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rate = result.actual.reporting_rate();
    let start = result.actual.start_time();
    for (j, &g) in result.targets.iter().enumerate() {
        let mut values = DMatrix::zeros(result.actual.ticks(), 3);
        values.set_column(0, &result.actual.values().column(j));
        values.set_column(1, &result.predicted_l2.mean.column(j));
        values.set_column(2, &result.predicted_l1_masked.mean.column(j));
        let header = ["actual", "predicted_l2", "predicted_l1_masked"].map(String::from);
        let path = dir.join(format!("trajectory_g{}.csv", result.generator_ids[g]));
        write_columns(&path, "time", &header, start, rate, &values)?;
    }
    let labels: Vec<String> = result
        .moments
        .meters()
        .iter()
        .map(|&g| format!("g{}", result.generator_ids[g]))
        .collect();
    write_grid(&dir.join("residual_l1.csv"), &labels, &result.residual_grid(&result.l1)?)?;
    write_grid(&dir.join("residual_l2.csv"), &labels, &result.residual_grid(&result.l2)?)?;
    write_timing_table(result, &dir.join("timing.csv"))
}

/// `path,seconds,relative_to_full,observed_dim`; the only artifact that
/// varies between identical runs.
fn write_timing_table(result: &ScenarioResult, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["path", "seconds", "relative_to_full", "observed_dim"]).map_err(csv_err)?;
    let t = &result.timings;
    let mut rows = vec![("full", t.full, result.predicted_l1_masked.observed_dim)];
    if let (Some(c), Some(dr), Some(ar)) = (&result.clusters, t.dimension_reduced, t.aggregate) {
        rows.push(("dimension_reduced", dr, c.dimension_reduced.observed_dim));
        rows.push(("dimension_reduced+aggregate", ar, c.aggregate.observed_dim));
    }
    for (name, secs, dim) in rows {
        w.write_record([
            name.to_string(),
            format!("{secs:.6}"),
            format!("{:.6}", secs / t.full.max(f64::MIN_POSITIVE)),
            dim.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn score_summary(result: &ScenarioResult) -> Result<String> {
    #[derive(Serialize)]
    struct Summary {
        name: String,
        flagged: Vec<String>,
        corrupted: Vec<String>,
        precision: f64,
        recall: f64,
        exact_match: bool,
        l1_objective: f64,
        l2_objective: f64,
        l1_l2_relative_difference: f64,
        nrmse_l2: BTreeMap<String, f64>,
        nrmse_l1_masked: BTreeMap<String, f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        nrmse_dimension_reduced: Option<BTreeMap<String, f64>>,
        #[serde(skip_serializing_if = "Option::is_none")]
        nrmse_aggregate: Option<BTreeMap<String, f64>>,
    }
    let label = |g: &usize| format!("g{}", result.generator_ids[*g]);
    let per_target = |v: &[f64]| result.targets.iter().map(label).zip(v.iter().copied()).collect();
    let a1 = result.l1.a();
    let a2 = result.l2.a();
    let s = Summary {
        name: result.name.clone(),
        flagged: result.weights.flagged().iter().map(label).collect(),
        corrupted: result.truth.corrupted.iter().map(label).collect(),
        precision: result.identification.precision,
        recall: result.identification.recall,
        exact_match: result.identification.exact_match,
        l1_objective: result.l1_report.objective_value,
        l2_objective: result.l2_report.objective_value,
        l1_l2_relative_difference: (a1 - a2).norm() / a2.norm().max(f64::MIN_POSITIVE),
        nrmse_l2: per_target(&result.nrmse_l2),
        nrmse_l1_masked: per_target(&result.nrmse_l1_masked),
        nrmse_dimension_reduced: result.clusters.as_ref().map(|c| per_target(&c.nrmse_dimension_reduced)),
        nrmse_aggregate: result.clusters.as_ref().map(|c| {
            c.nrmse_aggregate
                .iter()
                .enumerate()
                .map(|(k, &v)| (format!("cluster{k}"), v))
                .collect()
        }),
    };
    toml::to_string(&s).map_err(|e| Error::config(format!("cannot serialize scores: {e}")))
}

/// Scenario files (`*.toml`) directly inside `dir`, sorted by name.
pub fn suite_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no scenario files in {}", dir.display())));
    }
    Ok(files)
}
