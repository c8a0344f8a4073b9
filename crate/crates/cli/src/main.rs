use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use gridgp::bench::{
    identify_stage, learn_stage, run_scenario, scenario_moments, suite_files, LearnedFile, Scenario, ScenarioResult,
};
use gridgp::clustering::{cluster_generators, default_k, infer_aggregate, infer_dimension_reduced};
use gridgp::corruption::{inject, TruthLabels};
use gridgp::grid::GridModel;
use gridgp::identify::MeterWeights;
use gridgp::inference::predict_nonmetered;
use gridgp::learning::Objective;
use gridgp::record::TimeSeriesRecord;
use gridgp::simulate::simulate;
use gridgp::{Error, Result};

/// Robust learning and inference of generator speed dynamics from
/// partially corrupted PMU streams.
///
/// The stage commands share one scenario file (`--config`) and one working
/// directory (`--out`); each reads what the previous stage wrote there.
#[derive(Parser)]
#[command(name = "gridgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: the scenario's `outputs`, else `out/<name>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the simulation and corruption seeds of the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenarios run concurrently by `bench suite`.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate speeds of every generator: `speeds.csv`.
    Simulate,
    /// Keep the metered columns and apply the corruption plan: `observed.csv`, `truth.toml`.
    Corrupt,
    /// Fit the input intensity with both objectives: `learned_l1.toml`, `learned_l2.toml`.
    Learn,
    /// Flag corrupted meters: `weights.toml`, `learned_masked.toml`.
    Identify,
    /// Predict the targets: `predictions_l2.csv`, `predictions_l1_masked.csv`.
    Infer,
    /// Cluster generators and run the reduced inference paths.
    Cluster,
    /// End-to-end scenario runs.
    Bench {
        #[command(subcommand)]
        action: BenchCommand,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run one scenario and write every artifact.
    Run { scenario: PathBuf },
    /// Run every scenario file in a directory, each into `<out>/<name>`.
    Suite {
        #[arg(default_value = "scenarios")]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(config_error("--threads must be at least 1"));
    }
    match &cli.command {
        Command::Bench { action } => match action {
            BenchCommand::Run { scenario } => {
                let s = load_scenario(scenario, cli.seed)?;
                let out = cli.out.clone().unwrap_or_else(|| s.output_dir());
                let r = run_scenario(&s, Some(&out))?;
                println!("{}", summary_line(&r));
                Ok(())
            }
            BenchCommand::Suite { dir } => run_suite(dir, cli),
        },
        stage => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| config_error("stage commands need --config <scenario>"))?;
            let ctx = Stage::new(load_scenario(path, cli.seed)?, cli.out.clone())?;
            match stage {
                Command::Simulate => ctx.simulate(),
                Command::Corrupt => ctx.corrupt(),
                Command::Learn => ctx.learn(),
                Command::Identify => ctx.identify(),
                Command::Infer => ctx.infer(),
                Command::Cluster => ctx.cluster(),
                Command::Bench { .. } => unreachable!("handled above"),
            }
        }
    }
}

fn config_error(msg: &str) -> Error {
    Error::Config(msg.to_string())
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let s = Scenario::load(path)?;
    Ok(match seed {
        Some(seed) => s.with_seed(seed),
        None => s,
    })
}

fn summary_line(r: &ScenarioResult) -> String {
    let ids = |v: &[usize]| v.iter().map(|&g| format!("g{}", r.generator_ids[g])).collect::<Vec<_>>().join(",");
    let worst = |v: &[f64]| v.iter().fold(0.0f64, |a, &b| a.max(b));
    format!(
        "{}: flagged [{}] truth [{}] max NRMSE l2 {:.4} masked-l1 {:.4}",
        r.name,
        ids(&r.weights.flagged()),
        ids(&r.truth.corrupted),
        worst(&r.nrmse_l2),
        worst(&r.nrmse_l1_masked)
    )
}

fn run_suite(dir: &Path, cli: &Cli) -> Result<()> {
    let files = suite_files(dir)?;
    let root = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..files.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cli.threads.min(files.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= files.len() {
                    break;
                }
                let outcome = load_scenario(&files[i], cli.seed)
                    .and_then(|s| run_scenario(&s, Some(&root.join(&s.name))))
                    .map(|r| summary_line(&r));
                outcomes.lock().expect("no worker panics while holding the lock")[i] = Some(outcome);
            });
        }
    });
    let mut first_error = None;
    for (file, outcome) in files.iter().zip(outcomes.into_inner().expect("workers finished")) {
        match outcome.expect("every scenario ran") {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {}: {e}", file.display());
                first_error.get_or_insert(e);
            }
        }
    }
    first_error.map_or(Ok(()), Err)
}

/// One scenario and its working directory.
struct Stage {
    scenario: Scenario,
    model: GridModel,
    meters: Vec<usize>,
    targets: Vec<usize>,
    out: PathBuf,
}

impl Stage {
    fn new(scenario: Scenario, out: Option<PathBuf>) -> Result<Self> {
        let model = scenario.load_model()?;
        let (meters, targets) = scenario.index_sets(model.n())?;
        let out = out.unwrap_or_else(|| scenario.output_dir());
        std::fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        Ok(Stage {
            scenario,
            model,
            meters,
            targets,
            out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }

    fn read(&self, name: &str) -> Result<String> {
        let path = self.path(name);
        std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })
    }

    fn learned(&self, name: &str) -> Result<gridgp::covariance::LearnedCovariance> {
        LearnedFile::load(&self.path(name))?.into_learned(&self.model)
    }

    /// Observed record cut to the scenario's inference horizon.
    fn observed_horizon(&self) -> Result<TimeSeriesRecord> {
        let observed = TimeSeriesRecord::load(self.path("observed.csv"))?;
        observed.window(0, self.scenario.horizon_ticks(observed.ticks()))
    }

    fn weights(&self) -> Result<MeterWeights> {
        MeterWeights::from_toml(&self.read("weights.toml")?)
    }

    fn simulate(&self) -> Result<()> {
        let record = simulate(&self.model, &self.scenario.simulation).map_err(|e| e.in_stage("simulate"))?;
        record.save(self.path("speeds.csv"))
    }

    fn corrupt(&self) -> Result<()> {
        let full = TimeSeriesRecord::load(self.path("speeds.csv"))?;
        let metered = full.restrict_to_meters(&self.meters)?;
        let (observed, truth) = match &self.scenario.corruption {
            Some(plan) => inject(&metered, &self.model, &self.scenario.simulation, plan),
            None => Ok((metered, TruthLabels::default())),
        }
        .map_err(|e| e.in_stage("corrupt"))?;
        observed.save(self.path("observed.csv"))?;
        self.write("truth.toml", &truth.to_toml()?)
    }

    fn learn(&self) -> Result<()> {
        let observed = TimeSeriesRecord::load(self.path("observed.csv"))?;
        let fits = learn_stage(&self.scenario, &self.model, &observed).map_err(|e| e.in_stage("learn"))?;
        self.write("fit_l1.toml", &fits.l1_report.to_toml()?)?;
        self.write("fit_l2.toml", &fits.l2_report.to_toml()?)?;
        LearnedFile::from_learned(&fits.l1, Objective::L1).save(&self.path("learned_l1.toml"))?;
        LearnedFile::from_learned(&fits.l2, Objective::L2).save(&self.path("learned_l2.toml"))
    }

    fn identify(&self) -> Result<()> {
        let observed = TimeSeriesRecord::load(self.path("observed.csv"))?;
        let l1 = self.learned("learned_l1.toml")?;
        let (weights, masked) = scenario_moments(&self.scenario, &observed)
            .and_then(|moments| identify_stage(&self.scenario, &moments, &l1))
            .map_err(|e| e.in_stage("identify"))?;
        self.write("weights.toml", &weights.to_toml()?)?;
        LearnedFile::from_learned(&masked, Objective::L1).save(&self.path("learned_masked.toml"))
    }

    fn infer(&self) -> Result<()> {
        let observed = self.observed_horizon()?;
        let options = self.scenario.inference_options();
        let l2 = self.learned("learned_l2.toml")?;
        let masked = self.learned("learned_masked.toml")?;
        let weights = self.weights()?;
        let trusted = MeterWeights::trusted(self.meters.clone());
        let p2 = predict_nonmetered(&l2, &observed, &trusted, &self.targets, &options).map_err(|e| e.in_stage("infer_l2"))?;
        p2.save(self.path("predictions_l2.csv"))?;
        let p1 = predict_nonmetered(&masked, &observed, &weights, &self.targets, &options)
            .map_err(|e| e.in_stage("infer_full"))?;
        p1.save(self.path("predictions_l1_masked.csv"))
    }

    fn cluster(&self) -> Result<()> {
        let observed = self.observed_horizon()?;
        let options = self.scenario.inference_options();
        let masked = self.learned("learned_masked.toml")?;
        let weights = self.weights()?;
        let (k, seed) = match &self.scenario.clustering {
            Some(c) => (c.k.unwrap_or_else(|| default_k(self.model.n())), c.seed),
            None => (default_k(self.model.n()), 0),
        };
        let assignment = cluster_generators(&masked, k, seed).map_err(|e| e.in_stage("cluster"))?;
        self.write("clusters.toml", &assignment.to_toml(self.model.generator_ids())?)?;
        infer_dimension_reduced(&masked, &observed, &weights, &self.targets, &assignment, &options)
            .map_err(|e| e.in_stage("infer_dimension_reduced"))?
            .save(self.path("predictions_dimension_reduced.csv"))?;
        infer_aggregate(&masked, &observed, &weights, &assignment, &options)
            .map_err(|e| e.in_stage("infer_aggregate"))?
            .save(self.path("predictions_aggregate.csv"))
    }
}
