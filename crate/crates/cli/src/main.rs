use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use streamtune::harness::output::{
    batch_curve, exploration_rows, ranking_rows, scatter_rows, write_rows, write_training,
};
use streamtune::harness::{
    adaptation_run, deploy, dist1, dist2, exploration_sweep, prepare, stationary_baseline, sweep_random_configs,
    switch_schedule, train_resumable, AdaptOptions, ExperimentConfig, Prepared, TrainState,
};
use streamtune::rltuner::Tuner;
use streamtune::simengine::{default_space, plant_ground_truth, run_window, BATCH_INTERVAL};

#[derive(Parser)]
#[command(name = "streamtune", version, about = "Latency-driven tuning of a simulated stream-processing engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory receiving every output file.
    #[arg(long)]
    out: PathBuf,
    /// Experiment configuration (JSON); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write event traces of the configured workloads.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trace length in seconds.
        #[arg(long, default_value_t = 900.0)]
        duration: f64,
    },
    /// Run the default configuration on the deployment workload.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 900.0)]
        duration: f64,
        /// Batch interval in seconds instead of the default.
        #[arg(long)]
        batch_interval: Option<f64>,
    },
    /// Random-configuration sweep over the configured workloads.
    SweepConfigs {
        #[command(flatten)]
        common: Common,
    },
    /// Reduce the monitoring metrics to representatives.
    SelectMetrics {
        #[command(flatten)]
        common: Common,
    },
    /// Rank levers by their Lasso paths.
    RankLevers {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the policy and deploy it.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Resume from (and write) this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many iterations; resume later with the checkpoint.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Tune through a dist1 to dist2 switch with a trained tuner.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Tuner written by `train`.
        #[arg(long)]
        tuner: PathBuf,
        /// Minutes of each segment.
        #[arg(long, default_value_t = 60.0)]
        minutes: f64,
    },
    /// Convergence time over exploitation factors and switch rates.
    SweepExplore {
        #[command(flatten)]
        common: Common,
        /// One trained tuner per seed.
        #[arg(long, required = true, num_args = 1..)]
        tuner: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.8,0.7")]
        f: Vec<f64>,
        /// Switches per hour.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        rates: Vec<u32>,
        #[arg(long, default_value_t = 200.0)]
        hours: f64,
    },
    /// Plot-ready CSVs: factor loadings, batch-interval curve and, with a
    /// tuner, a deployment trace.
    PlotData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tuner: Option<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Simulate { .. } => "simulate",
            Command::SweepConfigs { .. } => "sweep-configs",
            Command::SelectMetrics { .. } => "select-metrics",
            Command::RankLevers { .. } => "rank-levers",
            Command::Train { .. } => "train",
            Command::Adapt { .. } => "adapt",
            Command::SweepExplore { .. } => "sweep-explore",
            Command::PlotData { .. } => "plot-data",
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.out_dir = Some(common.out.clone());
    config.validate()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_tuner(path: &Path) -> Result<Tuner> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing tuner {}", path.display()))
}

/// Checks that every lever the tuner ranks exists in the lever space.
fn check_tuner(prepared: &Prepared, tuner: &Tuner) -> Result<()> {
    if tuner.ranking.iter().any(|l| prepared.space.index_of(l).is_none()) {
        return Err(anyhow!("tuner ranks levers missing from the lever space"));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate { common, duration } => {
            let config = load_config(&common)?;
            let dir = common.out.join("traces");
            fs::create_dir_all(&dir)?;
            let mut named: Vec<(String, _)> = config
                .sweep_workloads
                .iter()
                .enumerate()
                .map(|(i, w)| (format!("sweep{i}_{}", w.kind()), w.clone()))
                .collect();
            named.extend(config.train_workloads.iter().enumerate().map(|(i, w)| (format!("train{i}_{}", w.kind()), w.clone())));
            named.push(("deploy".into(), config.deploy_workload.clone()));
            for (name, spec) in &named {
                spec.generate_for(duration)?.save(&dir.join(format!("{name}.csv")))?;
            }
            write_json(&common.out.join("workloads.json"), &named)?;
        }
        Command::Simulate {
            common,
            duration,
            batch_interval,
        } => {
            let config = load_config(&common)?;
            let space = default_space();
            let truth = plant_ground_truth(&space, config.k_influential, config.truth_seed)?;
            let mut setting = space.default_config();
            if let Some(b) = batch_interval {
                setting.set(&space, BATCH_INTERVAL, b)?;
            }
            let trace = config.deploy_workload.generate_for(duration)?;
            let (metrics, stats) = run_window(&space, &truth, &config.engine, &setting, &trace, duration, config.seed)?;
            metrics.write_csv(std::io::BufWriter::new(fs::File::create(common.out.join("metrics.csv"))?))?;
            write_json(
                &common.out.join("latency.json"),
                &serde_json::json!({
                    "p99_ms": stats.p99_ms(),
                    "mean_ms": stats.mean * 1000.0,
                    "throughput": stats.throughput,
                    "backlog_s": stats.backlog_s,
                    "saturated": stats.saturated,
                    "events": stats.per_event.len(),
                }),
            )?;
        }
        Command::SweepConfigs { common } => {
            let config = load_config(&common)?;
            let space = default_space();
            let truth = plant_ground_truth(&space, config.k_influential, config.truth_seed)?;
            let runs = sweep_random_configs(
                &space,
                &truth,
                &config.engine,
                &config.sweep_workloads,
                config.sweep_configs,
                config.sweep_window_s,
                config.selection_windows,
                config.seed,
            )?;
            runs.write_csv(std::io::BufWriter::new(fs::File::create(common.out.join("runs.csv"))?))?;
            write_json(&common.out.join("truth.json"), &truth)?;
        }
        Command::SelectMetrics { common } => {
            let config = load_config(&common)?;
            let (prepared, _) = prepare(&config)?;
            write_json(&common.out.join("selection.json"), &prepared.selection)?;
            write_json(&common.out.join("representatives.json"), &prepared.selection.representatives())?;
            write_rows(&common.out.join("scatter_workers.csv"), &scatter_rows(&prepared.selection.workers))?;
            write_rows(&common.out.join("scatter_driver.csv"), &scatter_rows(&prepared.selection.driver))?;
        }
        Command::RankLevers { common } => {
            let config = load_config(&common)?;
            let (prepared, _) = prepare(&config)?;
            write_rows(&common.out.join("ranking.csv"), &ranking_rows(&prepared.ranking))?;
            write_json(&common.out.join("lasso_paths.json"), &prepared.paths)?;
        }
        Command::Train {
            common,
            iterations,
            checkpoint,
            stop_at,
        } => {
            let mut config = load_config(&common)?;
            if let Some(n) = iterations {
                config.iterations = n;
            }
            let (prepared, runs) = prepare(&config)?;
            let state = match &checkpoint {
                Some(path) if path.exists() => TrainState::load(path)?,
                _ => TrainState::new(&config, &prepared)?,
            };
            let state = train_resumable(&config, &prepared, &runs, state, stop_at)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("state.json"));
            state.save(&path)?;
            write_training(&common.out, &state)?;
            write_json(&common.out.join("tuner.json"), &state.tuner)?;
            write_json(&common.out.join("ranking.json"), &state.tuner.ranking)?;
        }
        Command::Adapt { common, tuner, minutes } => {
            let config = load_config(&common)?;
            let (prepared, _) = prepare(&config)?;
            let tuner = read_tuner(&tuner)?;
            check_tuner(&prepared, &tuner)?;
            let opts = AdaptOptions::default();
            let b1 = stationary_baseline(&prepared, &tuner, &dist1(41), minutes, &opts, config.seed)?;
            let b2 = stationary_baseline(&prepared, &tuner, &dist2(42), minutes, &opts, config.seed)?;
            let schedule = switch_schedule(&dist1(43), &dist2(44), minutes, minutes);
            let report = adaptation_run(&prepared, &tuner, &schedule, &[b1, b2], &opts, config.seed)?;
            write_rows(&common.out.join("session.csv"), &report.rows)?;
            write_rows(&common.out.join("switches.csv"), &report.switches)?;
            write_json(&common.out.join("baselines.json"), &report.baselines)?;
        }
        Command::SweepExplore {
            common,
            tuner,
            f,
            rates,
            hours,
        } => {
            let config = load_config(&common)?;
            let (prepared, _) = prepare(&config)?;
            let tuners = tuner.iter().map(|p| read_tuner(p)).collect::<Result<Vec<_>>>()?;
            for t in &tuners {
                check_tuner(&prepared, t)?;
            }
            let seeds: Vec<u64> = (0..tuners.len() as u64).map(|i| config.seed + i).collect();
            let opts = AdaptOptions::default();
            let b1 = stationary_baseline(&prepared, &tuners[0], &dist1(41), 60.0, &opts, config.seed)?;
            let b2 = stationary_baseline(&prepared, &tuners[0], &dist2(42), 60.0, &opts, config.seed)?;
            let table = exploration_sweep(
                &prepared,
                &tuners,
                &seeds,
                &f,
                &rates,
                hours,
                (&dist1(43), &dist2(44)),
                (b1, b2),
                &opts,
            )?;
            write_rows(&common.out.join("exploration_table.csv"), &exploration_rows(&table))?;
            write_json(&common.out.join("exploration_cells.json"), &table.cells)?;
        }
        Command::PlotData { common, tuner } => {
            let config = load_config(&common)?;
            let (prepared, _) = prepare(&config)?;
            write_rows(&common.out.join("scatter_workers.csv"), &scatter_rows(&prepared.selection.workers))?;
            write_rows(&common.out.join("ranking.csv"), &ranking_rows(&prepared.ranking))?;
            let intervals: Vec<f64> = (0..24).map(|k| 0.5 * 1.2f64.powi(k)).filter(|b| *b <= 30.0).collect();
            let rows = batch_curve(
                &prepared.space,
                &prepared.truth,
                &prepared.engine,
                &[("dist1".into(), dist1(5)), ("dist2".into(), dist2(5))],
                &intervals,
                config.sweep_window_s,
                config.seed,
            )?;
            write_rows(&common.out.join("batch_curve.csv"), &rows)?;
            if let Some(path) = tuner {
                let tuner = read_tuner(&path)?;
                check_tuner(&prepared, &tuner)?;
                let (_, rows) = deploy(&prepared, &tuner, &config.deploy_workload, config.deploy_steps, config.seed)?;
                write_rows(&common.out.join("deployment.csv"), &rows)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: [{stage}] {e:#}");
            ExitCode::FAILURE
        }
    }
}
