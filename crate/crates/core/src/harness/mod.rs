//! End-to-end experiments: the random-configuration sweep, metric selection
//! and lever ranking feeding the tuner, training, adaptation to workload
//! switches and the exploitation-factor sweep.

pub mod adapt;
pub mod output;
pub mod sweep;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adapt::{
    adaptation_run, exploration_sweep, heuristic_operator, stationary_baseline, switch_schedule, AdaptOptions,
    AdaptationReport, ExplorationCell, ExplorationRow, ExplorationTable, HeuristicProbe, HeuristicReport, SessionRow,
    SwitchReport,
};
pub use sweep::{sweep_random_configs, RunRow, RunsDataset};
pub use train::{
    deploy, train, train_resumable, DeployRow, EpisodeRow, Rollout, TrainState, TrainingLog, TrajectoryRow,
};

use crate::error::{Error, Result, Stage, StageExt};
use crate::leverrank::{rank_from_runs, LassoPath, LeverRanking};
use crate::metrics::{select_metrics, MetricSelection, NodeRole, SelectParams};
use crate::rltuner::{Tuner, TunerParams};
use crate::simengine::{plant_ground_truth, default_space, EngineParams, GroundTruth, LeverSpace};
use crate::workload::{PoissonSpec, TrapezoidSpec, WorkloadSpec};

/// Low rate, small events.
pub fn dist1(seed: u64) -> WorkloadSpec {
    WorkloadSpec::Poisson(PoissonSpec {
        lambda_rate: 10.0,
        size_mean: 0.5,
        size_std: 0.3,
        duration: 900.0,
        seed,
    })
}

/// High rate, large events.
pub fn dist2(seed: u64) -> WorkloadSpec {
    WorkloadSpec::Poisson(PoissonSpec {
        lambda_rate: 100.0,
        size_mean: 5.0,
        size_std: 0.3,
        duration: 900.0,
        seed,
    })
}

/// The four workload kinds of the configuration sweep.
pub fn sweep_workloads(seed: u64) -> Vec<WorkloadSpec> {
    vec![
        dist1(seed),
        dist2(seed),
        WorkloadSpec::Trapezoid(TrapezoidSpec {
            ramp_up: 300.0,
            stable: 300.0,
            ramp_down: 300.0,
            peak_rate: 60.0,
            size_mean: 1.0,
            size_std: 0.3,
            seed,
        }),
        WorkloadSpec::Trapezoid(TrapezoidSpec {
            ramp_up: 120.0,
            stable: 660.0,
            ramp_down: 120.0,
            peak_rate: 30.0,
            size_mean: 3.0,
            size_std: 0.3,
            seed,
        }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub truth_seed: u64,
    pub k_influential: usize,
    pub engine: EngineParams,
    pub sweep_workloads: Vec<WorkloadSpec>,
    pub sweep_configs: usize,
    pub sweep_window_s: f64,
    /// Sweep windows whose full metric matrices feed metric selection.
    pub selection_windows: usize,
    pub select: SelectParams,
    /// Length of the ranking handed to the tuner.
    pub ranked_levers: usize,
    /// Workloads cycled through by the pretraining iterations.
    pub train_workloads: Vec<WorkloadSpec>,
    pub tuner: TunerParams,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    /// Probability that a training session starts from a configuration
    /// with the ranked levers drawn at random rather than from the default.
    pub random_start: f64,
    /// Iterations a training session runs before it is restarted.
    pub session_iterations: usize,
    /// Re-run the lever ranking every this many iterations, with the
    /// training windows added to the sweep data; 0 disables it.
    pub rerank_every: usize,
    pub deploy_workload: WorkloadSpec,
    pub deploy_steps: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            truth_seed: 1,
            k_influential: 5,
            engine: EngineParams::default(),
            sweep_workloads: sweep_workloads(11),
            sweep_configs: 500,
            sweep_window_s: 900.0,
            selection_windows: 200,
            select: SelectParams::default(),
            ranked_levers: 3,
            train_workloads: vec![dist2(21), dist1(22)],
            tuner: TunerParams::default(),
            iterations: 8000,
            episodes_per_iteration: 4,
            random_start: 0.5,
            session_iterations: 8,
            rerank_every: 0,
            deploy_workload: dist2(31),
            deploy_steps: 10,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep_workloads.is_empty() {
            return Err(Error::validation("sweep_workloads", "must not be empty"));
        }
        if self.train_workloads.is_empty() {
            return Err(Error::validation("train_workloads", "must not be empty"));
        }
        for w in self.sweep_workloads.iter().chain(&self.train_workloads) {
            w.validate()?;
        }
        self.deploy_workload.validate()?;
        self.tuner.plan.validate()?;
        if self.ranked_levers == 0 {
            return Err(Error::validation("ranked_levers", "must be positive"));
        }
        if self.episodes_per_iteration == 0 {
            return Err(Error::validation("episodes_per_iteration", "must be positive"));
        }
        if self.session_iterations == 0 {
            return Err(Error::validation("session_iterations", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.random_start) {
            return Err(Error::validation("random_start", "must lie in [0, 1]"));
        }
        if self.sweep_window_s < self.engine.sample_period_s {
            return Err(Error::validation("sweep_window_s", "shorter than the sample period"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}

/// Everything the tuner needs from the offline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub space: LeverSpace,
    pub truth: GroundTruth,
    pub engine: EngineParams,
    pub selection: MetricSelection,
    pub ranking: LeverRanking,
    pub paths: Vec<LassoPath>,
}

impl Prepared {
    /// Distinct representative metric names, workers first.
    pub fn state_metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for rep in self.selection.representatives() {
            if !names.contains(&rep.metric) {
                names.push(rep.metric);
            }
        }
        names
    }

    pub fn tuner(&self, ranked: usize, params: TunerParams, seed: u64) -> Result<Tuner> {
        Tuner::new(
            self.space.clone(),
            self.ranking.top(ranked),
            self.state_metrics(),
            self.engine.nodes,
            params,
            seed,
        )
    }
}

/// Lasso targets: the per-window value of every representative.
pub fn representative_targets(runs: &RunsDataset, selection: &MetricSelection) -> Result<Vec<(String, Vec<f64>)>> {
    selection
        .representatives()
        .iter()
        .map(|rep| {
            let m = runs
                .metric_names
                .iter()
                .position(|n| *n == rep.metric)
                .ok_or_else(|| Error::validation("metric", format!("{} missing from runs", rep.metric)))?;
            let values = runs
                .rows
                .iter()
                .map(|r| match rep.role {
                    NodeRole::Driver => r.driver[m],
                    NodeRole::Workers => r.workers[m],
                })
                .collect();
            let prefix = match rep.role {
                NodeRole::Driver => "driver",
                NodeRole::Workers => "workers",
            };
            Ok((format!("{prefix}.{}", rep.metric), values))
        })
        .collect()
}

pub fn rank_with_selection(
    space: &LeverSpace,
    runs: &RunsDataset,
    selection: &MetricSelection,
) -> Result<(LeverRanking, Vec<LassoPath>)> {
    let targets = representative_targets(runs, selection)?;
    rank_from_runs(space, &runs.configs(), &targets)
}

/// Sweep, metric selection and lever ranking.
pub fn prepare(config: &ExperimentConfig) -> Result<(Prepared, RunsDataset)> {
    config.validate()?;
    let space = default_space();
    let truth = plant_ground_truth(&space, config.k_influential, config.truth_seed).stage(Stage::Sweep)?;
    let runs = sweep_random_configs(
        &space,
        &truth,
        &config.engine,
        &config.sweep_workloads,
        config.sweep_configs,
        config.sweep_window_s,
        config.selection_windows,
        config.seed,
    )
    .stage(Stage::Sweep)?;
    let select = SelectParams {
        window_samples: (config.sweep_window_s / config.engine.sample_period_s).round() as usize,
        seed: config.seed,
        ..config.select.clone()
    };
    let selection = select_metrics(&runs.metrics, &select).stage(Stage::SelectMetrics)?;
    let (ranking, paths) = rank_with_selection(&space, &runs, &selection).stage(Stage::RankLevers)?;
    Ok((
        Prepared {
            space,
            truth,
            engine: config.engine.clone(),
            selection,
            ranking,
            paths,
        },
        runs,
    ))
}
