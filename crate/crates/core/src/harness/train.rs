use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rank_with_selection, ExperimentConfig, Prepared, RunRow, RunsDataset};
use crate::error::{Result, Stage, StageExt};
use crate::metrics::{table, DRIVER_NODE};
use crate::discretiser::BinGrid;
use crate::rltuner::{derive_seed, Stationary, StepTiming, Trajectory, Tuner};
use crate::simengine::{Configuration, Engine, MetricMatrix, Provenance};
use crate::workload::WorkloadSpec;

/// Seed labels keeping the streams of different uses apart.
const ITERATION_STREAM: u64 = 0x7472_6169_6e00;
const DEPLOY_STREAM: u64 = 0x6465_706c_6f79;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub iteration: usize,
    pub episode: usize,
    pub workload: usize,
    pub random_start: bool,
    pub steps: usize,
    /// Simulated time at the end of the episode, accumulated over all
    /// episodes so far.
    pub sim_minutes: f64,
    pub initial_p99_ms: f64,
    pub final_p99_ms: f64,
    pub best_p99_ms: f64,
    pub reward: f64,
    /// Share of steps acting on the top-ranked lever.
    pub top_lever_share: f64,
    pub decreases: usize,
    pub increases: usize,
    pub generation_s: f64,
    pub loading_s: f64,
    pub stabilisation_s: f64,
    pub update_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: usize,
    pub lever: String,
    pub direction: String,
    pub bin: usize,
    pub p99_ms: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployRow {
    pub step: usize,
    pub sim_minutes: f64,
    pub lever: String,
    pub direction: String,
    pub value: f64,
    pub p99_ms: f64,
    /// p99 relative to the default configuration's.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Stabilised p99 of the default configuration under the deployment workload.
    pub baseline_p99_ms: f64,
    pub episodes: Vec<EpisodeRow>,
    pub trajectory: Vec<TrajectoryRow>,
    pub deployment: Vec<DeployRow>,
    /// Summed phase times over all training episodes, seconds.
    pub breakdown: StepTiming,
}

impl TrainingLog {
    /// Best deployment p99 over the default baseline.
    pub fn deployment_ratio(&self) -> Option<f64> {
        self.deployment
            .iter()
            .map(|d| d.ratio)
            .min_by(f64::total_cmp)
    }

    pub fn phase_shares(&self) -> [(&'static str, f64); 4] {
        let b = &self.breakdown;
        let total = b.total().max(f64::MIN_POSITIVE);
        [
            ("generation", b.generation / total),
            ("loading", b.loading / total),
            ("stabilisation", b.stabilisation / total),
            ("update", b.update / total),
        ]
    }
}

/// A long-running training session on one workload: episodes of an
/// iteration branch from it and it then follows the first of them, so the
/// bin grids keep refining the way they do during deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub engine: Engine,
    pub load: Stationary,
    pub grids: Vec<Option<BinGrid>>,
    pub last: MetricMatrix,
    pub p99_ms: f64,
    pub iterations: usize,
    pub randomised: bool,
}

/// Everything needed to continue training: the tuner, the iteration
/// counter, the per-workload sessions, the log so far and the windows
/// collected for re-ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub sim_seconds: f64,
    pub tuner: Tuner,
    pub rollouts: Vec<Option<Rollout>>,
    pub log: TrainingLog,
    pub collected: Vec<RunRow>,
}

impl TrainState {
    pub fn new(config: &ExperimentConfig, prepared: &Prepared) -> Result<Self> {
        let tuner = prepared
            .tuner(config.ranked_levers, config.tuner.clone(), config.seed)
            .stage(Stage::Train)?;
        let baseline = default_baseline(prepared, &tuner, &config.deploy_workload, config.seed)?;
        Ok(TrainState {
            iteration: 0,
            sim_seconds: 0.0,
            tuner,
            rollouts: vec![None; config.train_workloads.len()],
            log: TrainingLog {
                baseline_p99_ms: baseline,
                ..Default::default()
            },
            collected: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fresh_engine(prepared: &Prepared, seed: u64) -> Engine {
    Engine::new(prepared.space.clone(), prepared.truth.clone(), prepared.engine.clone(), seed)
}

fn default_baseline(prepared: &Prepared, tuner: &Tuner, workload: &WorkloadSpec, seed: u64) -> Result<f64> {
    let mut engine = fresh_engine(prepared, derive_seed(seed, DEPLOY_STREAM));
    let mut load = Stationary { spec: workload.clone() };
    Ok(tuner.settle(&mut engine, &mut load).stage(Stage::Train)?.p99_ms)
}

/// Default configuration with every ranked lever drawn at random;
/// continuous levers with a positive range are drawn log-uniformly so the
/// low end, where the engine tends to saturate, is visited often.
fn random_start<R: Rng + ?Sized>(prepared: &Prepared, ranking: &[String], rng: &mut R) -> Configuration {
    let space = &prepared.space;
    loop {
        let mut config = space.default_config();
        for name in ranking {
            let i = space.index_of(name).expect("ranked lever in space");
            let lever = &space.levers[i];
            let (lo, hi) = lever.bounds();
            config.values[i] = if lever.is_continuous() && lo > 0.0 {
                lever.clamp(rng.random_range(lo.ln()..=hi.ln()).exp())
            } else {
                lever.sample(rng)
            };
        }
        config.provenance = Provenance::Random;
        if config.validate(space).is_ok() {
            return config;
        }
    }
}

/// Epoch-average row for re-ranking, from a step's measurement window.
fn collected_row(config: &Configuration, metrics: &MetricMatrix, p99_ms: f64) -> RunRow {
    let per_metric = |m: usize, nodes: &mut dyn Iterator<Item = usize>| {
        let v: Vec<f64> = nodes
            .flat_map(|n| metrics.series(m, n).into_iter().flatten())
            .collect();
        table::mean(&v)
    };
    RunRow {
        window: 0,
        config_index: 0,
        workload: "training".into(),
        values: config.values.clone(),
        p99_ms,
        mean_ms: f64::NAN,
        throughput: f64::NAN,
        saturated: false,
        driver: (0..metrics.metric_count())
            .map(|m| per_metric(m, &mut std::iter::once(DRIVER_NODE)))
            .collect(),
        workers: (0..metrics.metric_count())
            .map(|m| per_metric(m, &mut (1..metrics.node_count)))
            .collect(),
    }
}

/// Opens a fresh session on workload `w`, from the default or (with
/// probability `random_start`) from a random setting of the ranked levers.
fn open_rollout<R: Rng + ?Sized>(
    config: &ExperimentConfig,
    prepared: &Prepared,
    tuner: &mut Tuner,
    w: usize,
    it: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let spec = &config.train_workloads[w];
    let load = Stationary {
        spec: spec.with_seed(derive_seed(spec.seed(), it as u64)),
    };
    let randomised = rng.random_bool(config.random_start);
    let start = if randomised {
        random_start(prepared, &tuner.ranking, rng)
    } else {
        prepared.space.default_config()
    };
    let mut engine = fresh_engine(prepared, rng.random());
    engine.set_config(start)?;
    let mut load_copy = load.clone();
    tuner.reset_grids()?;
    let settled = tuner.settle(&mut engine, &mut load_copy)?;
    Ok(Rollout {
        engine,
        load,
        grids: tuner.grids.clone(),
        last: settled.metrics,
        p99_ms: settled.p99_ms,
        iterations: 0,
        randomised,
    })
}

/// One pretraining iteration: a batch of episodes branching from the
/// current session of one workload, then one policy update.
fn iteration(config: &ExperimentConfig, prepared: &Prepared, state: &mut TrainState) -> Result<()> {
    let it = state.iteration;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ ITERATION_STREAM, it as u64));
    let w = it % config.train_workloads.len();
    let expired = state.rollouts[w]
        .as_ref()
        .is_none_or(|r| r.iterations >= config.session_iterations);
    if expired {
        let fresh = open_rollout(config, prepared, &mut state.tuner, w, it, &mut rng)?;
        state.rollouts[w] = Some(fresh);
    }
    let rollout = state.rollouts[w].clone().expect("rollout opened above");
    let randomised = rollout.randomised;
    let n = config.tuner.plan.episode_len(&mut rng);

    let mut episodes: Vec<Trajectory> = Vec::with_capacity(config.episodes_per_iteration);
    let mut rows = Vec::with_capacity(config.episodes_per_iteration);
    let mut next: Option<Rollout> = None;
    for e in 0..config.episodes_per_iteration {
        let mut engine = rollout.engine.clone();
        let mut load = rollout.load.clone();
        let tuner = &mut state.tuner;
        tuner.grids = rollout.grids.clone();
        tuner.begin_episode();
        let mut ep_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(config.seed, it as u64), e as u64));
        let (trajectory, last) = tuner.run_episode(&mut engine, &mut load, n, rollout.last.clone(), &mut ep_rng)?;
        let final_p99 = trajectory.steps.last().map_or(rollout.p99_ms, |s| s.p99_ms);
        if config.rerank_every > 0 {
            state.collected.push(collected_row(engine.config(), &last, final_p99));
        }
        if e == 0 {
            next = Some(Rollout {
                engine,
                load,
                grids: tuner.grids.clone(),
                last,
                p99_ms: final_p99,
                iterations: rollout.iterations + 1,
                randomised,
            });
        }
        let timing = trajectory.steps.iter().fold(StepTiming::default(), |acc, s| StepTiming {
            generation: acc.generation + s.timing.generation,
            loading: acc.loading + s.timing.loading,
            stabilisation: acc.stabilisation + s.timing.stabilisation,
            update: 0.0,
        });
        let p99s: Vec<f64> = trajectory.steps.iter().map(|s| s.p99_ms).collect();
        rows.push((rollout.p99_ms, p99s, timing));
        episodes.push(trajectory);
    }
    state.rollouts[w] = next;
    state.tuner.update(&episodes)?;

    let update_share = config.tuner.update_s / config.episodes_per_iteration as f64;
    for (trajectory, (initial, p99s, mut timing)) in episodes.iter().zip(rows) {
        timing.update = update_share;
        state.sim_seconds += timing.total();
        let episode = state.log.episodes.len();
        let b = &mut state.log.breakdown;
        b.generation += timing.generation;
        b.loading += timing.loading;
        b.stabilisation += timing.stabilisation;
        b.update += timing.update;
        let reward = trajectory.steps.last().map_or(0.0, |s| s.reward);
        for (t, s) in trajectory.steps.iter().enumerate() {
            state.log.trajectory.push(TrajectoryRow {
                episode,
                step: t,
                lever: s.action.lever.clone(),
                direction: s.action.direction.as_str().into(),
                bin: s.bin,
                p99_ms: s.p99_ms,
                reward: s.reward,
            });
        }
        let count = |d: crate::rltuner::Direction| trajectory.steps.iter().filter(|s| s.action.direction == d).count();
        state.log.episodes.push(EpisodeRow {
            iteration: it,
            episode,
            workload: w,
            random_start: randomised,
            steps: trajectory.len(),
            sim_minutes: state.sim_seconds / 60.0,
            initial_p99_ms: initial,
            final_p99_ms: p99s.last().copied().unwrap_or(initial),
            best_p99_ms: p99s.iter().copied().fold(initial, f64::min),
            reward,
            top_lever_share: trajectory.steps.iter().filter(|s| s.action.rank == 0).count() as f64
                / trajectory.len().max(1) as f64,
            decreases: count(crate::rltuner::Direction::Decrease),
            increases: count(crate::rltuner::Direction::Increase),
            generation_s: timing.generation,
            loading_s: timing.loading,
            stabilisation_s: timing.stabilisation,
            update_s: timing.update,
        });
    }
    state.iteration += 1;
    Ok(())
}

fn rerank(prepared: &Prepared, runs: &RunsDataset, state: &mut TrainState) -> Result<()> {
    let mut all = runs.clone();
    all.rows.extend(state.collected.iter().cloned());
    let (ranking, _) = rank_with_selection(&prepared.space, &all, &prepared.selection).stage(Stage::RankLevers)?;
    let top = ranking.top(state.tuner.ranking.len());
    if top != state.tuner.ranking {
        state.tuner.rerank(top)?;
    }
    Ok(())
}

/// Runs iterations until `stop_at` (or the configured count) and deploys
/// the policy once all iterations are done.
pub fn train_resumable(
    config: &ExperimentConfig,
    prepared: &Prepared,
    runs: &RunsDataset,
    mut state: TrainState,
    stop_at: Option<usize>,
) -> Result<TrainState> {
    let end = stop_at.unwrap_or(config.iterations).min(config.iterations);
    while state.iteration < end {
        iteration(config, prepared, &mut state).stage(Stage::Train)?;
        if config.rerank_every > 0 && state.iteration.is_multiple_of(config.rerank_every) {
            rerank(prepared, runs, &mut state)?;
        }
    }
    if state.iteration == config.iterations && config.iterations > 0 && state.log.deployment.is_empty() {
        let (_, rows) = deploy(prepared, &state.tuner, &config.deploy_workload, config.deploy_steps, config.seed)?;
        state.log.deployment = rows;
    }
    Ok(state)
}

/// The full pipeline: sweep, selection, ranking, pretraining, deployment.
pub fn train(config: &ExperimentConfig) -> Result<(Prepared, TrainState)> {
    let (prepared, runs) = super::prepare(config)?;
    let state = TrainState::new(config, &prepared)?;
    let state = train_resumable(config, &prepared, &runs, state, None)?;
    Ok((prepared, state))
}

/// A tuning session from the default configuration with a frozen policy.
/// Returns the default baseline and one row per step.
pub fn deploy(
    prepared: &Prepared,
    tuner: &Tuner,
    workload: &WorkloadSpec,
    steps: usize,
    seed: u64,
) -> Result<(f64, Vec<DeployRow>)> {
    let mut tuner = tuner.clone();
    tuner.reset_grids()?;
    tuner.begin_episode();
    let mut engine = fresh_engine(prepared, derive_seed(seed, DEPLOY_STREAM));
    let mut load = Stationary { spec: workload.clone() };
    let settled = tuner.settle(&mut engine, &mut load).stage(Stage::Train)?;
    let baseline = settled.p99_ms;
    let mut last = settled.metrics;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ DEPLOY_STREAM, 1));
    let mut rows = Vec::with_capacity(steps);
    let mut elapsed = 0.0;
    for step in 0..steps {
        let outcome = tuner.step(&mut engine, &mut load, &last, &mut rng).stage(Stage::Train)?;
        elapsed += outcome.step.timing.total();
        rows.push(DeployRow {
            step,
            sim_minutes: elapsed / 60.0,
            lever: outcome.step.action.lever.clone(),
            direction: outcome.step.action.direction.as_str().into(),
            value: outcome.step.value,
            p99_ms: outcome.step.p99_ms,
            ratio: outcome.step.p99_ms / baseline,
        });
        last = outcome.metrics;
    }
    Ok((baseline, rows))
}
