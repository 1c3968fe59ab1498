use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Prepared;
use crate::error::{Error, Result, Stage, StageExt};
use crate::rltuner::{derive_seed, LoadSource, Scheduled, Stationary, Trajectory, Tuner, TunerParams};
use crate::simengine::{Configuration, Engine, Provenance};
use crate::workload::{ScheduleSegment, ScheduleSpec, WorkloadSpec};

const SESSION_STREAM: u64 = 0x7365_7373_696f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    /// Recovery threshold as a multiple of the new workload's baseline.
    pub threshold: f64,
    /// Episodes per online policy update; 0 freezes the policy.
    pub update_every: usize,
    /// Steps before a switch whose median p99 is the pre-switch baseline.
    pub baseline_steps: usize,
    /// Steps after a switch searched for the spike.
    pub spike_steps: usize,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            threshold: 1.2,
            update_every: 0,
            baseline_steps: 3,
            spike_steps: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRow {
    pub step: usize,
    /// Engine time at the end of the step.
    pub sim_minutes: f64,
    pub segment: usize,
    pub lever: String,
    pub direction: String,
    pub value: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub at_minutes: f64,
    pub to_segment: usize,
    /// Median p99 of the last steps before the switch.
    pub pre_switch_ms: f64,
    /// Stationary baseline of the segment being left.
    pub pre_baseline_ms: f64,
    pub spike_ms: f64,
    pub spike_ratio: f64,
    pub target_baseline_ms: f64,
    /// Minutes from the switch to the first step within the threshold.
    pub converged_minutes: Option<f64>,
    /// Best p99 in the segment over the target baseline.
    pub attained_multiple: f64,
    pub segment_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub rows: Vec<SessionRow>,
    pub switches: Vec<SwitchReport>,
    pub baselines: Vec<f64>,
}

struct Session {
    rows: Vec<SessionRow>,
    /// Lowest-latency configuration visited.
    best: Option<(f64, Configuration)>,
}

/// Continuous tuning from the default configuration until engine time
/// `until_s`. The policy keeps learning every `update_every` episodes.
fn run_session(
    prepared: &Prepared,
    tuner: &mut Tuner,
    load: &mut dyn LoadSource,
    until_s: f64,
    segment_of: &dyn Fn(f64) -> usize,
    opts: &AdaptOptions,
    seed: u64,
) -> Result<Session> {
    let mut engine = Engine::new(prepared.space.clone(), prepared.truth.clone(), prepared.engine.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SESSION_STREAM));
    tuner.reset_grids()?;
    let mut last = tuner.settle(&mut engine, load)?.metrics;
    let mut rows = Vec::new();
    let mut best: Option<(f64, Configuration)> = None;
    let mut batch: Vec<Trajectory> = Vec::new();
    while engine.clock() < until_s {
        let n = tuner.params.plan.episode_len(&mut rng);
        tuner.begin_episode();
        let mut trajectory = Trajectory::default();
        let mut latencies = Vec::new();
        for _ in 0..n {
            if engine.clock() >= until_s {
                break;
            }
            let outcome = tuner.step(&mut engine, load, &last, &mut rng)?;
            rows.push(SessionRow {
                step: rows.len(),
                sim_minutes: engine.clock() / 60.0,
                segment: segment_of(engine.clock()),
                lever: outcome.step.action.lever.clone(),
                direction: outcome.step.action.direction.as_str().into(),
                value: outcome.step.value,
                p99_ms: outcome.step.p99_ms,
            });
            if best.as_ref().is_none_or(|(p, _)| outcome.step.p99_ms < *p) {
                best = Some((outcome.step.p99_ms, engine.config().clone()));
            }
            latencies.extend_from_slice(&outcome.latencies);
            last = outcome.metrics;
            trajectory.steps.push(outcome.step);
        }
        let rejections = trajectory.steps.iter().filter(|s| s.rejected).count();
        let reward = tuner.episode_reward(&latencies, rejections)?;
        if let Some(s) = trajectory.steps.last_mut() {
            s.reward = reward;
        }
        if opts.update_every > 0 && !trajectory.is_empty() {
            batch.push(trajectory);
            if batch.len() == opts.update_every {
                tuner.update(&batch)?;
                batch.clear();
            }
        }
    }
    Ok(Session { rows, best })
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Stationary p99 of the best configuration a tuning session of `minutes`
/// finds under a fixed workload, measured again with that configuration
/// held on a fresh engine.
pub fn stationary_baseline(
    prepared: &Prepared,
    tuner: &Tuner,
    workload: &WorkloadSpec,
    minutes: f64,
    opts: &AdaptOptions,
    seed: u64,
) -> Result<f64> {
    let mut tuner = tuner.clone();
    let mut load = Stationary { spec: workload.clone() };
    let session =
        run_session(prepared, &mut tuner, &mut load, minutes * 60.0, &|_| 0, opts, seed).stage(Stage::Adapt)?;
    let config = session.best.map_or_else(|| prepared.space.default_config(), |(_, c)| c);
    let mut engine = Engine::new(prepared.space.clone(), prepared.truth.clone(), prepared.engine.clone(), seed);
    engine.set_config(config).stage(Stage::Adapt)?;
    let mut load = Stationary { spec: workload.clone() };
    Ok(tuner.settle(&mut engine, &mut load).stage(Stage::Adapt)?.p99_ms)
}

/// Tunes through a workload schedule and measures, at every switch, the
/// latency spike over the old segment's baseline and the time to get within
/// `threshold` of the new segment's baseline. `baselines` holds one
/// stationary p99 per segment.
pub fn adaptation_run(
    prepared: &Prepared,
    tuner: &Tuner,
    schedule: &ScheduleSpec,
    baselines: &[f64],
    opts: &AdaptOptions,
    seed: u64,
) -> Result<AdaptationReport> {
    schedule.validate().stage(Stage::Adapt)?;
    if baselines.len() != schedule.segments.len() {
        return Err(Error::validation("baselines", "need one baseline per schedule segment").in_stage(Stage::Adapt));
    }
    let mut tuner = tuner.clone();
    let mut load = Scheduled {
        schedule: schedule.clone(),
        origin: 0.0,
    };
    let until = schedule.duration();
    let rows = run_session(prepared, &mut tuner, &mut load, until, &|t| schedule.segment_at(t), opts, seed)
        .stage(Stage::Adapt)?
        .rows;
    let bounds = schedule.boundaries();
    let mut switches = Vec::new();
    for (k, &at) in bounds.iter().enumerate() {
        let seg = k + 1;
        let end = bounds.get(k + 1).copied().unwrap_or(until);
        let at_min = at / 60.0;
        let mut before: Vec<f64> = rows
            .iter()
            .filter(|r| r.sim_minutes <= at_min)
            .rev()
            .take(opts.baseline_steps)
            .map(|r| r.p99_ms)
            .collect();
        let pre = median(&mut before);
        let after: Vec<&SessionRow> = rows
            .iter()
            .filter(|r| r.sim_minutes > at_min && r.sim_minutes <= end / 60.0)
            .collect();
        let spike = after
            .iter()
            .take(opts.spike_steps)
            .map(|r| r.p99_ms)
            .fold(f64::NAN, f64::max);
        let target = baselines[seg];
        let pre_baseline = baselines[seg - 1];
        let converged = after
            .iter()
            .find(|r| r.p99_ms <= opts.threshold * target)
            .map(|r| r.sim_minutes - at_min);
        let best = after.iter().map(|r| r.p99_ms).fold(f64::INFINITY, f64::min);
        switches.push(SwitchReport {
            at_minutes: at_min,
            to_segment: seg,
            pre_switch_ms: pre,
            pre_baseline_ms: pre_baseline,
            spike_ms: spike,
            spike_ratio: spike / pre_baseline,
            target_baseline_ms: target,
            converged_minutes: converged,
            attained_multiple: best / target,
            segment_minutes: (end - at) / 60.0,
        });
    }
    Ok(AdaptationReport {
        rows,
        switches,
        baselines: baselines.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationCell {
    pub f: f64,
    pub rate: u32,
    pub seed: u64,
    pub switches: usize,
    pub converged: usize,
    /// Convergence time of each switch, censored at its segment length.
    pub minutes: Vec<f64>,
    pub attained_multiple: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationRow {
    pub f: f64,
    pub rate: u32,
    /// Mean and standard deviation over every switch of every seed.
    pub mean_minutes: f64,
    pub std_minutes: f64,
    pub converged_share: f64,
    pub baseline_multiple: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationTable {
    pub cells: Vec<ExplorationCell>,
    pub rows: Vec<ExplorationRow>,
}

impl ExplorationTable {
    pub fn row(&self, f: f64, rate: u32) -> Option<&ExplorationRow> {
        self.rows.iter().find(|r| r.f == f && r.rate == rate)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Adaptation runs over every (f, switch rate, seed) cell, in parallel.
/// `tuners[i]` is the pretrained tuner used with `seeds[i]`; `baselines`
/// are the stationary p99 values of `(a, b)`.
#[allow(clippy::too_many_arguments)]
pub fn exploration_sweep(
    prepared: &Prepared,
    tuners: &[Tuner],
    seeds: &[u64],
    f_values: &[f64],
    rates: &[u32],
    hours: f64,
    workloads: (&WorkloadSpec, &WorkloadSpec),
    baselines: (f64, f64),
    opts: &AdaptOptions,
) -> Result<ExplorationTable> {
    if f_values.is_empty() || rates.is_empty() || seeds.is_empty() {
        return Err(Error::validation("grid", "f values, rates and seeds must be non-empty").in_stage(Stage::Explore));
    }
    if tuners.len() != seeds.len() {
        return Err(Error::validation("tuners", "need one tuner per seed").in_stage(Stage::Explore));
    }
    let jobs: Vec<(f64, u32, usize)> = f_values
        .iter()
        .flat_map(|&f| rates.iter().flat_map(move |&r| (0..seeds.len()).map(move |s| (f, r, s))))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(f, rate, s)| {
            let mut tuner = tuners[s].clone();
            tuner.params.plan.f = f;
            let schedule = ScheduleSpec::alternating(workloads.0, workloads.1, rate, hours);
            let base: Vec<f64> = (0..schedule.segments.len())
                .map(|i| if i % 2 == 0 { baselines.0 } else { baselines.1 })
                .collect();
            let report = adaptation_run(prepared, &tuner, &schedule, &base, opts, seeds[s])?;
            let minutes: Vec<f64> = report
                .switches
                .iter()
                .map(|w| w.converged_minutes.unwrap_or(w.segment_minutes))
                .collect();
            let attained = report.switches.iter().map(|w| w.attained_multiple).sum::<f64>()
                / report.switches.len().max(1) as f64;
            Ok(ExplorationCell {
                f,
                rate,
                seed: seeds[s],
                switches: report.switches.len(),
                converged: report.switches.iter().filter(|w| w.converged_minutes.is_some()).count(),
                minutes,
                attained_multiple: attained,
            })
        })
        .collect::<Result<Vec<_>>>()
        .stage(Stage::Explore)?;
    let mut rows = Vec::new();
    for &f in f_values {
        for &rate in rates {
            let group: Vec<&ExplorationCell> = cells.iter().filter(|c| c.f == f && c.rate == rate).collect();
            let pooled: Vec<f64> = group.iter().flat_map(|c| c.minutes.iter().copied()).collect();
            let (mean, std) = mean_std(&pooled);
            let switches: usize = group.iter().map(|c| c.switches).sum();
            let converged: usize = group.iter().map(|c| c.converged).sum();
            rows.push(ExplorationRow {
                f,
                rate,
                mean_minutes: mean,
                std_minutes: std,
                converged_share: converged as f64 / switches.max(1) as f64,
                baseline_multiple: group.iter().map(|c| c.attained_multiple).sum::<f64>() / group.len() as f64,
            });
        }
    }
    Ok(ExplorationTable { cells, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicProbe {
    pub lever: String,
    pub value: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicReport {
    pub baseline_p99_ms: f64,
    pub final_p99_ms: f64,
    pub probes: Vec<HeuristicProbe>,
    pub sim_minutes: f64,
}

/// Scripted operator: for each lever in turn, try `probes` evenly spread
/// values (every category for small categoricals) and keep the best.
pub fn heuristic_operator(
    prepared: &Prepared,
    params: &TunerParams,
    workload: &WorkloadSpec,
    levers: &[String],
    probes: usize,
    seed: u64,
) -> Result<HeuristicReport> {
    let space = &prepared.space;
    // settle() only reads the tuner's timing parameters
    let observer = prepared.tuner(1, params.clone(), seed)?;
    let mut engine = Engine::new(space.clone(), prepared.truth.clone(), prepared.engine.clone(), seed);
    let mut load = Stationary { spec: workload.clone() };
    let baseline = observer.settle(&mut engine, &mut load)?.p99_ms;
    let mut best_p99 = baseline;
    let mut out = Vec::new();
    for name in levers {
        let i = space
            .index_of(name)
            .ok_or_else(|| Error::validation("lever", format!("unknown lever {name}")))?;
        let lever = &space.levers[i];
        let candidates: Vec<f64> = match lever.category_count() {
            Some(n) if n <= probes => (0..n).map(|c| c as f64).collect(),
            _ => {
                let (lo, hi) = lever.bounds();
                (0..probes)
                    .map(|k| lever.clamp(lo + (hi - lo) * (k as f64 + 0.5) / probes as f64))
                    .collect()
            }
        };
        let mut best = engine.config().values[i];
        for v in candidates {
            let mut next = engine.config().clone();
            next.values[i] = v;
            next.provenance = Provenance::Tuned;
            if next.validate(space).is_err() {
                continue;
            }
            engine.reconfigure(next)?;
            let p99 = observer.settle(&mut engine, &mut load)?.p99_ms;
            out.push(HeuristicProbe {
                lever: name.clone(),
                value: v,
                p99_ms: p99,
            });
            if p99 < best_p99 {
                best_p99 = p99;
                best = v;
            }
        }
        let mut next = engine.config().clone();
        next.values[i] = best;
        engine.reconfigure(next)?;
    }
    let final_p99 = observer.settle(&mut engine, &mut load)?.p99_ms;
    Ok(HeuristicReport {
        baseline_p99_ms: baseline,
        final_p99_ms: final_p99,
        probes: out,
        sim_minutes: engine.clock() / 60.0,
    })
}

/// Two-segment schedule: `a` for `first_min`, then `b` for `second_min`.
pub fn switch_schedule(a: &WorkloadSpec, b: &WorkloadSpec, first_min: f64, second_min: f64) -> ScheduleSpec {
    ScheduleSpec {
        segments: vec![
            ScheduleSegment {
                spec: a.clone(),
                duration: first_min * 60.0,
            },
            ScheduleSegment {
                spec: b.clone(),
                duration: second_min * 60.0,
            },
        ],
    }
}
