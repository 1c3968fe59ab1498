use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{Direction, PolicyNet};
use super::state::StateEncoder;
use super::{reward_of, select_action, update_with, Action, EpisodePlan, RewardKind, Step, Trajectory, UpdateReport};
use crate::discretiser::BinGrid;
use crate::error::{Error, Result};
use crate::simengine::{percentile, Configuration, Engine, LatencyStats, LeverSpace, MetricMatrix};
use crate::workload::{Event, EventTrace, ScheduleSpec, TraceLabel, WorkloadSpec};

/// Arrivals for an arbitrary stretch of engine time.
pub trait LoadSource {
    /// Events in `[start, start + duration)`, with arrival times relative to `start`.
    fn trace(&mut self, start: f64, duration: f64) -> Result<EventTrace>;
}

/// Derives an independent seed from a parent seed and a label.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Events of `spec` on `[from, from + duration)` of its own time axis;
/// trapezoids repeat with their profile's period.
fn spec_trace(spec: &WorkloadSpec, seed: u64, from: f64, duration: f64) -> Result<EventTrace> {
    let mut events = Vec::new();
    match spec {
        WorkloadSpec::Poisson(_) => {
            let key = (from * 1000.0).round() as u64;
            events = spec.with_seed(derive_seed(seed, key)).generate_for(duration)?.events;
        }
        WorkloadSpec::Trapezoid(t) => {
            let period = t.duration();
            let first = (from / period).floor() as u64;
            let last = ((from + duration) / period).ceil() as u64;
            for k in first..last {
                let origin = k as f64 * period;
                for e in spec.with_seed(derive_seed(seed, k)).generate_for(period)?.events {
                    let t_abs = origin + e.arrival_s;
                    if t_abs >= from && t_abs < from + duration {
                        events.push(Event {
                            arrival_s: t_abs - from,
                            size_mb: e.size_mb,
                        });
                    }
                }
            }
        }
    }
    Ok(EventTrace {
        events,
        horizon: duration,
        label: TraceLabel {
            kind: spec.kind().into(),
            boundaries: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stationary {
    pub spec: WorkloadSpec,
}

impl LoadSource for Stationary {
    fn trace(&mut self, start: f64, duration: f64) -> Result<EventTrace> {
        spec_trace(&self.spec, self.spec.seed(), start, duration)
    }
}

/// A schedule starting at engine time `origin`; the last segment continues
/// past the schedule's end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduled {
    pub schedule: ScheduleSpec,
    pub origin: f64,
}

impl LoadSource for Scheduled {
    fn trace(&mut self, start: f64, duration: f64) -> Result<EventTrace> {
        let end = start + duration;
        let mut seg_start = self.origin;
        let count = self.schedule.segments.len();
        let mut events = Vec::new();
        for (i, seg) in self.schedule.segments.iter().enumerate() {
            let seg_end = if i + 1 == count { f64::INFINITY } else { seg_start + seg.duration };
            let a = start.max(seg_start);
            let b = end.min(seg_end);
            if b > a {
                let piece = spec_trace(&seg.spec, seg.spec.seed().wrapping_add(i as u64), a - seg_start, b - a)?;
                events.extend(piece.events.into_iter().map(|e| Event {
                    arrival_s: e.arrival_s + (a - start),
                    size_mb: e.size_mb,
                }));
            }
            seg_start = seg_end;
            if seg_start >= end {
                break;
            }
        }
        Ok(EventTrace {
            events,
            horizon: duration,
            label: TraceLabel {
                kind: "schedule".into(),
                boundaries: Vec::new(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerParams {
    pub plan: EpisodePlan,
    pub reward: RewardKind,
    /// Subtracted from the episode reward for every rejected configuration.
    pub reject_penalty: f64,
    /// Engine time per observation chunk, seconds.
    pub chunk_s: f64,
    /// Chunks in the sliding stabilisation window.
    pub stabilisation_chunks: usize,
    /// Coefficient of variation of the window's p99 values below which the
    /// latency counts as stable.
    pub stabilisation_cv: f64,
    pub stabilisation_cap_s: f64,
    /// Simulated time to generate an action.
    pub generation_s: f64,
    /// Simulated time of one policy update.
    pub update_s: f64,
    /// Scale each batch's advantages to unit spread before the update.
    pub scale_advantages: bool,
}

impl Default for TunerParams {
    fn default() -> Self {
        TunerParams {
            plan: EpisodePlan::default(),
            reward: RewardKind::MeanLatency,
            reject_penalty: 1.0,
            chunk_s: 60.0,
            stabilisation_chunks: 2,
            stabilisation_cv: 0.1,
            stabilisation_cap_s: 180.0,
            generation_s: 0.5,
            update_s: 1.0,
            scale_advantages: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTiming {
    pub generation: f64,
    pub loading: f64,
    pub stabilisation: f64,
    pub update: f64,
}

impl StepTiming {
    pub fn total(&self) -> f64 {
        self.generation + self.loading + self.stabilisation + self.update
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settled {
    pub p99_ms: f64,
    pub latencies: Vec<f64>,
    pub metrics: MetricMatrix,
    /// Engine time spent observing.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub step: Step,
    /// Latencies of the stabilised measurement window.
    pub latencies: Vec<f64>,
    pub metrics: MetricMatrix,
}

/// Policy, ranking, per-lever bin grids and state history of one tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuner {
    pub space: LeverSpace,
    pub ranking: Vec<String>,
    /// One grid per ranked lever; `None` for categorical levers.
    pub grids: Vec<Option<BinGrid>>,
    pub net: PolicyNet,
    pub encoder: StateEncoder,
    pub params: TunerParams,
    pub steps_taken: u64,
}

impl Tuner {
    pub fn new(
        space: LeverSpace,
        ranking: Vec<String>,
        state_metrics: Vec<String>,
        nodes: usize,
        params: TunerParams,
        seed: u64,
    ) -> Result<Self> {
        if ranking.is_empty() {
            return Err(Error::validation("ranking", "must not be empty"));
        }
        params.plan.validate()?;
        let grids = fresh_grids(&space, &ranking)?;
        let encoder = StateEncoder::new(state_metrics, nodes);
        let net = PolicyNet::new(encoder.input_len(ranking.len()), ranking.len(), seed);
        Ok(Tuner {
            space,
            ranking,
            grids,
            net,
            encoder,
            params,
            steps_taken: 0,
        })
    }

    pub fn reset_grids(&mut self) -> Result<()> {
        self.grids = fresh_grids(&self.space, &self.ranking)?;
        Ok(())
    }

    /// Policy-gradient step over a batch of finished episodes.
    pub fn update(&mut self, episodes: &[Trajectory]) -> Result<UpdateReport> {
        update_with(&mut self.net, episodes, self.params.plan.gamma, self.params.scale_advantages)
    }

    /// Starts a new episode: the heatmap blend restarts from the next
    /// window, the normalisation bounds are kept.
    pub fn begin_episode(&mut self) {
        self.encoder.blended = None;
    }

    /// Replaces the ranking, keeping the policy when the length is unchanged.
    pub fn rerank(&mut self, ranking: Vec<String>) -> Result<()> {
        if ranking.len() != self.ranking.len() {
            return Err(Error::validation("ranking", "length must stay fixed"));
        }
        self.ranking = ranking;
        self.reset_grids()
    }

    /// Runs the engine for one chunk without changing anything.
    pub fn observe(&self, engine: &mut Engine, load: &mut dyn LoadSource) -> Result<(MetricMatrix, LatencyStats)> {
        let trace = load.trace(engine.clock(), self.params.chunk_s)?;
        engine.run(&trace, self.params.chunk_s)
    }

    /// Next configuration for an action: one bin (or category) step.
    fn apply_action<R: Rng + ?Sized>(
        &mut self,
        config: &Configuration,
        action: &Action,
        rng: &mut R,
    ) -> Result<(Configuration, usize, f64)> {
        let i = self
            .space
            .index_of(&action.lever)
            .ok_or_else(|| Error::validation("lever", format!("unknown lever {}", action.lever)))?;
        let lever = &self.space.levers[i];
        let current = config.values[i];
        let (bin, value) = match &mut self.grids[action.rank] {
            Some(grid) => {
                let from = grid.bin_of(current) as i64;
                let to = (from + action.direction.sign()).clamp(0, grid.len() as i64 - 1) as usize;
                let value = lever.clamp(grid.value_of(to, rng)?);
                grid.record_selection(to)?;
                (grid.bin_of(value), value)
            }
            None => {
                let n = lever.category_count().unwrap_or(1) as i64;
                let to = (current as i64 + action.direction.sign()).clamp(0, n - 1);
                (to as usize, to as f64)
            }
        };
        let mut next = config.clone();
        next.values[i] = value;
        next.provenance = crate::simengine::Provenance::Tuned;
        Ok((next, bin, value))
    }

    /// One tuning step: encode, act, install the configuration and wait for
    /// the latency to settle. `last` is the previous step's metric window.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        engine: &mut Engine,
        load: &mut dyn LoadSource,
        last: &MetricMatrix,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let config = engine.config().clone();
        let state = self
            .encoder
            .encode(last, &self.space, &config, &self.ranking, &self.grids)?;
        let input = state.to_input();
        let action = select_action(&self.net, &input, &self.ranking, self.params.plan.f, rng)?;
        let (next, bin, value) = self.apply_action(&config, &action, rng)?;

        let mut timing = StepTiming {
            generation: self.params.generation_s,
            ..Default::default()
        };
        let rejected = next.validate(&self.space).is_err();
        if !rejected {
            let report = engine.reconfigure(next)?;
            if report.load_time > 0.0 {
                let trace = load.trace(engine.clock(), report.load_time)?;
                engine.run(&trace, report.load_time)?;
            }
            timing.loading = report.load_time;
        }

        let settled = self.settle(engine, load)?;
        timing.stabilisation = settled.seconds;
        self.steps_taken += 1;
        Ok(StepOutcome {
            step: Step {
                input,
                action,
                bin,
                value,
                p99_ms: settled.p99_ms,
                reward: 0.0,
                rejected,
                timing,
            },
            latencies: settled.latencies,
            metrics: settled.metrics,
        })
    }

    /// Observes chunk after chunk until the p99 of the last
    /// `stabilisation_chunks` chunks varies by less than `stabilisation_cv`,
    /// or the cap is hit. The measurement is the final window of chunks.
    pub fn settle(&self, engine: &mut Engine, load: &mut dyn LoadSource) -> Result<Settled> {
        let chunks = (self.params.stabilisation_cap_s / self.params.chunk_s).round().max(1.0) as usize;
        let window = self.params.stabilisation_chunks.clamp(1, chunks);
        let mut p99s = Vec::new();
        let mut latencies: Vec<Vec<f64>> = Vec::new();
        let mut metrics: Vec<MetricMatrix> = Vec::new();
        let mut seconds = 0.0;
        for c in 0..chunks {
            let (m, stats) = self.observe(engine, load)?;
            seconds += self.params.chunk_s;
            p99s.push(stats.p99);
            latencies.push(stats.per_event);
            metrics.push(m);
            if c + 1 >= window && coefficient_of_variation(&p99s[p99s.len() - window..]) < self.params.stabilisation_cv {
                break;
            }
        }
        let tail = latencies.len() - window.min(latencies.len());
        let measured: Vec<f64> = latencies[tail..].concat();
        let mut window_metrics = metrics[tail].clone();
        for m in &metrics[tail + 1..] {
            window_metrics.extend(m)?;
        }
        Ok(Settled {
            p99_ms: percentile(&measured, 0.99) * 1000.0,
            latencies: measured,
            metrics: window_metrics,
            seconds,
        })
    }

    /// Negated latency summary over an episode's measured windows, minus
    /// the rejection penalties.
    pub fn episode_reward(&self, latencies: &[f64], rejections: usize) -> Result<f64> {
        Ok(reward_of(latencies, self.params.reward)? - self.params.reject_penalty * rejections as f64)
    }

    /// `n` steps with the reward applied to the last step: the negated
    /// latency summary over every measured window, minus the rejection
    /// penalties. Returns the trajectory and the final metric window.
    pub fn run_episode<R: Rng + ?Sized>(
        &mut self,
        engine: &mut Engine,
        load: &mut dyn LoadSource,
        n: usize,
        first: MetricMatrix,
        rng: &mut R,
    ) -> Result<(Trajectory, MetricMatrix)> {
        let mut last = first;
        let mut trajectory = Trajectory::default();
        let mut all = Vec::new();
        for _ in 0..n {
            let outcome = self.step(engine, load, &last, rng)?;
            all.extend_from_slice(&outcome.latencies);
            last = outcome.metrics;
            trajectory.steps.push(outcome.step);
        }
        let rejections = trajectory.steps.iter().filter(|s| s.rejected).count();
        let reward = self.episode_reward(&all, rejections)?;
        if let Some(final_step) = trajectory.steps.last_mut() {
            final_step.reward = reward;
        }
        Ok((trajectory, last))
    }
}

fn fresh_grids(space: &LeverSpace, ranking: &[String]) -> Result<Vec<Option<BinGrid>>> {
    ranking
        .iter()
        .map(|name| {
            let lever = space
                .lever(name)
                .ok_or_else(|| Error::validation("ranking", format!("unknown lever {name}")))?;
            if lever.is_continuous() {
                let (lo, hi) = lever.bounds();
                BinGrid::init(name.clone(), lo, hi).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    var.sqrt() / mean.abs()
}

impl Direction {
    pub fn parse(s: &str) -> Option<Direction> {
        match s {
            "decrease" => Some(Direction::Decrease),
            "increase" => Some(Direction::Increase),
            _ => None,
        }
    }
}
