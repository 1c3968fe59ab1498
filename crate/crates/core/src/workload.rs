//! Synthetic event traces that drive the simulated engine.
//!
//! Three load shapes are supported: homogeneous Poisson arrivals, trapezoidal
//! ramps (a non-homogeneous Poisson process realised by thinning), and
//! schedules that concatenate segments of either. Event sizes are Gaussian,
//! truncated below at [`MIN_EVENT_SIZE_MB`]. Every generator is a pure
//! function of its spec: the same seed always yields the same trace.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower truncation point for sampled event sizes.
pub const MIN_EVENT_SIZE_MB: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub arrival_s: f64,
    pub size_mb: f64,
}

/// Workload kind plus the times at which a schedule switched segments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceLabel {
    pub kind: String,
    pub boundaries: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<Event>,
    pub horizon: f64,
    pub label: TraceLabel,
}

impl EventTrace {
    pub fn empty(horizon: f64, kind: &str) -> Self {
        EventTrace {
            events: Vec::new(),
            horizon,
            label: TraceLabel {
                kind: kind.to_string(),
                boundaries: Vec::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Mean arrival rate over the horizon, in events per second.
    pub fn mean_rate(&self) -> f64 {
        if self.horizon > 0.0 {
            self.events.len() as f64 / self.horizon
        } else {
            0.0
        }
    }

    /// Checks the ordering, positivity and horizon invariants.
    pub fn validate(&self) -> Result<()> {
        let mut last = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if !(e.arrival_s >= last) {
                return Err(Error::validation(
                    "events",
                    format!("arrival {i} at {} precedes {last}", e.arrival_s),
                ));
            }
            if !(e.size_mb > 0.0) {
                return Err(Error::validation("events", format!("event {i} has size {}", e.size_mb)));
            }
            if e.arrival_s > self.horizon {
                return Err(Error::validation(
                    "events",
                    format!("arrival {i} at {} beyond horizon {}", e.arrival_s, self.horizon),
                ));
            }
            last = e.arrival_s;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "arrival_s,size_mb")?;
        for e in &self.events {
            writeln!(out, "{:.6},{:.6}", e.arrival_s, e.size_mb)?;
        }
        Ok(())
    }

    /// Reads a trace written by [`EventTrace::write_csv`]. The horizon is
    /// taken as the last arrival time unless a larger one is supplied.
    pub fn read_csv<R: Read>(input: R, horizon: Option<f64>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let mut events = Vec::new();
        for row in reader.deserialize::<Event>() {
            events.push(row?);
        }
        let last = events.last().map_or(0.0, |e| e.arrival_s);
        let trace = EventTrace {
            events,
            horizon: horizon.unwrap_or(last).max(last),
            label: TraceLabel {
                kind: "csv".into(),
                boundaries: Vec::new(),
            },
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonSpec {
    pub lambda_rate: f64,
    pub size_mean: f64,
    pub size_std: f64,
    pub duration: f64,
    pub seed: u64,
}

impl PoissonSpec {
    pub fn validate(&self) -> Result<()> {
        positive("lambda_rate", self.lambda_rate)?;
        non_negative("size_std", self.size_std)?;
        finite("size_mean", self.size_mean)?;
        non_negative("duration", self.duration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidSpec {
    pub ramp_up: f64,
    pub stable: f64,
    pub ramp_down: f64,
    pub peak_rate: f64,
    pub size_mean: f64,
    pub size_std: f64,
    pub seed: u64,
}

impl TrapezoidSpec {
    pub fn validate(&self) -> Result<()> {
        non_negative("ramp_up", self.ramp_up)?;
        non_negative("stable", self.stable)?;
        non_negative("ramp_down", self.ramp_down)?;
        if self.duration() <= 0.0 {
            return Err(Error::validation("ramp_up/stable/ramp_down", "at least one phase must be positive"));
        }
        positive("peak_rate", self.peak_rate)?;
        finite("size_mean", self.size_mean)?;
        non_negative("size_std", self.size_std)
    }

    pub fn duration(&self) -> f64 {
        self.ramp_up + self.stable + self.ramp_down
    }

    /// Instantaneous arrival rate at time `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else if t < self.ramp_up {
            self.peak_rate * t / self.ramp_up
        } else if t <= self.ramp_up + self.stable {
            self.peak_rate
        } else if t < self.duration() {
            self.peak_rate * (self.duration() - t) / self.ramp_down
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorkloadSpec {
    Poisson(PoissonSpec),
    Trapezoid(TrapezoidSpec),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            WorkloadSpec::Poisson(p) => p.validate(),
            WorkloadSpec::Trapezoid(t) => t.validate(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WorkloadSpec::Poisson(_) => "poisson",
            WorkloadSpec::Trapezoid(_) => "trapezoid",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            WorkloadSpec::Poisson(p) => p.seed,
            WorkloadSpec::Trapezoid(t) => t.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            WorkloadSpec::Poisson(p) => p.seed = seed,
            WorkloadSpec::Trapezoid(t) => t.seed = seed,
        }
        out
    }

    /// Long-run mean event rate of the spec, in events per second.
    pub fn mean_rate(&self) -> f64 {
        match self {
            WorkloadSpec::Poisson(p) => p.lambda_rate,
            WorkloadSpec::Trapezoid(t) => {
                t.peak_rate * (0.5 * t.ramp_up + t.stable + 0.5 * t.ramp_down) / t.duration()
            }
        }
    }

    pub fn size_mean(&self) -> f64 {
        match self {
            WorkloadSpec::Poisson(p) => p.size_mean,
            WorkloadSpec::Trapezoid(t) => t.size_mean,
        }
    }

    /// Trace covering `duration` seconds of this workload. Poisson specs are
    /// stretched to the requested duration; trapezoids keep their profile and
    /// fall silent after it ends.
    pub fn generate_for(&self, duration: f64) -> Result<EventTrace> {
        match self {
            WorkloadSpec::Poisson(p) => generate_poisson(&PoissonSpec {
                duration,
                ..p.clone()
            }),
            WorkloadSpec::Trapezoid(t) => {
                t.validate()?;
                let events: Vec<Event> = TrapezoidEvents::new(t)
                    .take_while(|e| e.arrival_s <= duration)
                    .collect();
                Ok(EventTrace {
                    events,
                    horizon: duration,
                    label: TraceLabel {
                        kind: "trapezoid".into(),
                        boundaries: Vec::new(),
                    },
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub spec: WorkloadSpec,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub segments: Vec<ScheduleSegment>,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::validation("segments", "schedule is empty"));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.duration > 0.0) || !seg.duration.is_finite() {
                return Err(Error::validation(
                    format!("segments[{i}].duration"),
                    format!("must be positive, got {}", seg.duration),
                ));
            }
            seg.spec.validate()?;
        }
        Ok(())
    }

    /// Alternates between `a` and `b`, switching `switches_per_hour` times an
    /// hour for `hours` hours. The result has one boundary per switch.
    pub fn alternating(a: &WorkloadSpec, b: &WorkloadSpec, switches_per_hour: u32, hours: f64) -> Self {
        let seg = 3600.0 / switches_per_hour.max(1) as f64;
        let switches = (switches_per_hour as f64 * hours).round() as usize;
        let segments = (0..=switches)
            .map(|i| ScheduleSegment {
                spec: if i % 2 == 0 { a.clone() } else { b.clone() },
                duration: seg,
            })
            .collect();
        ScheduleSpec { segments }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Start time of every segment after the first.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.segments.len().saturating_sub(1));
        for seg in &self.segments[..self.segments.len().saturating_sub(1)] {
            t += seg.duration;
            out.push(t);
        }
        out
    }

    /// Segment index active at time `t`.
    pub fn segment_at(&self, t: f64) -> usize {
        self.boundaries().iter().take_while(|&&b| t >= b).count()
    }
}

/// Streaming source of homogeneous Poisson arrivals.
pub struct PoissonEvents {
    rng: ChaCha8Rng,
    gaps: Exp<f64>,
    sizes: SizeSampler,
    clock: f64,
    duration: f64,
}

impl PoissonEvents {
    pub fn new(spec: &PoissonSpec) -> Result<Self> {
        spec.validate()?;
        Ok(PoissonEvents {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            gaps: Exp::new(spec.lambda_rate).map_err(|e| Error::validation("lambda_rate", e.to_string()))?,
            sizes: SizeSampler::new(spec.size_mean, spec.size_std)?,
            clock: 0.0,
            duration: spec.duration,
        })
    }
}

impl Iterator for PoissonEvents {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        self.clock += self.gaps.sample(&mut self.rng);
        if self.clock > self.duration {
            self.clock = f64::INFINITY;
            return None;
        }
        let size_mb = self.sizes.sample(&mut self.rng);
        Some(Event {
            arrival_s: self.clock,
            size_mb,
        })
    }
}

/// Streaming source of trapezoid-shaped arrivals, thinned from a Poisson
/// process at the peak rate.
pub struct TrapezoidEvents {
    rng: ChaCha8Rng,
    gaps: Exp<f64>,
    sizes: SizeSampler,
    spec: TrapezoidSpec,
    clock: f64,
}

impl TrapezoidEvents {
    /// Panics if the spec is invalid; use [`generate_trapezoid`] for a checked entry point.
    pub fn new(spec: &TrapezoidSpec) -> Self {
        TrapezoidEvents {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            gaps: Exp::new(spec.peak_rate).expect("validated peak rate"),
            sizes: SizeSampler::new(spec.size_mean, spec.size_std).expect("validated size"),
            spec: spec.clone(),
            clock: 0.0,
        }
    }
}

impl Iterator for TrapezoidEvents {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        let end = self.spec.duration();
        loop {
            self.clock += self.gaps.sample(&mut self.rng);
            if self.clock > end {
                self.clock = f64::INFINITY;
                return None;
            }
            let accept: f64 = self.rng.random();
            if accept * self.spec.peak_rate < self.spec.rate_at(self.clock) {
                let size_mb = self.sizes.sample(&mut self.rng);
                return Some(Event {
                    arrival_s: self.clock,
                    size_mb,
                });
            }
        }
    }
}

struct SizeSampler(Option<Normal<f64>>, f64);

impl SizeSampler {
    fn new(mean: f64, std: f64) -> Result<Self> {
        if std == 0.0 {
            return Ok(SizeSampler(None, mean.max(MIN_EVENT_SIZE_MB)));
        }
        let normal = Normal::new(mean, std).map_err(|e| Error::validation("size_std", e.to_string()))?;
        Ok(SizeSampler(Some(normal), mean))
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.0 {
            Some(n) => n.sample(rng).max(MIN_EVENT_SIZE_MB),
            None => self.1,
        }
    }
}

pub fn generate_poisson(spec: &PoissonSpec) -> Result<EventTrace> {
    let events: Vec<Event> = PoissonEvents::new(spec)?.collect();
    Ok(EventTrace {
        events,
        horizon: spec.duration,
        label: TraceLabel {
            kind: "poisson".into(),
            boundaries: Vec::new(),
        },
    })
}

pub fn generate_trapezoid(spec: &TrapezoidSpec) -> Result<EventTrace> {
    spec.validate()?;
    Ok(EventTrace {
        events: TrapezoidEvents::new(spec).collect(),
        horizon: spec.duration(),
        label: TraceLabel {
            kind: "trapezoid".into(),
            boundaries: Vec::new(),
        },
    })
}

/// Concatenates per-segment traces. Segment `i` is seeded with the segment
/// spec's seed plus `i`, so a one-segment schedule reproduces its spec exactly.
pub fn generate_schedule(spec: &ScheduleSpec) -> Result<EventTrace> {
    spec.validate()?;
    let mut events = Vec::new();
    let mut offset = 0.0;
    let mut kinds = Vec::new();
    for (i, seg) in spec.segments.iter().enumerate() {
        let seeded = seg.spec.with_seed(seg.spec.seed().wrapping_add(i as u64));
        let part = seeded.generate_for(seg.duration)?;
        events.extend(part.events.into_iter().map(|e| Event {
            arrival_s: e.arrival_s + offset,
            size_mb: e.size_mb,
        }));
        kinds.push(seg.spec.kind());
        offset += seg.duration;
    }
    kinds.dedup();
    Ok(EventTrace {
        events,
        horizon: offset,
        label: TraceLabel {
            kind: format!("schedule:{}", kinds.join("+")),
            boundaries: spec.boundaries(),
        },
    })
}

fn finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be finite, got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be positive, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be non-negative, got {v}")))
    }
}
