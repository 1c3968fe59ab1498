//! Hidden structure of the simulated engine: which levers drive latency and
//! how the 90 monitoring metrics arise from seven latent per-node factors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::levers::{LeverSpace, BATCH_INTERVAL, DRIVER_MEMORY};
use crate::error::{Error, Result};

pub const LATENT_FACTORS: usize = 7;
pub const METRIC_COUNT: usize = 90;

pub const FACTOR_CPU: usize = 0;
pub const FACTOR_HEAP: usize = 1;
pub const FACTOR_NETWORK: usize = 2;
pub const FACTOR_DISK: usize = 3;
pub const FACTOR_SCHEDULER: usize = 4;
pub const FACTOR_GC: usize = 5;
pub const FACTOR_QUEUE: usize = 6;

pub const FACTOR_NAMES: [&str; LATENT_FACTORS] = ["cpu", "heap", "network", "disk", "scheduler", "gc", "queue"];

/// Metrics per factor on worker nodes; the remainder are constant.
const GROUP_SIZES: [usize; LATENT_FACTORS] = [26, 20, 8, 7, 7, 7, 6];
const CONSTANT_METRICS: usize = METRIC_COUNT - 81;

/// Factors that vary on the driver node; the rest sit idle there.
pub const DRIVER_ACTIVE: [bool; LATENT_FACTORS] = [false, true, false, false, true, false, true];

/// Levers eligible for a planted effect besides the two structural ones.
const CANDIDATES: [&str; 14] = [
    "executor_memory_gb",
    "executor_cores",
    "memory_fraction",
    "default_parallelism",
    "sql_shuffle_partitions",
    "serializer",
    "gc_collector",
    "locality_wait_s",
    "kafka_max_rate_per_partition",
    "shuffle_file_buffer_kb",
    "io_compression_codec",
    "block_interval_ms",
    "concurrent_jobs",
    "storage_level",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum EffectShape {
    /// Batch interval: acts through batching and queueing, not through efficiency.
    BatchInterval,
    /// Driver heap: per-batch overhead `pressure * load / mem + gc * mem`.
    DriverHeap,
    /// Penalty `u^power`, `u` the lever's position in its range.
    Increasing { power: f64 },
    /// Penalty `(1 - u)^power`.
    Decreasing { power: f64 },
    /// Penalty `((u - c) / width)^2` with `c = center + load_shift * load`, capped at 1.
    UShaped { center: f64, width: f64, load_shift: f64 },
}

impl EffectShape {
    /// Penalty in `[0, 1]` at position `u`; `load` is log10 of the event rate
    /// relative to the engine's reference rate.
    pub fn penalty(&self, u: f64, load: f64) -> f64 {
        match *self {
            EffectShape::BatchInterval | EffectShape::DriverHeap => 0.0,
            EffectShape::Increasing { power } => u.powf(power),
            EffectShape::Decreasing { power } => (1.0 - u).powf(power),
            EffectShape::UShaped {
                center,
                width,
                load_shift,
            } => {
                let c = (center + load_shift * load).clamp(0.05, 0.95);
                ((u - c) / width).powi(2).min(1.0)
            }
        }
    }

    pub fn is_structural(&self) -> bool {
        matches!(self, EffectShape::BatchInterval | EffectShape::DriverHeap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub lever: String,
    pub index: usize,
    #[serde(flatten)]
    pub shape: EffectShape,
    /// Multiplicative service-time penalty at the worst setting.
    pub amplitude: f64,
    /// (factor, weight) pairs through which the lever shows up in worker metrics.
    pub factor_weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    /// Driving factor; `None` for constant metrics.
    pub factor: Option<usize>,
    pub loading: f64,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub influential_levers: Vec<String>,
    pub effects: Vec<PlantedEffect>,
    /// Near-zero efficiency slopes on a few non-influential levers.
    pub minor_effects: Vec<(usize, f64)>,
    pub latent_factors: Vec<String>,
    pub metrics: Vec<MetricSpec>,
    pub noise_seed: u64,
}

impl GroundTruth {
    pub fn effect(&self, lever: &str) -> Option<&PlantedEffect> {
        self.effects.iter().find(|e| e.lever == lever)
    }

    pub fn is_influential(&self, lever: &str) -> bool {
        self.influential_levers.iter().any(|l| l == lever)
    }

    pub fn metric_names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.name.clone()).collect()
    }

    /// Service-time multiplier from the non-structural planted effects.
    pub fn efficiency_penalty(&self, space: &LeverSpace, values: &[f64], load: f64) -> f64 {
        let planted: f64 = self
            .effects
            .iter()
            .filter(|e| !e.shape.is_structural())
            .map(|e| {
                let u = space.levers[e.index].normalize(values[e.index]);
                e.amplitude * e.shape.penalty(u, load)
            })
            .sum();
        1.0 + planted + self.minor_penalty(space, values)
    }

    /// Contribution of the non-influential levers to the multiplier.
    pub fn minor_penalty(&self, space: &LeverSpace, values: &[f64]) -> f64 {
        self.minor_effects
            .iter()
            .map(|&(i, slope)| slope * space.levers[i].normalize(values[i]))
            .sum()
    }
}

/// Plants `k_influential` levers with latency effects. The batch interval is
/// always planted, and the driver heap whenever `k_influential >= 2`.
pub fn plant_ground_truth(space: &LeverSpace, k_influential: usize, seed: u64) -> Result<GroundTruth> {
    if !(1..=15).contains(&k_influential) {
        return Err(Error::validation(
            "k_influential",
            format!("must lie in 1..=15, got {k_influential}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = |name: &str| {
        space
            .index_of(name)
            .ok_or_else(|| Error::validation(name, "lever missing from space"))
    };

    let mut effects = vec![PlantedEffect {
        lever: BATCH_INTERVAL.into(),
        index: index(BATCH_INTERVAL)?,
        shape: EffectShape::BatchInterval,
        amplitude: 0.0,
        factor_weights: vec![(FACTOR_SCHEDULER, -1.0), (FACTOR_NETWORK, -0.6), (FACTOR_QUEUE, 0.5)],
    }];
    if k_influential >= 2 {
        effects.push(PlantedEffect {
            lever: DRIVER_MEMORY.into(),
            index: index(DRIVER_MEMORY)?,
            shape: EffectShape::DriverHeap,
            amplitude: 0.0,
            factor_weights: vec![(FACTOR_HEAP, 0.4)],
        });
    }

    let mut pool: Vec<&str> = CANDIDATES.iter().copied().filter(|c| space.index_of(c).is_some()).collect();
    pool.shuffle(&mut rng);
    if pool.len() + effects.len() < k_influential {
        return Err(Error::validation("k_influential", "not enough candidate levers in the space"));
    }
    // Metric channels for the planted levers; cycled so every worker factor
    // other than network and queue is touched by some lever.
    let channels = [FACTOR_HEAP, FACTOR_GC, FACTOR_DISK, FACTOR_CPU];
    for (slot, name) in pool.iter().take(k_influential - effects.len()).enumerate() {
        // a U over two categories can leave both of them equally penalised
        let shapes = if space.levers[index(name)?].category_count().is_some() { 2 } else { 3 };
        let shape = match rng.random_range(0..shapes) {
            0 => EffectShape::Increasing {
                power: rng.random_range(1.0..2.0),
            },
            1 => EffectShape::Decreasing {
                power: rng.random_range(1.0..2.0),
            },
            _ => EffectShape::UShaped {
                center: rng.random_range(0.3..0.7),
                width: rng.random_range(0.35..0.5),
                load_shift: [-0.25, 0.0, 0.25][rng.random_range(0..3)],
            },
        };
        let primary = channels[slot % channels.len()];
        let mut factor_weights = vec![(primary, rng.random_range(0.8..1.2))];
        if rng.random_bool(0.5) {
            let secondary = channels[(slot + 1 + rng.random_range(0..3)) % channels.len()];
            if secondary != primary {
                factor_weights.push((secondary, rng.random_range(0.4..0.7)));
            }
        }
        effects.push(PlantedEffect {
            lever: name.to_string(),
            index: index(name)?,
            shape,
            amplitude: rng.random_range(0.2..0.4),
            factor_weights,
        });
    }

    let influential_levers: Vec<String> = effects.iter().map(|e| e.lever.clone()).collect();
    let mut others: Vec<usize> = (0..space.len())
        .filter(|&i| !influential_levers.contains(&space.levers[i].name))
        .collect();
    others.shuffle(&mut rng);
    let minor_effects = others
        .into_iter()
        .take(12)
        .map(|i| (i, rng.random_range(-0.002..0.002)))
        .collect();

    Ok(GroundTruth {
        influential_levers,
        effects,
        minor_effects,
        latent_factors: FACTOR_NAMES.iter().map(|s| s.to_string()).collect(),
        metrics: metric_catalogue(&mut rng),
        noise_seed: rng.random(),
    })
}

fn metric_catalogue(rng: &mut ChaCha8Rng) -> Vec<MetricSpec> {
    const FAMILIES: [&[&str]; LATENT_FACTORS] = [
        &["cpu_user", "cpu_system", "cpu_iowait", "load_avg", "task_run_time", "executor_cpu_time", "ctx_switches", "interrupts", "run_queue"],
        &["heap_used", "heap_committed", "old_gen_used", "young_gen_used", "storage_mem_used", "execution_mem_used", "offheap_used"],
        &["net_rx_bytes", "net_tx_bytes", "shuffle_remote_read", "rpc_msgs"],
        &["disk_read_bytes", "disk_write_bytes", "shuffle_spill_disk", "disk_util"],
        &["tasks_scheduled", "stages_submitted", "scheduler_delay", "jobs_active"],
        &["gc_time", "gc_count", "cache_misses", "jit_time"],
        &["pending_batches", "kafka_lag", "processing_delay"],
    ];
    const CONSTANTS: [&str; CONSTANT_METRICS] = [
        "cpu_count", "mem_total", "fd_limit", "disk_total", "net_mtu", "jvm_version", "swap_total", "thread_limit", "page_size",
    ];
    let mut metrics = Vec::with_capacity(METRIC_COUNT);
    for (f, &size) in GROUP_SIZES.iter().enumerate() {
        let family = FAMILIES[f];
        for j in 0..size {
            let base = family[j % family.len()];
            let name = if j < family.len() {
                base.to_string()
            } else {
                format!("{base}_{}", j / family.len())
            };
            metrics.push(MetricSpec {
                name,
                factor: Some(f),
                loading: rng.random_range(0.8..1.2),
                offset: rng.random_range(1.0..100.0),
                scale: rng.random_range(0.5..5.0),
            });
        }
    }
    for (j, name) in CONSTANTS.iter().enumerate() {
        metrics.push(MetricSpec {
            name: name.to_string(),
            factor: None,
            loading: 0.0,
            offset: rng.random_range(1.0..1000.0),
            // first five exactly constant, the rest flat up to a little jitter
            scale: if j < 5 { 0.0 } else { 0.01 },
        });
    }
    metrics
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simengine::levers::default_space;

    #[test]
    fn planting_is_deterministic() {
        let space = default_space();
        let a = plant_ground_truth(&space, 5, 1).unwrap();
        let b = plant_ground_truth(&space, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.influential_levers.len(), 5);
        assert_eq!(a.influential_levers[0], BATCH_INTERVAL);
        assert_eq!(a.influential_levers[1], DRIVER_MEMORY);
        assert_eq!(a.latent_factors.len(), LATENT_FACTORS);
        assert_eq!(a.metrics.len(), METRIC_COUNT);
        for lever in &a.influential_levers {
            assert!(space.index_of(lever).is_some());
        }
        let c = plant_ground_truth(&space, 5, 2).unwrap();
        assert_ne!(a.influential_levers, c.influential_levers);
    }

    #[test]
    fn k_out_of_range() {
        let space = default_space();
        assert!(plant_ground_truth(&space, 0, 1).is_err());
        assert!(plant_ground_truth(&space, 16, 1).is_err());
        assert_eq!(plant_ground_truth(&space, 1, 1).unwrap().influential_levers, vec![BATCH_INTERVAL]);
        assert_eq!(plant_ground_truth(&space, 15, 1).unwrap().influential_levers.len(), 15);
    }

    #[test]
    fn metric_names_unique() {
        let truth = plant_ground_truth(&default_space(), 5, 3).unwrap();
        let mut names = truth.metric_names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), METRIC_COUNT);
    }

    #[test]
    fn penalty_shapes() {
        let inc = EffectShape::Increasing { power: 1.0 };
        assert_eq!(inc.penalty(0.0, 0.0), 0.0);
        assert_eq!(inc.penalty(1.0, 0.0), 1.0);
        let u = EffectShape::UShaped {
            center: 0.5,
            width: 0.5,
            load_shift: 0.25,
        };
        assert_eq!(u.penalty(0.5, 0.0), 0.0);
        assert_eq!(u.penalty(0.75, 1.0), 0.0);
        assert!(u.penalty(0.5, 1.0) > 0.0);
    }
}
