//! Lever schema and concrete configurations.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const BATCH_INTERVAL: &str = "batch_interval_s";
pub const DRIVER_MEMORY: &str = "driver_memory_gb";

/// Smallest driver heap the engine will start with.
pub const DRIVER_MEMORY_FLOOR_GB: f64 = 1.0;
/// Aggregate worker resources the executors must fit in.
pub const WORKER_MEMORY_GB: f64 = 540.0;
pub const WORKER_VCPUS: f64 = 72.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeverKind {
    Continuous { min: f64, max: f64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LeverKind,
    /// Continuous value, or category index for categorical levers.
    pub default: f64,
    pub requires_restart: bool,
}

impl LeverSpec {
    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, LeverKind::Continuous { .. })
    }

    /// Value range; categorical levers span `[0, categories - 1]`.
    pub fn bounds(&self) -> (f64, f64) {
        match &self.kind {
            LeverKind::Continuous { min, max } => (*min, *max),
            LeverKind::Categorical { categories } => (0.0, (categories.len() - 1) as f64),
        }
    }

    pub fn category_count(&self) -> Option<usize> {
        match &self.kind {
            LeverKind::Categorical { categories } => Some(categories.len()),
            LeverKind::Continuous { .. } => None,
        }
    }

    /// Position of `value` within the lever range, in `[0, 1]`.
    pub fn normalize(&self, value: f64) -> f64 {
        let (lo, hi) = self.bounds();
        if hi > lo {
            ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match &self.kind {
            LeverKind::Continuous { min, max } => value >= *min && value <= *max,
            LeverKind::Categorical { categories } => {
                value >= 0.0 && value.fract() == 0.0 && (value as usize) < categories.len()
            }
        }
    }

    pub fn clamp(&self, value: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let v = value.clamp(lo, hi);
        if self.is_continuous() {
            v
        } else {
            v.round()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            LeverKind::Continuous { min, max } => rng.random_range(*min..=*max),
            LeverKind::Categorical { categories } => rng.random_range(0..categories.len()) as f64,
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            LeverKind::Continuous { min, max } => {
                if !(min < max) {
                    return Err(Error::validation(&self.name, format!("min {min} must be below max {max}")));
                }
            }
            LeverKind::Categorical { categories } => {
                if categories.len() < 2 {
                    return Err(Error::validation(&self.name, "needs at least two categories"));
                }
            }
        }
        if !self.contains(self.default) {
            return Err(Error::validation(&self.name, format!("default {} outside range", self.default)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct LeverSpace {
    pub levers: Vec<LeverSpec>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawSpace {
    levers: Vec<LeverSpec>,
}

impl TryFrom<RawSpace> for LeverSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        LeverSpace::new(raw.levers)
    }
}

impl LeverSpace {
    pub fn new(levers: Vec<LeverSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(levers.len());
        for (i, lever) in levers.iter().enumerate() {
            lever.validate()?;
            if index.insert(lever.name.clone(), i).is_some() {
                return Err(Error::validation(&lever.name, "duplicate lever name"));
            }
        }
        Ok(LeverSpace { levers, index })
    }

    pub fn len(&self) -> usize {
        self.levers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn lever(&self, name: &str) -> Option<&LeverSpec> {
        self.index_of(name).map(|i| &self.levers[i])
    }

    pub fn default_config(&self) -> Configuration {
        Configuration {
            values: self.levers.iter().map(|l| l.default).collect(),
            provenance: Provenance::Default,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Uniformly random configuration that passes [`Configuration::validate`].
    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        loop {
            let config = Configuration {
                values: self.levers.iter().map(|l| l.sample(rng)).collect(),
                provenance: Provenance::Random,
            };
            if config.validate(self).is_ok() {
                return config;
            }
        }
    }

    /// Reads a configuration from a JSON object mapping lever names to numbers
    /// (continuous) or category names. Missing levers take their default.
    pub fn config_from_json(&self, text: &str) -> Result<Configuration> {
        let map: BTreeMap<String, Value> = serde_json::from_str(text)?;
        let mut config = self.default_config();
        config.provenance = Provenance::Tuned;
        for (name, value) in map {
            let i = self
                .index_of(&name)
                .ok_or_else(|| Error::validation(&name, "unknown lever"))?;
            config.values[i] = match (&self.levers[i].kind, &value) {
                (LeverKind::Categorical { categories }, Value::String(s)) => categories
                    .iter()
                    .position(|c| c == s)
                    .ok_or_else(|| Error::validation(&name, format!("unknown category {s}")))?
                    as f64,
                (_, Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
                _ => return Err(Error::validation(&name, format!("unsupported value {value}"))),
            };
        }
        config.validate(self)?;
        Ok(config)
    }

    pub fn config_to_json(&self, config: &Configuration) -> Result<String> {
        let map: BTreeMap<&str, Value> = self
            .levers
            .iter()
            .zip(&config.values)
            .map(|(l, &v)| {
                let value = match &l.kind {
                    LeverKind::Categorical { categories } => Value::String(categories[v as usize].clone()),
                    LeverKind::Continuous { .. } => serde_json::json!(v),
                };
                (l.name.as_str(), value)
            })
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Default,
    Random,
    Tuned,
}

/// One value per lever, aligned with the owning [`LeverSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl Configuration {
    pub fn get(&self, space: &LeverSpace, name: &str) -> Option<f64> {
        space.index_of(name).map(|i| self.values[i])
    }

    pub fn set(&mut self, space: &LeverSpace, name: &str, value: f64) -> Result<()> {
        let i = space
            .index_of(name)
            .ok_or_else(|| Error::validation(name, "unknown lever"))?;
        self.values[i] = value;
        Ok(())
    }

    /// Range checks plus the small set of combinations the engine refuses to start with.
    pub fn validate(&self, space: &LeverSpace) -> Result<()> {
        if self.values.len() != space.len() {
            return Err(Error::validation(
                "configuration",
                format!("{} values for {} levers", self.values.len(), space.len()),
            ));
        }
        for (lever, &v) in space.levers.iter().zip(&self.values) {
            if !lever.contains(v) {
                return Err(Error::validation(&lever.name, format!("value {v} outside range")));
            }
        }
        let get = |name: &str| self.get(space, name);
        if let Some(mem) = get(DRIVER_MEMORY) {
            if mem < DRIVER_MEMORY_FLOOR_GB {
                return Err(Error::ForbiddenConfig(format!(
                    "driver memory {mem:.2} GB below the {DRIVER_MEMORY_FLOOR_GB} GB floor"
                )));
            }
        }
        if let (Some(mem), Some(n)) = (get("executor_memory_gb"), get("executor_instances")) {
            if mem * n.round() > WORKER_MEMORY_GB {
                return Err(Error::ForbiddenConfig(format!(
                    "{n:.0} executors x {mem:.1} GB exceed {WORKER_MEMORY_GB} GB of worker memory"
                )));
            }
        }
        if let (Some(cores), Some(n)) = (get("executor_cores"), get("executor_instances")) {
            if cores.round() * n.round() > WORKER_VCPUS {
                return Err(Error::ForbiddenConfig(format!(
                    "{n:.0} executors x {cores:.0} cores exceed {WORKER_VCPUS} vcpus"
                )));
            }
        }
        if let (Some(lo), Some(hi)) = (get("dyn_min_executors"), get("dyn_max_executors")) {
            if lo > hi {
                return Err(Error::ForbiddenConfig(format!(
                    "dynamic allocation minimum {lo:.0} above maximum {hi:.0}"
                )));
            }
        }
        Ok(())
    }

    /// Indices of levers whose values differ.
    pub fn diff(&self, other: &Configuration) -> Vec<usize> {
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

fn cont(name: &str, min: f64, max: f64, default: f64, restart: bool) -> LeverSpec {
    LeverSpec {
        name: name.to_string(),
        kind: LeverKind::Continuous { min, max },
        default,
        requires_restart: restart,
    }
}

fn cat(name: &str, categories: &[&str], default: usize, restart: bool) -> LeverSpec {
    LeverSpec {
        name: name.to_string(),
        kind: LeverKind::Categorical {
            categories: categories.iter().map(|c| c.to_string()).collect(),
        },
        default: default as f64,
        requires_restart: restart,
    }
}

/// The 109-lever schema, modelled on Spark streaming configuration groups.
pub fn default_space() -> LeverSpace {
    const B: &[&str] = &["false", "true"];
    let levers = vec![
        // streaming
        cont(BATCH_INTERVAL, 0.5, 30.0, 10.0, false),
        cont("block_interval_ms", 50.0, 1000.0, 200.0, false),
        cont("receiver_max_rate", 1_000.0, 200_000.0, 100_000.0, false),
        cont("kafka_max_rate_per_partition", 100.0, 50_000.0, 10_000.0, false),
        cont("backpressure_initial_rate", 100.0, 100_000.0, 10_000.0, false),
        cont("ui_retained_batches", 100.0, 2_000.0, 1_000.0, false),
        cont("concurrent_jobs", 1.0, 8.0, 1.0, false),
        cont("receiver_wal_rolling_interval_s", 10.0, 600.0, 60.0, false),
        // driver
        cont(DRIVER_MEMORY, 0.5, 16.0, 1.0, true),
        cont("driver_cores", 1.0, 8.0, 1.0, true),
        cont("driver_max_result_size_gb", 0.5, 8.0, 1.0, false),
        cont("driver_memory_overhead_mb", 384.0, 4_096.0, 384.0, true),
        // executors
        cont("executor_memory_gb", 1.0, 32.0, 4.0, true),
        cont("executor_cores", 1.0, 8.0, 2.0, true),
        cont("executor_instances", 2.0, 36.0, 9.0, true),
        cont("executor_memory_overhead_mb", 384.0, 8_192.0, 512.0, true),
        cont("executor_heartbeat_interval_s", 5.0, 60.0, 10.0, false),
        // memory
        cont("memory_fraction", 0.2, 0.95, 0.6, true),
        cont("memory_storage_fraction", 0.1, 0.9, 0.5, true),
        cont("memory_offheap_size_mb", 0.0, 8_192.0, 0.0, true),
        // parallelism
        cont("default_parallelism", 8.0, 512.0, 18.0, false),
        cont("sql_shuffle_partitions", 8.0, 1_024.0, 200.0, false),
        // shuffle
        cont("shuffle_file_buffer_kb", 16.0, 1_024.0, 32.0, false),
        cont("shuffle_spill_batch_size", 1_000.0, 100_000.0, 10_000.0, false),
        cont("reducer_max_size_in_flight_mb", 8.0, 256.0, 48.0, false),
        cont("shuffle_io_max_retries", 1.0, 10.0, 3.0, false),
        cont("shuffle_io_retry_wait_s", 1.0, 30.0, 5.0, false),
        cont("shuffle_sort_bypass_merge_threshold", 50.0, 1_000.0, 200.0, false),
        cont("shuffle_accurate_block_threshold_mb", 10.0, 500.0, 100.0, false),
        cont("shuffle_registration_timeout_ms", 1_000.0, 20_000.0, 5_000.0, false),
        cont("shuffle_max_chunks_in_flight", 100.0, 10_000.0, 1_000.0, false),
        // serialization and compression
        cont("kryo_buffer_kb", 16.0, 1_024.0, 64.0, false),
        cont("kryo_buffer_max_mb", 16.0, 2_048.0, 64.0, false),
        cont("io_compression_block_size_kb", 8.0, 256.0, 32.0, false),
        cont("zstd_level", 1.0, 9.0, 1.0, false),
        // network
        cont("network_timeout_s", 30.0, 600.0, 120.0, false),
        cont("rpc_message_max_size_mb", 64.0, 1_024.0, 128.0, false),
        cont("rpc_num_retries", 1.0, 10.0, 3.0, false),
        cont("rpc_retry_wait_s", 1.0, 10.0, 3.0, false),
        cont("rpc_ask_timeout_s", 30.0, 600.0, 120.0, false),
        cont("rpc_lookup_timeout_s", 30.0, 600.0, 120.0, false),
        cont("rpc_io_threads", 1.0, 64.0, 8.0, true),
        // scheduling
        cont("locality_wait_s", 0.0, 10.0, 3.0, false),
        cont("locality_wait_node_s", 0.0, 10.0, 3.0, false),
        cont("locality_wait_process_s", 0.0, 10.0, 3.0, false),
        cont("locality_wait_rack_s", 0.0, 10.0, 3.0, false),
        cont("scheduler_revive_interval_s", 0.1, 5.0, 1.0, false),
        cont("speculation_interval_ms", 50.0, 1_000.0, 100.0, false),
        cont("speculation_multiplier", 1.1, 5.0, 1.5, false),
        cont("speculation_quantile", 0.5, 0.99, 0.75, false),
        cont("task_cpus", 1.0, 4.0, 1.0, false),
        cont("task_max_failures", 1.0, 10.0, 4.0, false),
        cont("scheduler_min_registered_ratio", 0.0, 1.0, 0.8, false),
        cont("scheduler_max_registered_wait_s", 5.0, 120.0, 30.0, false),
        // dynamic allocation
        cont("dyn_min_executors", 0.0, 10.0, 0.0, false),
        cont("dyn_max_executors", 2.0, 36.0, 36.0, false),
        cont("dyn_initial_executors", 0.0, 10.0, 0.0, false),
        cont("dyn_executor_idle_timeout_s", 10.0, 600.0, 60.0, false),
        cont("dyn_scheduler_backlog_timeout_s", 1.0, 60.0, 1.0, false),
        // storage and sql
        cont("storage_memory_map_threshold_mb", 1.0, 64.0, 2.0, false),
        cont("storage_replication", 1.0, 3.0, 1.0, false),
        cont("broadcast_block_size_mb", 1.0, 32.0, 4.0, false),
        cont("files_max_partition_bytes_mb", 16.0, 512.0, 128.0, false),
        cont("files_open_cost_mb", 1.0, 16.0, 4.0, false),
        cont("sql_broadcast_threshold_mb", 1.0, 100.0, 10.0, false),
        cont("sql_inmemory_batch_size", 1_000.0, 100_000.0, 10_000.0, false),
        // jvm and gc
        cont("gc_new_ratio", 1.0, 8.0, 2.0, true),
        cont("gc_survivor_ratio", 2.0, 16.0, 8.0, true),
        cont("gc_max_tenuring", 1.0, 15.0, 15.0, true),
        cont("gc_parallel_threads", 1.0, 16.0, 4.0, true),
        cont("gc_conc_threads", 1.0, 8.0, 2.0, true),
        cont("g1_heap_region_mb", 1.0, 32.0, 4.0, true),
        cont("g1_ihop_percent", 20.0, 80.0, 45.0, true),
        cont("gc_pause_target_ms", 50.0, 1_000.0, 200.0, true),
        cont("jvm_metaspace_mb", 64.0, 1_024.0, 256.0, true),
        // bookkeeping and consumers
        cont("cleaner_periodic_gc_interval_min", 5.0, 120.0, 30.0, false),
        cont("listener_bus_capacity", 1_000.0, 100_000.0, 10_000.0, false),
        cont("kafka_poll_timeout_ms", 100.0, 10_000.0, 512.0, false),
        cont("kafka_fetch_max_mb", 1.0, 100.0, 50.0, false),
        cont("kafka_max_poll_records", 100.0, 10_000.0, 500.0, false),
        // categorical
        cat("serializer", &["java", "kryo"], 0, true),
        cat("io_compression_codec", &["lz4", "lzf", "snappy", "zstd"], 0, false),
        cat("shuffle_compress", B, 1, false),
        cat("shuffle_spill_compress", B, 1, false),
        cat("broadcast_compress", B, 1, false),
        cat("rdd_compress", B, 0, false),
        cat("speculation", B, 0, false),
        cat("dynamic_allocation", B, 0, true),
        cat("shuffle_service", B, 0, true),
        cat("backpressure", B, 0, false),
        cat("write_ahead_log", B, 0, true),
        cat("unpersist", B, 1, false),
        cat("stop_gracefully", B, 0, false),
        cat("gc_collector", &["parallel", "cms", "g1"], 0, true),
        cat("kryo_registration_required", B, 0, true),
        cat("kryo_reference_tracking", B, 1, true),
        cat("offheap_enabled", B, 0, true),
        cat("scheduler_mode", &["fifo", "fair"], 0, false),
        cat("sql_codegen", B, 1, false),
        cat("sql_adaptive", B, 0, false),
        cat("shuffle_manager", &["sort", "tungsten-sort"], 0, true),
        cat(
            "storage_level",
            &["memory_only", "memory_and_disk", "memory_only_ser", "memory_and_disk_ser"],
            2,
            false,
        ),
        cat("receiver_reliable", B, 0, true),
        cat("eventlog_enabled", B, 0, false),
        cat("ui_enabled", B, 1, false),
        cat("jvm_compressed_oops", B, 1, true),
        cat("kafka_consumer_cache", B, 1, false),
        cat("locality_preference", &["process", "node", "rack", "any"], 0, false),
        cat("task_reaper", B, 0, false),
    ];
    LeverSpace::new(levers).expect("built-in lever space is valid")
}
