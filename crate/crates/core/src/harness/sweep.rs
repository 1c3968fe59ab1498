use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{epoch_tables, table, SelectParams};
use crate::rltuner::derive_seed;
use crate::simengine::{
    run_window, Configuration, EngineParams, GroundTruth, LeverSpace, MetricMatrix, Provenance,
};
use crate::workload::WorkloadSpec;

/// One sweep window: the configuration, the workload, latency summary and
/// the epoch average of every metric on the driver and over the workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub window: usize,
    pub config_index: usize,
    pub workload: String,
    pub values: Vec<f64>,
    #[serde(with = "crate::floats::scalar")]
    pub p99_ms: f64,
    #[serde(with = "crate::floats::scalar")]
    pub mean_ms: f64,
    #[serde(with = "crate::floats::scalar")]
    pub throughput: f64,
    pub saturated: bool,
    #[serde(with = "crate::floats::vec")]
    pub driver: Vec<f64>,
    #[serde(with = "crate::floats::vec")]
    pub workers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunsDataset {
    pub lever_names: Vec<String>,
    pub metric_names: Vec<String>,
    pub rows: Vec<RunRow>,
    /// Full matrices of the leading windows, concatenated on one time axis.
    pub metrics: MetricMatrix,
}

impl RunsDataset {
    pub fn configs(&self) -> Vec<Configuration> {
        self.rows
            .iter()
            .map(|r| Configuration {
                values: r.values.clone(),
                provenance: Provenance::Random,
            })
            .collect()
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["window", "config", "workload", "p99_ms", "mean_ms", "throughput", "saturated"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(self.lever_names.iter().cloned());
        h.extend(self.metric_names.iter().map(|m| format!("driver.{m}")));
        h.extend(self.metric_names.iter().map(|m| format!("workers.{m}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.window.to_string(),
                r.config_index.to_string(),
                r.workload.clone(),
                r.p99_ms.to_string(),
                r.mean_ms.to_string(),
                r.throughput.to_string(),
                r.saturated.to_string(),
            ];
            rec.extend(r.values.iter().chain(&r.driver).chain(&r.workers).map(f64::to_string));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `runs.csv` back; the metric matrix is left empty.
    pub fn read_csv<R: Read>(input: R, space: &LeverSpace, node_count: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
        let fixed = 7;
        let levers = space.len();
        if header.len() < fixed + levers || !(header.len() - fixed - levers).is_multiple_of(2) {
            return Err(Error::validation("runs", "unexpected column count"));
        }
        let lever_names: Vec<String> = header[fixed..fixed + levers].to_vec();
        if lever_names.iter().zip(&space.levers).any(|(a, b)| *a != b.name) {
            return Err(Error::validation("runs", "lever columns do not match the space"));
        }
        let metrics = (header.len() - fixed - levers) / 2;
        let metric_names: Vec<String> = header[fixed + levers..fixed + levers + metrics]
            .iter()
            .map(|h| h.trim_start_matches("driver.").to_string())
            .collect();
        let num = |s: &str, field: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::validation(field.to_string(), format!("not a number: {s}")))
        };
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let f: Vec<&str> = rec.iter().collect();
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                f[range].iter().map(|s| num(s, "runs")).collect()
            };
            rows.push(RunRow {
                window: num(f[0], "window")? as usize,
                config_index: num(f[1], "config")? as usize,
                workload: f[2].to_string(),
                p99_ms: num(f[3], "p99_ms")?,
                mean_ms: num(f[4], "mean_ms")?,
                throughput: num(f[5], "throughput")?,
                saturated: f[6] == "true",
                values: nums(fixed..fixed + levers)?,
                driver: nums(fixed + levers..fixed + levers + metrics)?,
                workers: nums(fixed + levers + metrics..fixed + levers + 2 * metrics)?,
            });
        }
        Ok(RunsDataset {
            lever_names,
            metric_names: metric_names.clone(),
            rows,
            metrics: MetricMatrix::new(metric_names, node_count, 60.0),
        })
    }
}

/// The default configuration followed by independent random ones, every
/// lever drawn uniformly and forbidden draws resampled. Every configuration
/// runs one window per workload. `n_configs = 0` still runs the default.
#[allow(clippy::too_many_arguments)]
pub fn sweep_random_configs(
    space: &LeverSpace,
    truth: &GroundTruth,
    params: &EngineParams,
    workloads: &[WorkloadSpec],
    n_configs: usize,
    window_s: f64,
    selection_windows: usize,
    seed: u64,
) -> Result<RunsDataset> {
    if workloads.is_empty() {
        return Err(Error::validation("workloads", "must not be empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut configs = vec![space.default_config()];
    while configs.len() < n_configs.max(1) {
        let next = Configuration {
            values: space.levers.iter().map(|l| l.sample(&mut rng)).collect(),
            provenance: Provenance::Random,
        };
        if next.validate(space).is_ok() {
            configs.push(next);
        }
    }
    let select = SelectParams {
        window_samples: (window_s / params.sample_period_s).round() as usize,
        ..SelectParams::default()
    };
    let jobs: Vec<(usize, usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..workloads.len()).map(move |w| (c, w)))
        .enumerate()
        .map(|(i, (c, w))| (i, c, w))
        .collect();
    let results: Vec<(RunRow, Option<MetricMatrix>)> = jobs
        .par_iter()
        .map(|&(window, c, w)| {
            let spec = workloads[w].with_seed(derive_seed(workloads[w].seed(), window as u64));
            let trace = spec.generate_for(window_s)?;
            let (mut m, stats) =
                run_window(space, truth, params, &configs[c], &trace, window_s, derive_seed(seed, window as u64))?;
            let (driver, workers, _) = epoch_tables(&m, &select)?;
            let row = RunRow {
                window,
                config_index: c,
                workload: format!("{}{}", spec.kind(), w),
                values: configs[c].values.clone(),
                p99_ms: stats.p99_ms(),
                mean_ms: stats.mean * 1000.0,
                throughput: stats.throughput,
                saturated: stats.saturated,
                driver: driver.rows.iter().map(|r| r[0]).collect(),
                workers: match workers {
                    Some(t) => t.rows.iter().map(|r| table::mean(r)).collect(),
                    None => vec![f64::NAN; m.metric_count()],
                },
            };
            let keep = (window < selection_windows).then(|| {
                m.offset_times(window as f64 * window_s);
                m
            });
            Ok((row, keep))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(results.len());
    let mut metrics = MetricMatrix::new(truth.metric_names(), params.nodes, params.sample_period_s);
    for (row, m) in results {
        rows.push(row);
        if let Some(m) = m {
            metrics.extend(&m)?;
        }
    }
    Ok(RunsDataset {
        lever_names: space.levers.iter().map(|l| l.name.clone()).collect(),
        metric_names: truth.metric_names(),
        rows,
        metrics,
    })
}
