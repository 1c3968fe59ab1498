//! Metric reduction: variance filter, gap filling, standardization, factor
//! analysis and k-means over factor loadings, run separately for the driver
//! node and for the worker nodes.

pub mod cluster;
pub mod factor;
pub mod interpolate;
pub mod table;

use serde::{Deserialize, Serialize};

pub use cluster::{cluster_metrics, kmeans, MetricClusters};
pub use factor::{factor_analysis, FactorLoadings};
pub use interpolate::{interpolate_missing, CubicSpline, Filled};
pub use table::{standardize, variance_filter, MetricTable, NodeRole};

use crate::error::{Error, Result};
use crate::simengine::MetricMatrix;

/// Node 0 is the driver; every other node is a worker.
pub const DRIVER_NODE: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectParams {
    pub variance_threshold: f64,
    /// Consecutive samples forming one configuration epoch.
    pub window_samples: usize,
    /// Samples averaged from the middle of each epoch.
    pub average_samples: usize,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for SelectParams {
    fn default() -> Self {
        SelectParams {
            variance_threshold: 0.002,
            window_samples: 15,
            average_samples: 4,
            k_max: 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Representative {
    pub role: NodeRole,
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSelection {
    pub role: NodeRole,
    pub dropped: Vec<String>,
    pub loadings: Option<FactorLoadings>,
    pub clusters: MetricClusters,
}

impl RoleSelection {
    fn empty(role: NodeRole) -> Self {
        RoleSelection {
            role,
            dropped: Vec::new(),
            loadings: None,
            clusters: MetricClusters::empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSelection {
    pub workers: RoleSelection,
    pub driver: RoleSelection,
    /// Series filled by linear or constant fallback instead of a spline.
    pub fallback_series: usize,
    pub input_metrics: usize,
}

impl MetricSelection {
    /// Union of both batches' representatives, workers first.
    pub fn representatives(&self) -> Vec<Representative> {
        let mut out = Vec::new();
        for sel in [&self.workers, &self.driver] {
            for metric in &sel.clusters.representatives {
                let rep = Representative {
                    role: sel.role,
                    metric: metric.clone(),
                };
                if !out.contains(&rep) {
                    out.push(rep);
                }
            }
        }
        out
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.representatives().len() as f64 / self.input_metrics as f64
    }
}

/// Per-epoch averages of the middle samples of each window; one table column
/// per epoch (driver) or per (epoch, worker) pair.
pub fn epoch_tables(raw: &MetricMatrix, params: &SelectParams) -> Result<(MetricTable, Option<MetricTable>, usize)> {
    if raw.node_count == 0 || raw.sample_count() == 0 {
        return Err(Error::validation("metrics", "no samples"));
    }
    if params.window_samples == 0 || params.average_samples == 0 {
        return Err(Error::validation("window_samples", "must be positive"));
    }
    let samples = raw.sample_count();
    let epochs: Vec<(usize, usize)> = (0..samples)
        .step_by(params.window_samples)
        .map(|start| {
            let len = params.window_samples.min(samples - start);
            let take = params.average_samples.min(len);
            (start + (len - take) / 2, take)
        })
        .collect();
    let mut fallback = 0;
    let mut averaged = vec![vec![Vec::with_capacity(epochs.len()); raw.node_count]; raw.metric_count()];
    for (m, per_node) in averaged.iter_mut().enumerate() {
        for (n, out) in per_node.iter_mut().enumerate() {
            let filled = interpolate_missing(&raw.series(m, n));
            fallback += usize::from(filled.fallback);
            for &(start, take) in &epochs {
                out.push(filled.values[start..start + take].iter().sum::<f64>() / take as f64);
            }
        }
    }
    let names = raw.metric_names.clone();
    let driver_rows = averaged.iter().map(|nodes| nodes[DRIVER_NODE].clone()).collect();
    let driver = MetricTable::new(names.clone(), driver_rows, NodeRole::Driver)?;
    let workers = (raw.node_count > 1)
        .then(|| {
            let rows = averaged
                .iter()
                .map(|nodes| {
                    (0..epochs.len())
                        .flat_map(|e| nodes[1..].iter().map(move |series| series[e]))
                        .collect()
                })
                .collect();
            MetricTable::new(names, rows, NodeRole::Workers)
        })
        .transpose()?;
    Ok((driver, workers, fallback))
}

/// Filter, standardize, factor-analyse and cluster one batch.
pub fn reduce_table(table: &MetricTable, params: &SelectParams) -> Result<RoleSelection> {
    let (kept, dropped) = variance_filter(table, params.variance_threshold)?;
    let standardized = standardize(&kept)?;
    if standardized.metric_count() == 1 {
        let name = standardized.names[0].clone();
        return Ok(RoleSelection {
            role: table.source,
            dropped,
            loadings: None,
            clusters: MetricClusters {
                k: 1,
                metric_names: vec![name.clone()],
                assignments: vec![0],
                centroids: vec![vec![0.0]],
                representatives: vec![name],
                representative_indices: vec![0],
                cost: 0.0,
                costs: vec![(1, 0.0)],
            },
        });
    }
    let loadings = factor_analysis(&standardized, params.seed)?;
    let k_top = params.k_max.min(standardized.metric_count() - 1).max(1);
    let candidates: Vec<usize> = (1..=k_top).collect();
    let clusters = cluster_metrics(&loadings, &candidates, params.seed)?;
    Ok(RoleSelection {
        role: table.source,
        dropped,
        loadings: Some(loadings),
        clusters,
    })
}

/// Full reduction pipeline over a metric matrix covering one or more
/// configuration epochs. Single-node input is treated as the driver alone.
pub fn select_metrics(raw: &MetricMatrix, params: &SelectParams) -> Result<MetricSelection> {
    raw.validate()?;
    let (driver_table, worker_table, fallback_series) = epoch_tables(raw, params)?;
    let (driver, workers) = rayon::join(
        || reduce_table(&driver_table, params),
        || {
            worker_table
                .as_ref()
                .map_or(Ok(RoleSelection::empty(NodeRole::Workers)), |t| reduce_table(t, params))
        },
    );
    Ok(MetricSelection {
        workers: workers?,
        driver: driver?,
        fallback_series,
        input_metrics: raw.metric_count(),
    })
}

/// Per-epoch value of each representative: the driver's reading, or the
/// mean over workers.
pub fn representative_series(raw: &MetricMatrix, reps: &[Representative], params: &SelectParams) -> Result<Vec<Vec<f64>>> {
    let (driver, workers, _) = epoch_tables(raw, params)?;
    reps.iter()
        .map(|rep| {
            let m = raw
                .metric_index(&rep.metric)
                .ok_or_else(|| Error::validation("metric", format!("unknown metric {}", rep.metric)))?;
            match (rep.role, &workers) {
                (NodeRole::Driver, _) => Ok(driver.rows[m].clone()),
                (NodeRole::Workers, Some(w)) => Ok(w.rows[m].chunks(raw.node_count - 1).map(table::mean).collect()),
                (NodeRole::Workers, None) => Err(Error::validation("metric", "no worker nodes in input")),
            }
        })
        .collect()
}
