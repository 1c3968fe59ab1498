use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Driver,
    Workers,
}

/// Metrics as rows, samples (configuration epochs) as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub standardized: bool,
    pub source: NodeRole,
}

impl MetricTable {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, source: NodeRole) -> Result<Self> {
        if names.len() != rows.len() {
            return Err(Error::validation("metric table", "one name per row required"));
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(Error::validation("metric table", "ragged rows"));
            }
        }
        Ok(MetricTable {
            names,
            rows,
            standardized: false,
            source,
        })
    }

    pub fn metric_count(&self) -> usize {
        self.rows.len()
    }

    pub fn sample_count(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.sample_count() == 0
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Drops rows whose raw variance is at or below `threshold`. Returns the kept
/// table and the names of the dropped rows.
pub fn variance_filter(table: &MetricTable, threshold: f64) -> Result<(MetricTable, Vec<String>)> {
    if table.is_empty() {
        return Err(Error::validation("table", "must be non-empty"));
    }
    let mut kept = table.clone();
    kept.names.clear();
    kept.rows.clear();
    let mut dropped = Vec::new();
    for (name, row) in table.names.iter().zip(&table.rows) {
        let var = variance(row);
        if var > threshold {
            kept.names.push(name.clone());
            kept.rows.push(row.clone());
        } else {
            dropped.push(name.clone());
        }
    }
    if kept.rows.is_empty() {
        return Err(Error::EmptyResult(format!(
            "variance filter at {threshold} dropped all {} metrics",
            table.rows.len()
        )));
    }
    Ok((kept, dropped))
}

/// Per-row zero mean and unit population standard deviation.
pub fn standardize(table: &MetricTable) -> Result<MetricTable> {
    let mut out = table.clone();
    for (name, row) in out.names.iter().zip(out.rows.iter_mut()) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(name, "missing or non-finite value; interpolate first"));
        }
        let m = mean(row);
        let sd = variance(row).sqrt();
        if !(sd > 0.0) || sd < 1e-12 * m.abs().max(1.0) {
            return Err(Error::validation(name, "zero variance, cannot standardize"));
        }
        for v in row.iter_mut() {
            *v = (*v - m) / sd;
        }
    }
    out.standardized = true;
    Ok(out)
}
