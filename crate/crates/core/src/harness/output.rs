//! Plot-ready CSV files. Every schema is a serde row type so files can be
//! read back and re-validated.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ExplorationTable, TrainState, TrainingLog};
use crate::error::{Error, Result};
use crate::leverrank::LeverRanking;
use crate::metrics::RoleSelection;
use crate::simengine::{run_window, EngineParams, GroundTruth, LeverSpace, BATCH_INTERVAL};
use crate::workload::WorkloadSpec;

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV back into its row type; fails on the first row that does
/// not match the schema or when the header differs from `header`.
pub fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if found != header {
        return Err(Error::validation(
            path.display().to_string(),
            format!("header {found:?} differs from {header:?}"),
        ));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub metric: String,
    pub f1: f64,
    pub f2: f64,
    pub cluster: usize,
}

pub const SCATTER_HEADER: [&str; 4] = ["metric", "f1", "f2", "cluster"];

/// First two loadings of every clustered metric.
pub fn scatter_rows(selection: &RoleSelection) -> Vec<ScatterRow> {
    let Some(loadings) = &selection.loadings else {
        return Vec::new();
    };
    let clusters = &selection.clusters;
    loadings
        .metric_names
        .iter()
        .zip(&loadings.loadings)
        .map(|(name, l)| ScatterRow {
            metric: name.clone(),
            f1: l.first().copied().unwrap_or(0.0),
            f2: l.get(1).copied().unwrap_or(0.0),
            cluster: clusters
                .metric_names
                .iter()
                .position(|m| m == name)
                .map_or(0, |i| clusters.assignments[i]),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub sim_minutes: f64,
    pub p99_ms: f64,
    pub reward: f64,
}

pub const CURVE_HEADER: [&str; 4] = ["episode", "sim_minutes", "p99_ms", "reward"];

pub fn training_curve(log: &TrainingLog) -> Vec<CurveRow> {
    log.episodes
        .iter()
        .map(|e| CurveRow {
            episode: e.episode,
            sim_minutes: e.sim_minutes,
            p99_ms: e.final_p99_ms,
            reward: e.reward,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub phase: String,
    pub seconds: f64,
    pub share: f64,
}

pub const BREAKDOWN_HEADER: [&str; 3] = ["phase", "seconds", "share"];

pub fn breakdown(log: &TrainingLog) -> Vec<BreakdownRow> {
    let b = &log.breakdown;
    let seconds = [b.generation, b.loading, b.stabilisation, b.update];
    log.phase_shares()
        .iter()
        .zip(seconds)
        .map(|(&(phase, share), seconds)| BreakdownRow {
            phase: phase.into(),
            seconds,
            share,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub f: f64,
    pub rate_per_hour: u32,
    pub mean_minutes: f64,
    pub std_minutes: f64,
    pub converged_share: f64,
    pub baseline_multiple: f64,
}

pub const TABLE_HEADER: [&str; 6] = [
    "f",
    "rate_per_hour",
    "mean_minutes",
    "std_minutes",
    "converged_share",
    "baseline_multiple",
];

pub fn exploration_rows(table: &ExplorationTable) -> Vec<TableRow> {
    table
        .rows
        .iter()
        .map(|r| TableRow {
            f: r.f,
            rate_per_hour: r.rate,
            mean_minutes: r.mean_minutes,
            std_minutes: r.std_minutes,
            converged_share: r.converged_share,
            baseline_multiple: r.baseline_multiple,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCurveRow {
    pub workload: String,
    pub batch_interval_s: f64,
    pub p99_ms: f64,
    pub saturated: bool,
}

pub const BATCH_CURVE_HEADER: [&str; 4] = ["workload", "batch_interval_s", "p99_ms", "saturated"];

/// p99 of the default configuration with the batch interval swept over
/// `intervals`, for each named workload.
pub fn batch_curve(
    space: &LeverSpace,
    truth: &GroundTruth,
    params: &EngineParams,
    workloads: &[(String, WorkloadSpec)],
    intervals: &[f64],
    window_s: f64,
    seed: u64,
) -> Result<Vec<BatchCurveRow>> {
    let mut rows = Vec::new();
    for (name, spec) in workloads {
        let trace = spec.generate_for(window_s)?;
        for &b in intervals {
            let mut config = space.default_config();
            config.set(space, BATCH_INTERVAL, b)?;
            let (_, stats) = run_window(space, truth, params, &config, &trace, window_s, seed)?;
            rows.push(BatchCurveRow {
                workload: name.clone(),
                batch_interval_s: b,
                p99_ms: stats.p99_ms(),
                saturated: stats.saturated,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: usize,
    pub lever: String,
    pub score: f64,
    /// Targets on whose path the lever entered at all.
    pub entered: usize,
}

pub const RANKING_HEADER: [&str; 4] = ["rank", "lever", "score", "entered"];

pub fn ranking_rows(ranking: &LeverRanking) -> Vec<RankingRow> {
    ranking
        .levers
        .iter()
        .enumerate()
        .map(|(rank, l)| RankingRow {
            rank,
            lever: l.lever.clone(),
            score: l.score,
            entered: l.positions.iter().filter(|p| p.is_some()).count(),
        })
        .collect()
}

/// Training outputs of a run: per-episode log, step trajectory,
/// deployment rows, learning curve and phase breakdown. Returns the paths written.
pub fn write_training(dir: &Path, state: &TrainState) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let log = &state.log;
    let files = [
        "episodes.csv",
        "trajectory.csv",
        "deployment.csv",
        "training_curve.csv",
        "breakdown.csv",
    ]
    .map(|f| dir.join(f));
    write_rows(&files[0], &log.episodes)?;
    write_rows(&files[1], &log.trajectory)?;
    write_rows(&files[2], &log.deployment)?;
    write_rows(&files[3], &training_curve(log))?;
    write_rows(&files[4], &breakdown(log))?;
    Ok(files.to_vec())
}
