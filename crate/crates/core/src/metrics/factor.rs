use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::table::MetricTable;
use crate::error::{Error, Result};

pub const PARALLEL_REPLICATES: usize = 200;
pub const PARALLEL_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorLoadings {
    pub metric_names: Vec<String>,
    /// metrics x retained factors; column j is eigenvector j scaled by sqrt(eigenvalue j).
    pub loadings: Vec<Vec<f64>>,
    /// Eigenvalues of the retained factors, descending.
    pub eigenvalues: Vec<f64>,
    pub retained_count: usize,
    /// Factors that beat the random-data threshold; may be zero, in which
    /// case the first factor is kept anyway.
    pub significant_count: usize,
    /// Every eigenvalue of the correlation matrix, descending.
    pub spectrum: Vec<f64>,
    /// Per-position 95th percentile of random-data eigenvalues.
    pub thresholds: Vec<f64>,
}

impl FactorLoadings {
    /// Share of the retained-factor variance carried by the first `n` factors.
    pub fn leading_share(&self, n: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().take(n).sum::<f64>() / total
    }
}

fn correlation(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    let n = rows[0].len();
    let z = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    let c = &z * z.transpose();
    c / n as f64
}

/// Eigenvalues and eigenvectors sorted by descending eigenvalue; each
/// eigenvector's largest-magnitude entry is made positive.
fn sorted_eigen(c: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (j, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).clone_owned();
        let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(j, &col);
    }
    (values, vectors)
}

fn random_spectrum(m: usize, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for row in &mut rows {
        let mean = row.iter().sum::<f64>() / n as f64;
        let sd = (row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) / sd;
        }
    }
    let mut values: Vec<f64> = SymmetricEigen::new(correlation(&rows)).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Per-position quantile of eigenvalues from same-shape Gaussian data.
pub fn parallel_thresholds(m: usize, n: usize, replicates: usize, quantile: f64, seed: u64) -> Vec<f64> {
    let spectra: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| random_spectrum(m, n, seed.wrapping_add(r as u64)))
        .collect();
    (0..m)
        .map(|pos| {
            let mut column: Vec<f64> = spectra.iter().map(|s| s[pos]).collect();
            column.sort_by(|a, b| a.total_cmp(b));
            let idx = ((quantile * replicates as f64).ceil() as usize).clamp(1, replicates) - 1;
            column[idx]
        })
        .collect()
}

/// Principal-axis factor analysis of a standardized table with retention by
/// parallel analysis.
pub fn factor_analysis(table: &MetricTable, seed: u64) -> Result<FactorLoadings> {
    let m = table.metric_count();
    let n = table.sample_count();
    if !table.standardized {
        return Err(Error::validation("table", "must be standardized"));
    }
    if m < 2 {
        return Err(Error::validation("table", format!("need at least 2 metrics, got {m}")));
    }
    if 3 * n < m {
        return Err(Error::validation(
            "table",
            format!("{n} samples is too few for {m} metrics"),
        ));
    }
    let (spectrum, vectors) = sorted_eigen(correlation(&table.rows));
    let rank = spectrum.iter().filter(|&&v| v > 1e-9 * m as f64).count();
    if rank < 2 {
        return Err(Error::Numerical(format!("correlation matrix has rank {rank}")));
    }
    let thresholds = parallel_thresholds(m, n, PARALLEL_REPLICATES, PARALLEL_QUANTILE, seed);
    let significant_count = spectrum.iter().zip(&thresholds).take_while(|(v, t)| v > t).count();
    let retained_count = significant_count.max(1);
    let eigenvalues: Vec<f64> = spectrum[..retained_count].to_vec();
    let loadings = (0..m)
        .map(|i| {
            (0..retained_count)
                .map(|j| vectors[(i, j)] * eigenvalues[j].max(0.0).sqrt())
                .collect()
        })
        .collect();
    Ok(FactorLoadings {
        metric_names: table.names.clone(),
        loadings,
        eigenvalues,
        retained_count,
        significant_count,
        spectrum,
        thresholds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::table::{standardize, NodeRole};

    /// `groups[g]` metrics driven by factor g, plus noise.
    pub(crate) fn planted_table(groups: &[usize], samples: usize, noise: f64, seed: u64) -> MetricTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<Vec<f64>> = groups
            .iter()
            .map(|_| (0..samples).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (g, &size) in groups.iter().enumerate() {
            for j in 0..size {
                names.push(format!("g{g}_{j}"));
                let row = factors[g]
                    .iter()
                    .map(|f| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        f + noise * e
                    })
                    .collect();
                rows.push(row);
            }
        }
        standardize(&MetricTable::new(names, rows, NodeRole::Workers).unwrap()).unwrap()
    }

    #[test]
    fn two_factor_data_retains_two() {
        let table = planted_table(&[6, 6], 120, 0.05, 3);
        let fa = factor_analysis(&table, 1).unwrap();
        assert_eq!(fa.retained_count, 2);
        assert_eq!(fa.loadings.len(), 12);
        assert!(fa.eigenvalues[0] >= fa.eigenvalues[1]);
    }

    #[test]
    fn loadings_reconstruct_correlation_diagonal() {
        let table = planted_table(&[5, 4], 200, 0.05, 5);
        let fa = factor_analysis(&table, 1).unwrap();
        for row in &fa.loadings {
            let communality: f64 = row.iter().map(|l| l * l).sum();
            assert!(communality > 0.95 && communality < 1.0 + 1e-9, "{communality}");
        }
    }

    #[test]
    fn rejects_unstandardized_and_degenerate() {
        let mut table = planted_table(&[3], 30, 0.0, 1);
        assert!(matches!(factor_analysis(&table, 1), Err(Error::Numerical(_))));
        table.standardized = false;
        assert!(factor_analysis(&table, 1).is_err());
    }
}
