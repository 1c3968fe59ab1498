use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::factor::FactorLoadings;
use crate::error::{Error, Result};

pub const RESTARTS: usize = 20;
pub const ELBOW_GUARD: f64 = 0.05;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricClusters {
    pub k: usize,
    pub metric_names: Vec<String>,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// One metric per cluster, the member closest to its centroid.
    pub representatives: Vec<String>,
    pub representative_indices: Vec<usize>,
    /// Within-cluster sum of squared distances of the chosen solution.
    pub cost: f64,
    /// Best cost found for every candidate k.
    pub costs: Vec<(usize, f64)>,
}

impl MetricClusters {
    pub fn empty() -> Self {
        MetricClusters {
            k: 0,
            metric_names: Vec::new(),
            assignments: Vec::new(),
            centroids: Vec::new(),
            representatives: Vec::new(),
            representative_indices: Vec::new(),
            cost: 0.0,
            costs: Vec::new(),
        }
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub cost: f64,
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &w) in d.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(c, q)| (c, dist2(p, q)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("at least one centroid")
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeans {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        // an empty cluster takes the point worst served by its centroid
        for c in 0..k {
            if assignments.iter().all(|&a| a != c) {
                let mut counts = vec![0usize; k];
                for &a in &assignments {
                    counts[a] += 1;
                }
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&i, &j| {
                        dist2(&points[i], &centroids[assignments[i]])
                            .total_cmp(&dist2(&points[j], &centroids[assignments[j]]))
                            .then(j.cmp(&i))
                    });
                if let Some(i) = far {
                    assignments[i] = c;
                    changed = true;
                }
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; dim];
            let mut count = 0;
            for (p, _) in points.iter().zip(&assignments).filter(|(_, &a)| a == c) {
                for (s, x) in sum.iter_mut().zip(p) {
                    *s += x;
                }
                count += 1;
            }
            if count > 0 {
                *centroid = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    hartigan(points, &mut assignments, &mut centroids);
    let cost = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    KMeans {
        assignments,
        centroids,
        cost,
    }
}

/// Single-point moves that lower the total cost, applied until none is left.
/// Lloyd fixed points are often not stable under these moves.
fn hartigan(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for _ in 0..MAX_LLOYD_ITERS {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let from = assignments[i];
            let na = counts[from] as f64;
            if counts[from] <= 1 {
                continue;
            }
            let removal = na / (na - 1.0) * dist2(p, &centroids[from]);
            let best = (0..k)
                .filter(|&c| c != from)
                .map(|c| {
                    let nb = counts[c] as f64;
                    (c, nb / (nb + 1.0) * dist2(p, &centroids[c]))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some((to, addition)) = best {
                if addition < removal - 1e-12 {
                    let nb = counts[to] as f64;
                    for (c, x) in centroids[from].iter_mut().zip(p) {
                        *c = (*c * na - x) / (na - 1.0);
                    }
                    for (c, x) in centroids[to].iter_mut().zip(p) {
                        *c = (*c * nb + x) / (nb + 1.0);
                    }
                    counts[from] -= 1;
                    counts[to] += 1;
                    assignments[i] = to;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Best of `restarts` k-means++ seeded Lloyd runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> KMeans {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = lloyd(points, seed_plus_plus(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

/// Picks the smallest candidate k after which adding a cluster lowers the
/// cost by less than 5% of the cost at the smallest candidate.
pub fn choose_k(costs: &[(usize, f64)]) -> usize {
    let base = costs[0].1;
    if base <= 0.0 {
        return costs[0].0;
    }
    for w in costs.windows(2) {
        if w[0].1 - w[1].1 < ELBOW_GUARD * base {
            return w[0].0;
        }
    }
    costs[costs.len() - 1].0
}

/// Clusters metrics by their rows of the loading matrix.
pub fn cluster_metrics(loadings: &FactorLoadings, k_candidates: &[usize], seed: u64) -> Result<MetricClusters> {
    let points = &loadings.loadings;
    let m = points.len();
    if m < 2 {
        return Err(Error::validation("loadings", format!("need at least 2 metrics, got {m}")));
    }
    let mut candidates: Vec<usize> = k_candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::validation("k_candidates", "must not be empty"));
    }
    if candidates[0] == 0 || candidates[candidates.len() - 1] > m - 1 {
        // a lone k = 1 is allowed whatever the size
        if !(candidates == [1]) {
            return Err(Error::validation(
                "k_candidates",
                format!("must lie in 1..={}", m - 1),
            ));
        }
    }
    let runs: Vec<(usize, KMeans)> = candidates
        .iter()
        .map(|&k| (k, kmeans(points, k, RESTARTS, seed.wrapping_add(k as u64))))
        .collect();
    let costs: Vec<(usize, f64)> = runs.iter().map(|(k, r)| (*k, r.cost)).collect();
    let k = choose_k(&costs);
    let chosen = runs.into_iter().find(|(kk, _)| *kk == k).expect("chosen k evaluated").1;

    let mut representative_indices = Vec::with_capacity(k);
    for c in 0..k {
        let rep = (0..m)
            .filter(|&i| chosen.assignments[i] == c)
            .min_by(|&i, &j| {
                dist2(&points[i], &chosen.centroids[c])
                    .total_cmp(&dist2(&points[j], &chosen.centroids[c]))
                    .then(i.cmp(&j))
            });
        if let Some(i) = rep {
            representative_indices.push(i);
        }
    }
    Ok(MetricClusters {
        k,
        metric_names: loadings.metric_names.clone(),
        representatives: representative_indices
            .iter()
            .map(|&i| loadings.metric_names[i].clone())
            .collect(),
        representative_indices,
        assignments: chosen.assignments,
        centroids: chosen.centroids,
        cost: chosen.cost,
        costs,
    })
}
