//! Lever ranking by Lasso path entry order. Levers (with squared and
//! pairwise-product terms) are the features, representative metrics the
//! targets; per-target orders are combined with a Borda count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simengine::{Configuration, LeverSpace};

pub const GRID_STEPS: usize = 100;
/// Decades between the top and the floor of the penalty grid.
pub const GRID_DECADES: f64 = 3.0;
pub const MAX_SWEEPS: usize = 10_000;
pub const TOLERANCE: f64 = 1e-7;
/// Optimality-condition tolerance, relative to the largest penalty.
const KKT_TOLERANCE: f64 = 1e-6;
/// Columns eligible for pairwise interaction terms.
pub const INTERACTION_COLUMNS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    /// Row-major, `rows x columns.len()`, standardized.
    pub data: Vec<f64>,
    pub rows: usize,
    pub columns: Vec<String>,
    /// Index into `levers` for each column.
    pub source: Vec<usize>,
    pub levers: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns removed for having no variance.
    pub dropped: Vec<String>,
}

impl DesignMatrix {
    /// Standardizes raw columns, dropping those without variance.
    pub fn from_columns(
        levers: Vec<String>,
        columns: Vec<(String, usize, Vec<f64>)>,
    ) -> Result<Self> {
        let rows = columns.first().map_or(0, |c| c.2.len());
        if columns.iter().any(|c| c.2.len() != rows) {
            return Err(Error::validation("columns", "ragged column lengths"));
        }
        if columns.iter().any(|c| c.1 >= levers.len()) {
            return Err(Error::validation("columns", "source lever out of range"));
        }
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for (name, src, values) in columns {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 1e-12 * mean.abs().max(1.0)) {
                dropped.push(name);
                continue;
            }
            kept.push((name, src, mean, std, values));
        }
        if kept.is_empty() {
            return Err(Error::validation("configs", "no column has any variance"));
        }
        let p = kept.len();
        let mut data = vec![0.0; rows * p];
        for (j, (_, _, mean, std, values)) in kept.iter().enumerate() {
            for (r, v) in values.iter().enumerate() {
                data[r * p + j] = (v - mean) / std;
            }
        }
        Ok(DesignMatrix {
            data,
            rows,
            columns: kept.iter().map(|k| k.0.clone()).collect(),
            source: kept.iter().map(|k| k.1).collect(),
            levers,
            mean: kept.iter().map(|k| k.2).collect(),
            std: kept.iter().map(|k| k.3).collect(),
            dropped,
        })
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(self.width()).copied()
    }

    /// `X^T X / n`, dense and symmetric.
    pub fn gram(&self) -> Vec<f64> {
        let p = self.width();
        let n = self.rows as f64;
        let mut g = vec![0.0; p * p];
        let upper: Vec<Vec<f64>> = (0..p)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; p - i];
                for r in 0..self.rows {
                    let x = &self.data[r * p..(r + 1) * p];
                    let xi = x[i];
                    if xi == 0.0 {
                        continue;
                    }
                    for (slot, xj) in row.iter_mut().zip(&x[i..]) {
                        *slot += xi * xj;
                    }
                }
                row
            })
            .collect();
        for (i, row) in upper.into_iter().enumerate() {
            for (k, v) in row.into_iter().enumerate() {
                let j = i + k;
                g[i * p + j] = v / n;
                g[j * p + i] = v / n;
            }
        }
        g
    }

    /// `X^T y / n`.
    pub fn correlate(&self, y: &[f64]) -> Vec<f64> {
        let p = self.width();
        let mut c = vec![0.0; p];
        for (r, &yr) in y.iter().enumerate() {
            for (cj, xj) in c.iter_mut().zip(&self.data[r * p..(r + 1) * p]) {
                *cj += xj * yr;
            }
        }
        let n = self.rows as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }
}

/// Categoricals are numbered by declaration order (their stored value).
/// Adds centered squares of continuous levers and pairwise products among
/// the raw columns of the `INTERACTION_COLUMNS` levers with the largest
/// range-normalized variance.
pub fn encode(space: &LeverSpace, configs: &[Configuration]) -> Result<DesignMatrix> {
    if configs.len() < 2 {
        return Err(Error::validation("configs", "need at least 2 configurations"));
    }
    if configs.iter().all(|c| c.values == configs[0].values) {
        return Err(Error::validation("configs", "all configurations are identical"));
    }
    if let Some(c) = configs.iter().find(|c| c.values.len() != space.len()) {
        return Err(Error::validation("configs", format!("{} values for {} levers", c.values.len(), space.len())));
    }
    let raw: Vec<Vec<f64>> = (0..space.len())
        .map(|i| configs.iter().map(|c| c.values[i]).collect())
        .collect();
    let mut columns: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for (i, lever) in space.levers.iter().enumerate() {
        columns.push((lever.name.clone(), i, raw[i].clone()));
    }
    for (i, lever) in space.levers.iter().enumerate() {
        if lever.is_continuous() {
            let m = mean(&raw[i]);
            columns.push((format!("{}^2", lever.name), i, raw[i].iter().map(|v| (v - m) * (v - m)).collect()));
        }
    }
    let mut spread: Vec<(usize, f64)> = space
        .levers
        .iter()
        .enumerate()
        .map(|(i, lever)| {
            let u: Vec<f64> = raw[i].iter().map(|&v| lever.normalize(v)).collect();
            let m = mean(&u);
            (i, u.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / u.len() as f64)
        })
        .filter(|&(_, var)| var > 0.0)
        .collect();
    spread.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut top: Vec<usize> = spread.iter().take(INTERACTION_COLUMNS).map(|s| s.0).collect();
    top.sort_unstable();
    for (a, &i) in top.iter().enumerate() {
        for &j in &top[a + 1..] {
            let (mi, mj) = (mean(&raw[i]), mean(&raw[j]));
            let values = raw[i].iter().zip(&raw[j]).map(|(x, y)| (x - mi) * (y - mj)).collect();
            // attributed to the first lever of the pair
            columns.push((format!("{}*{}", space.levers[i].name, space.levers[j].name), i, values));
        }
    }
    let names = space.levers.iter().map(|l| l.name.clone()).collect();
    DesignMatrix::from_columns(names, columns)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub target: String,
    /// Levers in order of first entry.
    pub ordered_levers: Vec<String>,
    /// Grid step at which each ordered lever entered.
    pub entry_steps: Vec<usize>,
    pub entry_penalties: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Non-zero coefficients at each grid step.
    pub active_counts: Vec<usize>,
    /// Coefficients at the grid floor.
    pub coefficients: Vec<f64>,
}

/// Penalty grid from `lambda_max` down three decades, log-spaced.
pub fn lambda_grid(lambda_max: f64) -> Vec<f64> {
    (0..GRID_STEPS)
        .map(|k| lambda_max * 10f64.powf(-GRID_DECADES * k as f64 / (GRID_STEPS - 1) as f64))
        .collect()
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Lasso path for one target, solved by warm-started coordinate descent
/// on the Gram matrix. `gram` must be `x.gram()`; it is shared across
/// targets. The target is standardized here.
pub fn lasso_path_with_gram(x: &DesignMatrix, gram: &[f64], target: &str, y: &[f64]) -> Result<LassoPath> {
    if x.rows < 10 {
        return Err(Error::validation("rows", format!("need at least 10 rows, got {}", x.rows)));
    }
    if y.len() != x.rows {
        return Err(Error::validation("target", format!("{} values for {} rows", y.len(), x.rows)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("target", "non-finite value"));
    }
    let p = x.width();
    let m = mean(y);
    let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64).sqrt();
    let empty = |lambdas: Vec<f64>| LassoPath {
        target: target.into(),
        ordered_levers: Vec::new(),
        entry_steps: Vec::new(),
        entry_penalties: Vec::new(),
        active_counts: vec![0; lambdas.len()],
        lambdas,
        coefficients: vec![0.0; p],
    };
    if !(sd > 0.0) {
        return Ok(empty(vec![0.0; GRID_STEPS]));
    }
    let ys: Vec<f64> = y.iter().map(|v| (v - m) / sd).collect();
    let c = x.correlate(&ys);
    let lambda_max = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(lambda_max > 1e-12) {
        return Ok(empty(vec![0.0; GRID_STEPS]));
    }
    let lambdas = lambda_grid(lambda_max);

    let mut beta = vec![0.0; p];
    // gb = G beta
    let mut gb = vec![0.0; p];
    let mut entered: Vec<Option<(usize, f64)>> = vec![None; x.levers.len()];
    let mut order: Vec<(usize, usize, f64)> = Vec::new();
    let mut active_counts = Vec::with_capacity(GRID_STEPS);
    for (step, &lambda) in lambdas.iter().enumerate() {
        let mut sweeps = 0;
        loop {
            let mut max_delta = 0.0f64;
            for j in 0..p {
                let gjj = gram[j * p + j];
                let z = c[j] - gb[j] + gjj * beta[j];
                let new = soft_threshold(z, lambda) / gjj;
                let delta = new - beta[j];
                if delta != 0.0 {
                    beta[j] = new;
                    let col = &gram[j * p..(j + 1) * p];
                    for (g, gj) in gb.iter_mut().zip(col) {
                        *g += gj * delta;
                    }
                    max_delta = max_delta.max(delta.abs());
                }
            }
            sweeps += 1;
            if max_delta < TOLERANCE || kkt_violation(&c, &gb, &beta, lambda) < KKT_TOLERANCE * lambda_max {
                break;
            }
            if sweeps >= MAX_SWEEPS {
                return Err(Error::NonConvergence {
                    step,
                    lambda,
                    sweeps,
                    max_delta,
                });
            }
        }
        active_counts.push(beta.iter().filter(|b| **b != 0.0).count());
        // latch entries; strength is the largest |coefficient| of the lever's columns
        let mut fresh: Vec<(usize, f64)> = Vec::new();
        for (j, &b) in beta.iter().enumerate() {
            if b == 0.0 || entered[x.source[j]].is_some() {
                continue;
            }
            let lever = x.source[j];
            match fresh.iter_mut().find(|f| f.0 == lever) {
                Some(f) => f.1 = f.1.max(b.abs()),
                None => fresh.push((lever, b.abs())),
            }
        }
        fresh.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (lever, strength) in fresh {
            entered[lever] = Some((step, strength));
            order.push((lever, step, lambda));
        }
    }
    Ok(LassoPath {
        target: target.into(),
        ordered_levers: order.iter().map(|o| x.levers[o.0].clone()).collect(),
        entry_steps: order.iter().map(|o| o.1).collect(),
        entry_penalties: order.iter().map(|o| o.2).collect(),
        lambdas,
        active_counts,
        coefficients: beta,
    })
}

/// Largest violation of the lasso optimality conditions at `beta`.
fn kkt_violation(c: &[f64], gb: &[f64], beta: &[f64], lambda: f64) -> f64 {
    c.iter()
        .zip(gb)
        .zip(beta)
        .map(|((cj, gj), bj)| {
            let r = cj - gj;
            if *bj == 0.0 {
                (r.abs() - lambda).max(0.0)
            } else {
                (r - lambda * bj.signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn lasso_path(x: &DesignMatrix, target: &str, y: &[f64]) -> Result<LassoPath> {
    lasso_path_with_gram(x, &x.gram(), target, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLever {
    pub lever: String,
    pub score: f64,
    /// Position (0-based) in each target's entry order, if it entered.
    pub positions: Vec<Option<usize>>,
    /// Grid step of entry for each target.
    pub entry_steps: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverRanking {
    pub targets: Vec<String>,
    pub levers: Vec<RankedLever>,
}

impl LeverRanking {
    pub fn names(&self) -> Vec<String> {
        self.levers.iter().map(|l| l.lever.clone()).collect()
    }

    pub fn top(&self, n: usize) -> Vec<String> {
        self.levers.iter().take(n).map(|l| l.lever.clone()).collect()
    }
}

/// Borda-style count over the targets with ranks on the penalty scale: a
/// lever entering at penalty `λ` on a path starting at `λ_max` has rank
/// `1 - λ/λ_max` and scores `1 - rank`. Late entries, where most of the
/// noise lives, thus score close to nothing. Levers that never entered
/// follow in declaration order; ties also fall back to declaration order.
pub fn rank_levers(paths: &[LassoPath], declared: &[String]) -> LeverRanking {
    let mut levers: Vec<(usize, RankedLever)> = declared
        .iter()
        .enumerate()
        .map(|(d, name)| {
            let mut score = 0.0;
            let mut positions = Vec::with_capacity(paths.len());
            let mut entry_steps = Vec::with_capacity(paths.len());
            for path in paths {
                let pos = path.ordered_levers.iter().position(|l| l == name);
                if let (Some(r), Some(&top)) = (pos, path.lambdas.first()) {
                    score += path.entry_penalties[r] / top;
                }
                positions.push(pos);
                entry_steps.push(pos.map(|r| path.entry_steps[r]));
            }
            (
                d,
                RankedLever {
                    lever: name.clone(),
                    score,
                    positions,
                    entry_steps,
                },
            )
        })
        .collect();
    let entered = |l: &RankedLever| l.positions.iter().any(Option::is_some);
    levers.sort_by(|(da, a), (db, b)| {
        entered(b)
            .cmp(&entered(a))
            .then(b.score.total_cmp(&a.score))
            .then(da.cmp(db))
    });
    LeverRanking {
        targets: paths.iter().map(|p| p.target.clone()).collect(),
        levers: levers.into_iter().map(|(_, l)| l).collect(),
    }
}

/// Encodes the configurations, solves one path per target in parallel and
/// combines them.
pub fn rank_from_runs(
    space: &LeverSpace,
    configs: &[Configuration],
    targets: &[(String, Vec<f64>)],
) -> Result<(LeverRanking, Vec<LassoPath>)> {
    if targets.is_empty() {
        return Err(Error::validation("targets", "need at least one target metric"));
    }
    let x = encode(space, configs)?;
    let gram = x.gram();
    let paths = targets
        .par_iter()
        .map(|(name, y)| lasso_path_with_gram(&x, &gram, name, y))
        .collect::<Result<Vec<_>>>()?;
    Ok((rank_levers(&paths, &x.levers), paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simengine::{default_space, LeverKind, LeverSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_lever_space(kind: LeverKind, default: f64) -> LeverSpace {
        LeverSpace::new(vec![LeverSpec {
            name: "x".into(),
            kind,
            default,
            requires_restart: false,
        }])
        .unwrap()
    }

    fn configs(values: &[f64]) -> Vec<Configuration> {
        values
            .iter()
            .map(|&v| Configuration {
                values: vec![v],
                provenance: crate::simengine::Provenance::Random,
            })
            .collect()
    }

    #[test]
    fn single_continuous_lever_gives_two_columns() {
        let space = single_lever_space(LeverKind::Continuous { min: 0.0, max: 5.0 }, 1.0);
        let x = encode(&space, &configs(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.columns, vec!["x", "x^2"]);
        for j in 0..2 {
            let col: Vec<f64> = x.column(j).collect();
            assert!(mean(&col).abs() < 1e-12);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_is_numbered() {
        let space = single_lever_space(
            LeverKind::Categorical {
                categories: vec!["off".into(), "on".into()],
            },
            0.0,
        );
        let x = encode(&space, &configs(&[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(x.columns, vec!["x"]);
        assert_eq!(x.mean, vec![0.5]);
        assert_eq!(x.std, vec![0.5]);
    }

    #[test]
    fn identical_configs_rejected() {
        let space = default_space();
        let c = space.default_config();
        assert!(encode(&space, &[c.clone(), c]).is_err());
    }

    #[test]
    fn full_space_width_bound() {
        let space = default_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cs: Vec<Configuration> = (0..1000).map(|_| space.random_config(&mut rng)).collect();
        let x = encode(&space, &cs).unwrap();
        let continuous = space.levers.iter().filter(|l| l.is_continuous()).count();
        let bound = space.len() + continuous + INTERACTION_COLUMNS * (INTERACTION_COLUMNS - 1) / 2;
        assert!(x.width() <= bound, "{} > {bound}", x.width());
        assert!(x.width() <= 109 + 80 + 190);
    }

    /// Walsh-style ±1 columns: mean zero, unit variance, mutually orthogonal.
    fn walsh(rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (1..=cols)
            .map(|k| {
                (0..rows)
                    .map(|r| if (r & k).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect()
    }

    fn orthogonal_design(cols: usize) -> DesignMatrix {
        let levers: Vec<String> = (0..cols).map(|i| format!("l{i}")).collect();
        let columns = walsh(64, cols)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("l{i}"), i, v))
            .collect();
        DesignMatrix::from_columns(levers, columns).unwrap()
    }

    #[test]
    fn strong_feature_enters_first() {
        let x = orthogonal_design(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..64)
            .map(|r| 3.0 * x.data[r * 2] + 0.1 * x.data[r * 2 + 1] + rng.random_range(-0.01..0.01))
            .collect();
        let path = lasso_path(&x, "y", &y).unwrap();
        assert_eq!(path.ordered_levers, vec!["l0", "l1"]);
        assert!(path.entry_steps[0] < path.entry_steps[1]);
    }

    #[test]
    fn orthonormal_entry_matches_correlation_order() {
        let x = orthogonal_design(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..64).map(|r| (0..6).map(|j| w[j] * x.data[r * 6 + j]).sum()).collect();
        let path = lasso_path(&x, "y", &y).unwrap();
        // closed form: coefficient j is non-zero once lambda < |x_j^T y| / n
        let c = x.correlate(&y);
        let mut expected: Vec<usize> = (0..6).collect();
        expected.sort_by(|&a, &b| c[b].abs().total_cmp(&c[a].abs()));
        let names: Vec<String> = expected.iter().map(|j| format!("l{j}")).collect();
        assert_eq!(path.ordered_levers, names);
    }

    #[test]
    fn uncorrelated_target_gives_empty_path() {
        let x = orthogonal_design(3);
        // column 4 of the Walsh family is orthogonal to columns 1..=3
        let y = walsh(64, 4).pop().unwrap();
        let path = lasso_path(&x, "y", &y).unwrap();
        assert!(path.ordered_levers.is_empty());
    }

    #[test]
    fn too_few_rows() {
        let levers = vec!["a".to_string()];
        let x = DesignMatrix::from_columns(levers, vec![("a".into(), 0, (0..5).map(f64::from).collect())]).unwrap();
        assert!(lasso_path(&x, "y", &[1.0, 2.0, 3.0, 4.0, 5.0]).is_err());
    }

    fn path(order: &[&str]) -> LassoPath {
        LassoPath {
            target: "t".into(),
            ordered_levers: order.iter().map(|s| s.to_string()).collect(),
            entry_steps: (0..order.len()).collect(),
            entry_penalties: (0..order.len()).map(|i| 1.0 / (i + 1) as f64).collect(),
            lambdas: vec![1.0],
            active_counts: Vec::new(),
            coefficients: Vec::new(),
        }
    }

    fn declared() -> Vec<String> {
        ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_target_order_is_kept() {
        let r = rank_levers(&[path(&["c", "a"])], &declared());
        assert_eq!(r.names(), vec!["c", "a", "b", "d"]);
    }

    #[test]
    fn dominant_lever_first() {
        let r = rank_levers(&[path(&["d", "a", "b"]), path(&["d", "c"]), path(&["d", "b", "a"])], &declared());
        assert_eq!(r.names()[0], "d");
    }

    #[test]
    fn reversed_pair_ties_by_declaration() {
        let r = rank_levers(&[path(&["b", "a"]), path(&["a", "b"])], &declared());
        // scores: a = 1/2 + 1 = 1.5, b = 1 + 1/2 = 1.5
        assert_eq!(r.levers[0].score, 1.5);
        assert_eq!(r.levers[1].score, 1.5);
        assert_eq!(r.names(), vec!["a", "b", "c", "d"]);
    }
}
