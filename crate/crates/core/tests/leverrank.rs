use proptest::prelude::*;
use streamtune::harness::{prepare, ExperimentConfig};
use streamtune::leverrank::{lasso_path, DesignMatrix};

/// Walsh columns of length 16: mean zero, unit population variance and
/// pairwise orthogonal, so standardisation leaves them unchanged.
fn walsh(k: usize) -> Vec<f64> {
    (0..16usize)
        .map(|r| if (r & k).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 })
        .collect()
}

fn orthonormal_design(p: usize) -> (DesignMatrix, Vec<Vec<f64>>) {
    let cols: Vec<Vec<f64>> = (1..=p).map(walsh).collect();
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let x = DesignMatrix::from_columns(
        names.clone(),
        cols.iter().enumerate().map(|(j, c)| (names[j].clone(), j, c.clone())).collect(),
    )
    .unwrap();
    (x, cols)
}

/// Order of |x_j . y| on the standardized target, largest first.
fn correlation_order(cols: &[Vec<f64>], y: &[f64]) -> Vec<String> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut scored: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, c.iter().zip(y).map(|(a, b)| a * (b - mean) / sd).sum::<f64>().abs()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.into_iter().map(|(j, _)| format!("x{j}")).collect()
}

#[test]
fn orthonormal_entry_order_follows_correlations() {
    let (x, cols) = orthonormal_design(6);
    let beta = [0.3, -2.0, 0.0, 1.1, -0.6, 4.0];
    let y: Vec<f64> = (0..16)
        .map(|r| beta.iter().enumerate().map(|(j, b)| b * cols[j][r]).sum::<f64>() + 0.05 * walsh(9)[r])
        .collect();
    let path = lasso_path(&x, "y", &y).unwrap();
    let expected = correlation_order(&cols, &y);
    assert_eq!(path.ordered_levers, expected[..path.ordered_levers.len()].to_vec());
    assert_eq!(path.ordered_levers[..5], ["x5", "x1", "x3", "x4", "x0"].map(String::from));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn orthonormal_order_matches_oracle(beta in prop::collection::vec(-5.0f64..5.0, 5)) {
        let mut mags: Vec<f64> = beta.iter().map(|b| b.abs()).collect();
        mags.sort_by(f64::total_cmp);
        // ties make the order ambiguous
        prop_assume!(mags.windows(2).all(|w| w[1] - w[0] > 1e-3) && mags[0] > 1e-3);
        let (x, cols) = orthonormal_design(5);
        let y: Vec<f64> = (0..16)
            .map(|r| beta.iter().enumerate().map(|(j, b)| b * cols[j][r]).sum::<f64>())
            .collect();
        let path = lasso_path(&x, "y", &y).unwrap();
        prop_assert_eq!(path.ordered_levers, correlation_order(&cols, &y));
    }
}

#[test]
fn planted_levers_reach_the_top_eight() {
    for seed in [3u64, 7] {
        let config = ExperimentConfig {
            seed,
            truth_seed: seed,
            ..Default::default()
        };
        let (prepared, runs) = prepare(&config).unwrap();
        assert_eq!(runs.rows.len(), 2000);
        let top = prepared.ranking.top(8);
        for lever in &prepared.truth.influential_levers {
            assert!(top.contains(lever), "seed {seed}: {lever} missing from {top:?}");
        }
    }
}
