use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtune::discretiser::BinGrid;
use streamtune::harness::dist2;
use streamtune::leverrank::{lasso_path, DesignMatrix};
use streamtune::rltuner::{Direction, PolicyNet, Sample};
use streamtune::simengine::{default_space, plant_ground_truth, run_window, EngineParams};

fn engine_window(c: &mut Criterion) {
    let space = default_space();
    let truth = plant_ground_truth(&space, 5, 1).unwrap();
    let params = EngineParams::default();
    let config = space.default_config();
    let trace = dist2(1).generate_for(900.0).unwrap();
    c.bench_function("engine_window_dist2_900s", |b| {
        b.iter(|| run_window(&space, &truth, &params, &config, black_box(&trace), 900.0, 3).unwrap())
    });
}

fn lasso(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, p) = (2000, 40);
    let cols: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = (0..n)
        .map(|r| 3.0 * cols[0][r] - 2.0 * cols[5][r] + cols[9][r] + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let x = DesignMatrix::from_columns(
        names.clone(),
        cols.into_iter().enumerate().map(|(j, c)| (names[j].clone(), j, c)).collect(),
    )
    .unwrap();
    c.bench_function("lasso_path_2000x40", |b| b.iter(|| lasso_path(&x, "y", black_box(&y)).unwrap()));
}

fn discretiser(c: &mut Criterion) {
    c.bench_function("bin_grid_10k_selections", |b| {
        b.iter(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut g = BinGrid::init("x", 0.5, 20.0).unwrap();
            for _ in 0..10_000 {
                let i = rng.random_range(0..g.len());
                g.record_selection(i).unwrap();
            }
            g
        })
    });
}

fn policy_gradient(c: &mut Criterion) {
    let net = PolicyNet::new(40, 3, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<Sample> = (0..24)
        .map(|_| Sample {
            input: (0..40).map(|_| rng.random_range(0.0..1.0)).collect(),
            lever: rng.random_range(0..3),
            direction: if rng.random_bool(0.5) { Direction::Increase } else { Direction::Decrease },
            advantage: rng.random_range(-1.0..1.0),
        })
        .collect();
    c.bench_function("policy_gradient_24_samples", |b| b.iter(|| net.gradient(black_box(&batch))));
}

criterion_group!(benches, engine_window, lasso, discretiser, policy_gradient);
criterion_main!(benches);
