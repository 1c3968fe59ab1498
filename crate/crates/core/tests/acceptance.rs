//! One PASS/FAIL line per acceptance criterion. Trains ten policies end to
//! end, so expect a run of roughly twenty minutes on one core.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtune::discretiser::{BinGrid, Restructure};
use streamtune::harness::output::write_training;
use streamtune::harness::{
    adaptation_run, dist1, dist2, exploration_sweep, prepare, stationary_baseline, switch_schedule, train_resumable,
    AdaptOptions, ExperimentConfig, Prepared, TrainState, TrainingLog,
};
use streamtune::leverrank::{lasso_path, DesignMatrix};
use streamtune::rltuner::{
    advantage_samples, reinforce_update, Action, Direction, PolicyNet, Step, StepTiming, Trajectory, Tuner,
};
use streamtune::simengine::truth::LATENT_FACTORS;

const SEEDS: u64 = 10;

const P99_REDUCTION: f64 = 0.60;
const DEPLOY_STEPS: usize = 10;
const SEED_BUDGET_S: f64 = 300.0;
const MIN_SEEDS_TUNED: usize = 8;

const REPS_RANGE: std::ops::RangeInclusive<usize> = 5..=12;
const K_EXPECTED: usize = 7;
const K_SHARE: f64 = 0.7;
const FACTOR_SHARE: f64 = 0.9;

const PLANTED: usize = 5;
const TOP_LEVERS: usize = 8;
const RECOVERY_SHARE: f64 = 0.9;
const RANK_WINDOWS: usize = 2000;

const PARTITION_OPS: usize = 100_000;
const PARTITION_BUDGET_S: f64 = 10.0;

const FD_REL_ERROR: f64 = 1e-4;
const SHIFT_TOLERANCE: f64 = 1e-10;

const F_VALUES: [f64; 3] = [0.9, 0.8, 0.7];
const EXPLORE_SEEDS: usize = 5;
const EXPLORE_HOURS: f64 = 200.0;

const SPIKE_RATIO: f64 = 1.8;
const RECOVERY_MULTIPLE: f64 = 1.2;
const SEGMENT_MIN: f64 = 60.0;
const MIN_SEEDS_ADAPTED: usize = 8;

const LOAD_STABILISE_SHARE: f64 = 0.80;
const UPDATE_GENERATE_SHARE: f64 = 0.05;

/// Straight to the stderr handle: the test harness captures `println!`,
/// and these lines should show in a plain `cargo test` run.
fn say(line: String) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Verdict {
    results: Vec<bool>,
}

impl Verdict {
    fn report(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        say(format!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
        self.results.push(pass);
    }
}

struct Trained {
    prepared: Prepared,
    tuner: Tuner,
    log: TrainingLog,
    seconds: f64,
}

fn train_seed(seed: u64) -> Trained {
    let start = Instant::now();
    let config = ExperimentConfig {
        seed,
        deploy_steps: DEPLOY_STEPS,
        ..Default::default()
    };
    let (prepared, runs) = prepare(&config).unwrap();
    let state = TrainState::new(&config, &prepared).unwrap();
    let state = train_resumable(&config, &prepared, &runs, state, None).unwrap();
    Trained {
        prepared,
        tuner: state.tuner,
        log: state.log,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_1(v: &mut Verdict, trained: &[Trained]) {
    let ok: Vec<bool> = trained
        .iter()
        .map(|t| {
            t.log.deployment_ratio().is_some_and(|r| r <= 1.0 - P99_REDUCTION)
                && t.log.deployment.len() <= DEPLOY_STEPS
                && t.seconds <= SEED_BUDGET_S
        })
        .collect();
    let ratios: Vec<String> = trained
        .iter()
        .map(|t| format!("{:.2}", t.log.deployment_ratio().unwrap_or(f64::NAN)))
        .collect();
    let slowest = trained.iter().map(|t| t.seconds).fold(0.0, f64::max);
    let hits = ok.iter().filter(|&&b| b).count();
    v.report(
        1,
        "p99 reduction",
        hits >= MIN_SEEDS_TUNED,
        format!("{hits}/{SEEDS} seeds at <= {:.2}x default within {DEPLOY_STEPS} steps, best ratios {ratios:?}, slowest seed {slowest:.0} s", 1.0 - P99_REDUCTION),
    );
}

fn criteria_2_3(v: &mut Verdict) {
    let mut reps_ok = 0;
    let mut k_hits = 0;
    let mut factor_hits = [0usize; LATENT_FACTORS];
    let mut recovered = 0;
    let mut windows_ok = true;
    for seed in 1..=SEEDS {
        let config = ExperimentConfig {
            seed,
            truth_seed: seed,
            ..Default::default()
        };
        let (prepared, runs) = prepare(&config).unwrap();
        windows_ok &= runs.rows.len() == RANK_WINDOWS;
        let reps = prepared.selection.representatives();
        reps_ok += REPS_RANGE.contains(&reps.len()) as usize;
        k_hits += (prepared.selection.workers.clusters.k == K_EXPECTED) as usize;
        let covered: std::collections::BTreeSet<usize> = reps
            .iter()
            .filter_map(|r| prepared.truth.metrics.iter().find(|m| m.name == r.metric))
            .filter_map(|m| m.factor)
            .collect();
        for f in covered {
            factor_hits[f] += 1;
        }
        let top = prepared.ranking.top(TOP_LEVERS);
        let truth = &prepared.truth.influential_levers;
        recovered += (truth.len() == PLANTED && truth.iter().all(|l| top.contains(l))) as usize;
    }
    let n = SEEDS as f64;
    let worst_factor = factor_hits.iter().copied().min().unwrap_or(0);
    v.report(
        2,
        "metric reduction",
        reps_ok == SEEDS as usize && k_hits as f64 >= K_SHARE * n && worst_factor as f64 >= FACTOR_SHARE * n,
        format!("{reps_ok}/{SEEDS} seeds with 5-12 representatives, k = 7 in {k_hits}/{SEEDS}, least covered factor in {worst_factor}/{SEEDS}"),
    );

    let toy = orthonormal_toy();
    v.report(
        3,
        "lever recovery",
        windows_ok && recovered as f64 >= RECOVERY_SHARE * n && toy,
        format!("all {PLANTED} planted levers in the top {TOP_LEVERS} in {recovered}/{SEEDS} seeds over {RANK_WINDOWS} windows, orthonormal toy order exact: {toy}"),
    );
}

fn orthonormal_toy() -> bool {
    let walsh = |k: usize| -> Vec<f64> {
        (0..32usize).map(|r| if (r & k).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 }).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..20).all(|_| {
        let p = 8;
        let cols: Vec<Vec<f64>> = (1..=p).map(walsh).collect();
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..32).map(|r| (0..p).map(|j| beta[j] * cols[j][r]).sum()).collect();
        let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
        let x = DesignMatrix::from_columns(
            names.clone(),
            cols.iter().enumerate().map(|(j, c)| (names[j].clone(), j, c.clone())).collect(),
        )
        .unwrap();
        let mut oracle: Vec<(usize, f64)> = cols
            .iter()
            .enumerate()
            .map(|(j, c)| (j, c.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs()))
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1));
        let expected: Vec<String> = oracle.iter().map(|(j, _)| names[*j].clone()).collect();
        lasso_path(&x, "y", &y).unwrap().ordered_levers == expected
    })
}

fn criterion_4(v: &mut Verdict) {
    let g = BinGrid::init("x", 0.0, 10.0).unwrap();
    let ten = g.len() == 10 && g.bins.iter().all(|b| (b.width() - 1.0).abs() < 1e-12);

    let mut h = g.clone();
    let mut last = Restructure::None;
    for _ in 0..h.halve_threshold {
        last = h.record_selection(4).unwrap();
    }
    let twenty = last == Restructure::Halved && h.len() == 20;

    let mut e = g.clone();
    for _ in 0..e.extend_threshold {
        last = e.record_selection(e.len() - 1).unwrap();
    }
    let extended = last == Restructure::Extended && e.max == 11.0;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut grid = BinGrid::init("y", 0.5, 20.0).unwrap();
    let mut intact = true;
    for _ in 0..PARTITION_OPS {
        let hot = rng.random_bool(0.6);
        let i = if hot { grid.len() / 3 } else { rng.random_range(0..grid.len()) };
        grid.record_selection(i).unwrap();
        intact &= grid.check_partition().is_ok();
    }
    let secs = start.elapsed().as_secs_f64();
    v.report(
        4,
        "discretiser",
        ten && twenty && extended && intact && secs < PARTITION_BUDGET_S,
        format!("10 bins: {ten}, 20 after halving: {twenty}, top extension by delta: {extended}, partition after {PARTITION_OPS} ops: {intact} in {secs:.2} s"),
    );
}

fn frozen_batch(seed: u64, equal: bool) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let len = if equal { 6 } else { rng.random_range(3..8) };
            Trajectory {
                steps: (0..len)
                    .map(|_| {
                        let rank = rng.random_range(0..3);
                        Step {
                            input: (0..10).map(|_| rng.random_range(0.0..1.0)).collect(),
                            action: Action {
                                rank,
                                lever: format!("l{rank}"),
                                direction: if rng.random_bool(0.5) { Direction::Increase } else { Direction::Decrease },
                                exploit: false,
                            },
                            bin: 0,
                            value: 0.0,
                            p99_ms: 0.0,
                            reward: -rng.random_range(0.5..4.0),
                            rejected: false,
                            timing: StepTiming::default(),
                        }
                    })
                    .collect(),
            }
        })
        .collect()
}

fn criterion_5(v: &mut Verdict) {
    let mut worst_fd: f64 = 0.0;
    for seed in 1..=3 {
        let net = PolicyNet::new(10, 3, seed);
        let (samples, _) = advantage_samples(&frozen_batch(seed, false), 1.0).unwrap();
        let g = net.gradient(&samples);
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..net.theta.len() {
            let mut plus = net.clone();
            plus.theta[i] += h;
            let mut minus = net.clone();
            minus.theta[i] -= h;
            let fd = (plus.objective(&samples) - minus.objective(&samples)) / (2.0 * h);
            diff += (fd - g[i]).powi(2);
            norm += fd * fd;
        }
        worst_fd = worst_fd.max((diff / norm).sqrt());
    }

    let episodes = frozen_batch(8, true);
    let mut shifted = episodes.clone();
    shifted.iter_mut().flat_map(|e| e.steps.iter_mut()).for_each(|s| s.reward -= 12.0);
    let mut a = PolicyNet::new(10, 3, 4);
    let mut b = a.clone();
    reinforce_update(&mut a, &episodes, 1.0).unwrap();
    reinforce_update(&mut b, &shifted, 1.0).unwrap();
    let shift = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let same = frozen_batch(9, true).remove(0);
    let mut z = PolicyNet::new(10, 3, 6);
    let before = z.theta.clone();
    reinforce_update(&mut z, &[same.clone(), same], 1.0).unwrap();
    let unchanged = z.theta == before;

    v.report(
        5,
        "policy gradient",
        worst_fd <= FD_REL_ERROR && shift <= SHIFT_TOLERANCE && unchanged,
        format!("finite-difference relative error {worst_fd:.2e} over 3 batches, reward-shift difference {shift:.2e}, zero advantages unchanged: {unchanged}"),
    );
}

fn criterion_6(v: &mut Verdict, trained: &[Trained]) {
    let opts = AdaptOptions::default();
    let first = &trained[0];
    let b1 = stationary_baseline(&first.prepared, &first.tuner, &dist1(41), SEGMENT_MIN, &opts, 1).unwrap();
    let b2 = stationary_baseline(&first.prepared, &first.tuner, &dist2(42), SEGMENT_MIN, &opts, 1).unwrap();
    let tuners: Vec<Tuner> = trained.iter().take(EXPLORE_SEEDS).map(|t| t.tuner.clone()).collect();
    let seeds: Vec<u64> = (1..=EXPLORE_SEEDS as u64).collect();
    let table = exploration_sweep(
        &first.prepared,
        &tuners,
        &seeds,
        &F_VALUES,
        &[1],
        EXPLORE_HOURS,
        (&dist1(43), &dist2(44)),
        (b1, b2),
        &opts,
    )
    .unwrap();
    let rows: Vec<_> = F_VALUES.iter().map(|&f| table.row(f, 1).unwrap()).collect();
    let means_down = rows.windows(2).all(|w| w[1].mean_minutes > w[0].mean_minutes);
    let stds_up = rows.windows(2).all(|w| w[1].std_minutes > w[0].std_minutes);
    let fmt = |g: &dyn Fn(usize) -> f64| (0..3).map(|i| format!("{:.2}", g(i))).collect::<Vec<_>>().join(" / ");
    v.report(
        6,
        "exploitation factor",
        means_down && stds_up,
        format!(
            "f = 0.9 / 0.8 / 0.7 at 1 switch/h over {EXPLORE_SEEDS} seeds: mean {} min, std {} min",
            fmt(&|i| rows[i].mean_minutes),
            fmt(&|i| rows[i].std_minutes)
        ),
    );
}

fn criterion_7(v: &mut Verdict, trained: &[Trained]) {
    let opts = AdaptOptions::default();
    let mut hits = 0;
    let mut observed_hits = 0;
    let mut detail = Vec::new();
    for (i, t) in trained.iter().enumerate() {
        let seed = i as u64 + 1;
        let b1 = stationary_baseline(&t.prepared, &t.tuner, &dist1(41), SEGMENT_MIN, &opts, seed).unwrap();
        let b2 = stationary_baseline(&t.prepared, &t.tuner, &dist2(42), SEGMENT_MIN, &opts, seed).unwrap();
        let schedule = switch_schedule(&dist1(43), &dist2(44), SEGMENT_MIN, SEGMENT_MIN);
        let report = adaptation_run(&t.prepared, &t.tuner, &schedule, &[b1, b2], &opts, seed).unwrap();
        let s = &report.switches[0];
        let recovered = s.converged_minutes.is_some() && opts.threshold <= RECOVERY_MULTIPLE;
        hits += (s.spike_ratio >= SPIKE_RATIO && recovered) as usize;
        observed_hits += (s.spike_ms / s.pre_switch_ms >= SPIKE_RATIO) as usize;
        detail.push(format!(
            "{:.1}x/{}",
            s.spike_ratio,
            s.converged_minutes.map_or("none".into(), |m| format!("{m:.0}m"))
        ));
    }
    v.report(
        7,
        "workload switch",
        hits >= MIN_SEEDS_ADAPTED,
        format!("{hits}/{SEEDS} seeds spiked >= {SPIKE_RATIO}x and recovered to <= {RECOVERY_MULTIPLE}x within {SEGMENT_MIN} min, per seed spike/recovery {detail:?}"),
    );
    say(format!("  info: spike over the observed pre-switch median reached {SPIKE_RATIO}x in {observed_hits}/{SEEDS} seeds"));
}

fn criterion_8(v: &mut Verdict, trained: &[Trained]) {
    let mut worst_ls: f64 = 1.0;
    let mut worst_ug: f64 = 0.0;
    for t in trained {
        let shares = t.log.phase_shares();
        let get = |name: &str| shares.iter().find(|(n, _)| *n == name).unwrap().1;
        worst_ls = worst_ls.min(get("loading") + get("stabilisation"));
        worst_ug = worst_ug.max(get("update") + get("generation"));
    }
    v.report(
        8,
        "time breakdown",
        worst_ls >= LOAD_STABILISE_SHARE && worst_ug <= UPDATE_GENERATE_SHARE,
        format!("loading + stabilisation >= {:.1}% and update + generation <= {:.2}% in every seed", 100.0 * worst_ls, 100.0 * worst_ug),
    );
}

fn criterion_9(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seed: 3,
        sweep_configs: 40,
        selection_windows: 120,
        iterations: 10,
        session_iterations: 4,
        ..Default::default()
    };
    let write = |name: &str, state: &TrainState, runs: &streamtune::harness::RunsDataset| {
        let out = dir.path().join(name);
        write_training(&out, state).unwrap();
        runs.write_csv(std::fs::File::create(out.join("runs.csv")).unwrap()).unwrap();
        out
    };
    let mut outs = Vec::new();
    let mut states = Vec::new();
    for name in ["a", "b"] {
        let (prepared, runs) = prepare(&config).unwrap();
        let state = train_resumable(&config, &prepared, &runs, TrainState::new(&config, &prepared).unwrap(), None).unwrap();
        outs.push(write(name, &state, &runs));
        states.push(state);
    }
    let files = ["runs.csv", "episodes.csv", "trajectory.csv", "deployment.csv", "training_curve.csv", "breakdown.csv"];
    let identical = files
        .iter()
        .all(|f| std::fs::read(outs[0].join(f)).unwrap() == std::fs::read(outs[1].join(f)).unwrap());

    let (prepared, runs) = prepare(&config).unwrap();
    let half = train_resumable(&config, &prepared, &runs, TrainState::new(&config, &prepared).unwrap(), Some(4)).unwrap();
    let checkpoint = dir.path().join("checkpoint.json");
    half.save(&checkpoint).unwrap();
    let resumed = train_resumable(&config, &prepared, &runs, TrainState::load(&checkpoint).unwrap(), None).unwrap();
    let resumes = resumed == states[0];
    v.report(
        9,
        "reproducibility",
        identical && resumes,
        format!("byte-identical CSVs for equal seeds: {identical}, checkpoint resume equals uninterrupted run: {resumes}"),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdict { results: Vec::new() };
    let trained: Vec<Trained> = (1..=SEEDS).map(train_seed).collect();
    criterion_1(&mut v, &trained);
    criteria_2_3(&mut v);
    criterion_4(&mut v);
    criterion_5(&mut v);
    criterion_6(&mut v, &trained);
    criterion_7(&mut v, &trained);
    criterion_8(&mut v, &trained);
    criterion_9(&mut v);
    let passed = v.results.iter().filter(|&&p| p).count();
    say(format!("acceptance: {passed}/{} criteria pass", v.results.len()));
    assert_eq!(passed, v.results.len(), "some acceptance criteria failed");
}
