use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtune::rltuner::{
    advantage_samples, compute_baseline, compute_returns, reinforce_update, Action, Direction, PolicyNet, Sample,
    Step, StepTiming, Trajectory,
};

const INPUT: usize = 9;
const LEVERS: usize = 3;

fn episode(rng: &mut ChaCha8Rng, len: usize) -> Trajectory {
    let steps = (0..len)
        .map(|_| {
            let rank = rng.random_range(0..LEVERS);
            Step {
                input: (0..INPUT).map(|_| rng.random_range(0.0..1.0)).collect(),
                action: Action {
                    rank,
                    lever: format!("l{rank}"),
                    direction: if rng.random_bool(0.5) { Direction::Increase } else { Direction::Decrease },
                    exploit: rank == 0,
                },
                bin: 0,
                value: 0.0,
                p99_ms: 0.0,
                reward: -rng.random_range(0.5..5.0),
                rejected: false,
                timing: StepTiming::default(),
            }
        })
        .collect();
    Trajectory { steps }
}

fn batch(seed: u64, equal: bool) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let len = if equal { 5 } else { rng.random_range(3..8) };
            episode(&mut rng, len)
        })
        .collect()
}

/// Surrogate written out from the definitions: sum over steps of
/// (return - per-step mean return) * log pi(a | s).
fn surrogate(net: &PolicyNet, episodes: &[Trajectory]) -> f64 {
    let returns: Vec<Vec<f64>> = episodes.iter().map(|e| compute_returns(&e.rewards(), 1.0)).collect();
    let len = returns.iter().map(Vec::len).max().unwrap();
    let mean_at = |t: usize| {
        returns.iter().map(|v| *v.get(t).unwrap_or(v.last().unwrap())).sum::<f64>() / returns.len() as f64
    };
    let mut total = 0.0;
    for (e, v) in episodes.iter().zip(&returns) {
        for (t, s) in e.steps.iter().enumerate() {
            let logits = net.forward(&s.input).logits;
            let pair = &logits[2 * s.action.rank..2 * s.action.rank + 2];
            let m = pair[0].max(pair[1]);
            let log_z = m + ((pair[0] - m).exp() + (pair[1] - m).exp()).ln();
            let chosen = pair[s.action.direction.offset()];
            total += (v[t] - mean_at(t)) * (chosen - log_z);
        }
    }
    assert!(len > 0);
    total
}

#[test]
fn gradient_matches_finite_differences_on_frozen_batches() {
    for seed in [11u64, 12, 13] {
        let net = PolicyNet::new(INPUT, LEVERS, seed);
        let episodes = batch(seed, false);
        let (samples, _) = advantage_samples(&episodes, 1.0).unwrap();
        let g = net.gradient(&samples);
        let h = 1e-5;
        let fd: Vec<f64> = (0..net.theta.len())
            .map(|i| {
                let mut plus = net.clone();
                plus.theta[i] += h;
                let mut minus = net.clone();
                minus.theta[i] -= h;
                (surrogate(&plus, &episodes) - surrogate(&minus, &episodes)) / (2.0 * h)
            })
            .collect();
        let diff = fd.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "seed {seed}: relative error {}", diff / norm);
    }
}

#[test]
fn reward_shift_leaves_the_update_unchanged() {
    let episodes = batch(21, true);
    let mut shifted = episodes.clone();
    for e in &mut shifted {
        for s in &mut e.steps {
            s.reward += 37.5;
        }
    }
    let mut a = PolicyNet::new(INPUT, LEVERS, 5);
    let mut b = a.clone();
    reinforce_update(&mut a, &episodes, 1.0).unwrap();
    reinforce_update(&mut b, &shifted, 1.0).unwrap();
    let worst = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max parameter difference {worst}");
}

#[test]
fn zero_advantages_leave_theta() {
    // two identical episodes: the per-step mean equals each return exactly
    let one = batch(31, true).remove(0);
    let episodes = vec![one.clone(), one];
    let mut net = PolicyNet::new(INPUT, LEVERS, 2);
    let before = net.theta.clone();
    reinforce_update(&mut net, &episodes, 1.0).unwrap();
    assert_eq!(net.theta, before);

    let samples: Vec<Sample> = advantage_samples(&batch(32, false), 1.0)
        .unwrap()
        .0
        .into_iter()
        .map(|s| Sample { advantage: 0.0, ..s })
        .collect();
    let g = net.gradient(&samples);
    net.apply_gradient(&g).unwrap();
    assert_eq!(net.theta, before);
}

proptest! {
    #[test]
    fn baseline_advantages_sum_to_zero_per_step(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let episodes = batch(seed, true);
        let (samples, _) = advantage_samples(&episodes, 1.0).unwrap();
        let len = episodes[0].len();
        for t in 0..len {
            let sum: f64 = (0..episodes.len()).map(|e| samples[e * len + t].advantage).sum();
            prop_assert!(sum.abs() < 1e-9);
        }
        let returns: Vec<Vec<f64>> = episodes
            .iter()
            .map(|e| compute_returns(&e.rewards().iter().map(|r| r + shift).collect::<Vec<_>>(), 1.0))
            .collect();
        let base = compute_baseline(&returns).unwrap();
        prop_assert_eq!(base.len(), len);
    }

    #[test]
    fn returns_satisfy_the_recursion(rewards in prop::collection::vec(-10.0f64..0.0, 1..20), gamma in 0.0f64..=1.0) {
        let v = compute_returns(&rewards, gamma);
        let last = rewards.len() - 1;
        prop_assert_eq!(v[last], rewards[last]);
        for t in 0..last {
            prop_assert!((v[t] - (rewards[t] + gamma * v[t + 1])).abs() < 1e-9);
        }
    }
}
