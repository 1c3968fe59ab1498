//! REINFORCE configurator: heatmap state, one-lever actions chosen with an
//! exploitation factor, returns with a per-step baseline and rmsprop updates.

pub mod episode;
pub mod policy;
pub mod state;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use episode::{derive_seed, LoadSource, Scheduled, Settled, StepOutcome, Stationary, StepTiming, Tuner, TunerParams};
pub use policy::{softmax, Direction, PolicyNet, Sample};
pub use state::{StateEncoder, StateEncoding};

use crate::error::{Error, Result};
use crate::simengine::LatencyStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Negative mean latency.
    #[default]
    MeanLatency,
    /// Sum over events of `-1 / T_e`.
    InverseSum,
}

/// Reward of a set of event latencies (seconds). Empty sets give 0.
pub fn reward(latencies: &LatencyStats, kind: RewardKind) -> Result<f64> {
    reward_of(&latencies.per_event, kind)
}

pub fn reward_of(latencies: &[f64], kind: RewardKind) -> Result<f64> {
    if let Some(t) = latencies.iter().find(|&&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::validation("latency", format!("must be positive and finite, got {t}")));
    }
    if latencies.is_empty() {
        return Ok(0.0);
    }
    Ok(match kind {
        RewardKind::MeanLatency => -latencies.iter().sum::<f64>() / latencies.len() as f64,
        RewardKind::InverseSum => latencies.iter().map(|t| -1.0 / t).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    /// Configurations per tuning phase.
    pub c: usize,
    /// Fixed episode length; drawn from (0.3 C, 0.8 C) when absent.
    pub n: Option<usize>,
    pub gamma: f64,
    /// Probability of acting on the top-ranked lever.
    pub f: f64,
}

impl Default for EpisodePlan {
    fn default() -> Self {
        EpisodePlan {
            c: 10,
            n: None,
            gamma: 1.0,
            f: 0.9,
        }
    }
}

impl EpisodePlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation("gamma", format!("must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.f) {
            return Err(Error::validation("f", format!("must lie in [0, 1], got {}", self.f)));
        }
        match self.n {
            Some(n) if n == 0 || (self.c > 1 && n >= self.c) => {
                Err(Error::validation("n", format!("need 0 < N < C, got N={n}, C={}", self.c)))
            }
            None if self.n_range().is_empty() => {
                Err(Error::validation("c", format!("no integer lies in (0.3C, 0.8C) for C={}", self.c)))
            }
            _ => Ok(()),
        }
    }

    /// Integers strictly inside (0.3 C, 0.8 C).
    pub fn n_range(&self) -> std::ops::RangeInclusive<usize> {
        let c = self.c as f64;
        let lo = (0.3 * c).floor() as usize + 1;
        let hi = (0.8 * c).ceil() as usize - 1;
        lo..=hi
    }

    pub fn episode_len<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.n {
            Some(n) => n,
            None => rng.random_range(self.n_range()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Position of the lever in the ranking.
    pub rank: usize,
    pub lever: String,
    pub direction: Direction,
    /// Chosen through the top-lever branch.
    pub exploit: bool,
}

/// With probability `f` the top-ranked lever, otherwise one of the others
/// uniformly; the direction is drawn from the policy restricted to the
/// chosen lever's two logits.
pub fn select_action<R: Rng + ?Sized>(
    net: &PolicyNet,
    input: &[f64],
    ranking: &[String],
    f: f64,
    rng: &mut R,
) -> Result<Action> {
    if ranking.is_empty() {
        return Err(Error::validation("ranking", "must not be empty"));
    }
    if ranking.len() > net.levers() {
        return Err(Error::validation("ranking", "longer than the policy's action set"));
    }
    let (rank, exploit) = if ranking.len() == 1 || rng.random_bool(f.clamp(0.0, 1.0)) {
        (0, true)
    } else {
        (rng.random_range(1..ranking.len()), false)
    };
    let p = net.direction_probs(input, rank);
    let direction = if rng.random::<f64>() < p[0] {
        Direction::Decrease
    } else {
        Direction::Increase
    };
    Ok(Action {
        rank,
        lever: ranking[rank].clone(),
        direction,
        exploit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub input: Vec<f64>,
    pub action: Action,
    /// Bin (or category) the lever moved to.
    pub bin: usize,
    pub value: f64,
    pub p99_ms: f64,
    pub reward: f64,
    pub rejected: bool,
    pub timing: StepTiming,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `v_t = sum_{s >= t} gamma^(s - t) r_s`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut v = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        v[t] = acc;
    }
    v
}

/// Per-step mean of the returns across episodes; shorter episodes are padded
/// with their final return.
pub fn compute_baseline(returns: &[Vec<f64>]) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(Error::validation("episodes", "need at least one episode"));
    }
    let len = returns.iter().map(Vec::len).max().unwrap_or(0);
    Ok((0..len)
        .map(|t| {
            returns
                .iter()
                .map(|v| v.get(t).or(v.last()).copied().unwrap_or(0.0))
                .sum::<f64>()
                / returns.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub samples: usize,
    pub gradient_norm: f64,
    pub mean_return: f64,
}

/// Advantage-weighted samples for a batch of episodes.
pub fn advantage_samples(episodes: &[Trajectory], gamma: f64) -> Result<(Vec<Sample>, f64)> {
    let returns: Vec<Vec<f64>> = episodes.iter().map(|e| compute_returns(&e.rewards(), gamma)).collect();
    let baseline = compute_baseline(&returns)?;
    let mut samples = Vec::new();
    for (episode, v) in episodes.iter().zip(&returns) {
        for (t, step) in episode.steps.iter().enumerate() {
            samples.push(Sample {
                input: step.input.clone(),
                lever: step.action.rank,
                direction: step.action.direction,
                advantage: v[t] - baseline[t],
            });
        }
    }
    let mean_return = returns.iter().filter_map(|v| v.first()).sum::<f64>() / returns.len() as f64;
    Ok((samples, mean_return))
}

/// Divides the advantages by their standard deviation over the batch, so
/// every batch moves the policy by a comparable amount whatever the
/// latency scale. A batch without spread is left at zero.
pub fn scale_advantages(samples: &mut [Sample]) {
    let n = samples.len() as f64;
    let sd = (samples.iter().map(|s| s.advantage * s.advantage).sum::<f64>() / n.max(1.0)).sqrt();
    if sd > 0.0 {
        samples.iter_mut().for_each(|s| s.advantage /= sd);
    }
}

/// One policy-gradient step over a batch of episodes.
pub fn reinforce_update(net: &mut PolicyNet, episodes: &[Trajectory], gamma: f64) -> Result<UpdateReport> {
    update_with(net, episodes, gamma, false)
}

/// As [`reinforce_update`], optionally with [`scale_advantages`] applied.
pub fn update_with(net: &mut PolicyNet, episodes: &[Trajectory], gamma: f64, scale: bool) -> Result<UpdateReport> {
    let (mut samples, mean_return) = advantage_samples(episodes, gamma)?;
    if scale {
        scale_advantages(&mut samples);
    }
    let g = net.gradient(&samples);
    net.apply_gradient(&g)?;
    Ok(UpdateReport {
        samples: samples.len(),
        gradient_norm: g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        mean_return,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reward_examples() {
        assert_eq!(reward_of(&[2.0], RewardKind::InverseSum).unwrap(), -0.5);
        assert_eq!(reward_of(&[], RewardKind::MeanLatency).unwrap(), 0.0);
        assert_eq!(reward_of(&[1.0; 4], RewardKind::MeanLatency).unwrap(), -1.0);
        assert!(reward_of(&[1.0, 0.0], RewardKind::MeanLatency).is_err());
    }

    #[test]
    fn returns_examples() {
        assert_eq!(compute_returns(&[-1.0, -1.0, -1.0], 1.0), vec![-3.0, -2.0, -1.0]);
        assert_eq!(compute_returns(&[0.0, 0.0, 0.0, -2.0], 1.0), vec![-2.0; 4]);
        assert_eq!(compute_returns(&[-1.0, -2.0], 0.5), vec![-2.0, -2.0]);
    }

    #[test]
    fn baseline_examples() {
        assert_eq!(compute_baseline(&[vec![-2.0], vec![-4.0]]).unwrap(), vec![-3.0]);
        assert_eq!(compute_baseline(&[vec![-2.0, -1.0], vec![-4.0]]).unwrap(), vec![-3.0, -2.5]);
        assert!(compute_baseline(&[]).is_err());
    }

    #[test]
    fn plan_n_range() {
        let plan = EpisodePlan::default();
        assert_eq!(plan.n_range(), 4..=7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!((4..=7).contains(&plan.episode_len(&mut rng)));
        }
        assert!(EpisodePlan { n: Some(10), ..plan.clone() }.validate().is_err());
        assert!(EpisodePlan { gamma: 0.0, ..plan }.validate().is_err());
    }

    #[test]
    fn exploitation_boundaries() {
        let net = PolicyNet::new(3, 4, 1);
        let ranking: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            assert_eq!(select_action(&net, &[0.1; 3], &ranking, 1.0, &mut rng).unwrap().rank, 0);
            let single = select_action(&net, &[0.1; 3], &ranking[..1], 0.0, &mut rng).unwrap();
            assert_eq!(single.lever, "a");
        }
        assert!(select_action(&net, &[0.1; 3], &[], 0.5, &mut rng).is_err());
    }
}
