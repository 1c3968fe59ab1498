use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HIDDEN: usize = 20;
pub const LEARNING_RATE: f64 = 0.001;
pub const RMS_DECAY: f64 = 0.9;
pub const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Decrease,
    Increase,
}

impl Direction {
    pub fn offset(self) -> usize {
        match self {
            Direction::Decrease => 0,
            Direction::Increase => 1,
        }
    }

    pub fn sign(self) -> i64 {
        match self {
            Direction::Decrease => -1,
            Direction::Increase => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Decrease => "decrease",
            Direction::Increase => "increase",
        }
    }
}

/// One hidden ReLU layer and a softmax over `2 * levers` logits: logit
/// `2i` decreases ranked lever `i`, logit `2i + 1` increases it.
///
/// Parameters are stored flat: `w1` (hidden x input, row-major), `b1`,
/// `w2` (actions x hidden), `b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub input: usize,
    pub hidden: usize,
    pub actions: usize,
    pub theta: Vec<f64>,
    pub cache: Vec<f64>,
    pub learning_rate: f64,
    pub updates: u64,
}

pub struct Forward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// A frozen sample for the gradient: input, chosen lever (ranked index),
/// direction and its advantage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub lever: usize,
    pub direction: Direction,
    pub advantage: f64,
}

impl PolicyNet {
    /// Uniform initialisation scaled by fan-in.
    pub fn new(input: usize, levers: usize, seed: u64) -> Self {
        let hidden = HIDDEN;
        let actions = 2 * levers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(hidden * input + hidden + actions * hidden + actions);
        let s1 = 1.0 / (input.max(1) as f64).sqrt();
        theta.extend((0..hidden * input).map(|_| rng.random_range(-s1..s1)));
        theta.extend(std::iter::repeat_n(0.0, hidden));
        let s2 = 1.0 / (hidden as f64).sqrt();
        theta.extend((0..actions * hidden).map(|_| rng.random_range(-s2..s2)));
        theta.extend(std::iter::repeat_n(0.0, actions));
        let cache = vec![0.0; theta.len()];
        PolicyNet {
            input,
            hidden,
            actions,
            theta,
            cache,
            learning_rate: LEARNING_RATE,
            updates: 0,
        }
    }

    pub fn levers(&self) -> usize {
        self.actions / 2
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.actions * self.hidden;
        (b1, w2, b2)
    }

    pub fn forward(&self, x: &[f64]) -> Forward {
        let (b1, w2, b2) = self.offsets();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &self.theta[h * self.input..(h + 1) * self.input];
                let z = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.theta[b1 + h];
                z.max(0.0)
            })
            .collect();
        let logits = (0..self.actions)
            .map(|a| {
                let row = &self.theta[w2 + a * self.hidden..w2 + (a + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + self.theta[b2 + a]
            })
            .collect();
        Forward { hidden, logits }
    }

    /// Softmax over all actions.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.forward(x).logits)
    }

    /// Probability of each direction for one ranked lever.
    pub fn direction_probs(&self, x: &[f64], lever: usize) -> [f64; 2] {
        let logits = self.forward(x).logits;
        let p = softmax(&logits[2 * lever..2 * lever + 2]);
        [p[0], p[1]]
    }

    pub fn log_prob(&self, x: &[f64], lever: usize, direction: Direction) -> f64 {
        self.direction_probs(x, lever)[direction.offset()].ln()
    }

    /// Objective whose gradient the update follows: sum of advantage-weighted
    /// log-probabilities of the chosen directions.
    pub fn objective(&self, batch: &[Sample]) -> f64 {
        batch
            .iter()
            .map(|s| s.advantage * self.log_prob(&s.input, s.lever, s.direction))
            .sum()
    }

    /// Analytic gradient of [`PolicyNet::objective`].
    pub fn gradient(&self, batch: &[Sample]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let mut g = vec![0.0; self.theta.len()];
        for s in batch {
            if s.advantage == 0.0 {
                continue;
            }
            let fwd = self.forward(&s.input);
            let p = softmax(&fwd.logits[2 * s.lever..2 * s.lever + 2]);
            // d log p / d logits, non-zero only on the chosen lever's pair
            let mut dlogit = [0.0; 2];
            for (d, slot) in dlogit.iter_mut().enumerate() {
                let taken = if d == s.direction.offset() { 1.0 } else { 0.0 };
                *slot = s.advantage * (taken - p[d]);
            }
            let mut dhidden = vec![0.0; self.hidden];
            for (d, &dl) in dlogit.iter().enumerate() {
                let a = 2 * s.lever + d;
                g[b2 + a] += dl;
                for h in 0..self.hidden {
                    g[w2 + a * self.hidden + h] += dl * fwd.hidden[h];
                    dhidden[h] += dl * self.theta[w2 + a * self.hidden + h];
                }
            }
            for h in 0..self.hidden {
                if fwd.hidden[h] <= 0.0 {
                    continue;
                }
                g[b1 + h] += dhidden[h];
                let row = &mut g[h * self.input..(h + 1) * self.input];
                for (gi, xi) in row.iter_mut().zip(&s.input) {
                    *gi += dhidden[h] * xi;
                }
            }
        }
        g
    }

    /// One rmsprop ascent step along the gradient of the objective.
    pub fn apply_gradient(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.theta.len() {
            return Err(Error::validation("gradient", "length does not match parameters"));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at parameter {i}")));
        }
        for ((t, c), &gi) in self.theta.iter_mut().zip(self.cache.iter_mut()).zip(g) {
            *c = RMS_DECAY * *c + (1.0 - RMS_DECAY) * gi * gi;
            *t += self.learning_rate * gi / (c.sqrt() + RMS_EPS);
        }
        self.updates += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}
