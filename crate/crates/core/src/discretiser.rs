//! Adaptive binning of a continuous lever range: bins are extended when the
//! top bin keeps being chosen, halved when any bin keeps being chosen, and
//! merged again when neighbours stay idle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INITIAL_BINS: usize = 10;
/// Halvings after which a grid stops refining.
pub const MAX_HALVINGS: u32 = 4;
/// Consecutive halving events without a selection after which neighbours merge.
pub const MERGE_IDLE_HALVINGS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: u32,
    /// Halving events since this bin was last selected.
    pub idle: u32,
}

impl Bin {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Restructure {
    None,
    Extended,
    Halved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub lever: String,
    pub min: f64,
    pub max: f64,
    pub delta: f64,
    pub bins: Vec<Bin>,
    pub halve_threshold: u32,
    pub extend_threshold: u32,
    pub ridge_fraction: f64,
    pub halvings: u32,
    /// Once reached, a bin hitting the halving threshold only has its count
    /// reset. Keeps the smallest move at `delta_0 / 2^max_halvings`.
    pub max_halvings: u32,
}

impl BinGrid {
    pub fn init(lever: impl Into<String>, min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min >= max {
            return Err(Error::validation("min", format!("need min < max, got [{min}, {max}]")));
        }
        let delta = (max - min) / INITIAL_BINS as f64;
        let bins = (0..INITIAL_BINS)
            .map(|i| Bin {
                lo: min + i as f64 * delta,
                hi: if i + 1 == INITIAL_BINS { max } else { min + (i + 1) as f64 * delta },
                count: 0,
                idle: 0,
            })
            .collect();
        Ok(BinGrid {
            lever: lever.into(),
            min,
            max,
            delta,
            bins,
            halve_threshold: 8,
            extend_threshold: 8,
            ridge_fraction: 0.1,
            halvings: 0,
            max_halvings: MAX_HALVINGS,
        })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.bins.len() {
            return Err(Error::validation(
                "bin_index",
                format!("{index} out of range for {} bins", self.bins.len()),
            ));
        }
        Ok(())
    }

    /// Index of the bin containing `value`, clamped to the grid.
    pub fn bin_of(&self, value: f64) -> usize {
        self.bins
            .partition_point(|b| b.hi <= value)
            .min(self.bins.len() - 1)
    }

    /// Bin center shifted by a ridge term drawn uniformly from
    /// `[0, ridge_fraction * width / 2]` with a random sign.
    pub fn value_of<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<f64> {
        self.check_index(index)?;
        let bin = &self.bins[index];
        let half_width = self.ridge_fraction * bin.width() / 2.0;
        let ridge = if half_width > 0.0 { rng.random_range(0.0..=half_width) } else { 0.0 };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Ok((bin.center() + sign * ridge).clamp(bin.lo, bin.hi))
    }

    /// Counts a selection and restructures the grid when a threshold is hit.
    /// Top-bin extension is checked first, so a top bin reaching both
    /// thresholds at once extends rather than halves.
    pub fn record_selection(&mut self, index: usize) -> Result<Restructure> {
        self.check_index(index)?;
        let top = index + 1 == self.bins.len();
        let bin = &mut self.bins[index];
        bin.count += 1;
        bin.idle = 0;
        if top && bin.count >= self.extend_threshold {
            bin.count = 0;
            let lo = self.max;
            self.max += self.delta;
            self.bins.push(Bin {
                lo,
                hi: self.max,
                count: 0,
                idle: 0,
            });
            return Ok(Restructure::Extended);
        }
        if self.bins.iter().any(|b| b.count >= self.halve_threshold) {
            if self.halvings >= self.max_halvings {
                self.bins.iter_mut().for_each(|b| b.count = 0);
                return Ok(Restructure::None);
            }
            self.halve();
            return Ok(Restructure::Halved);
        }
        Ok(Restructure::None)
    }

    fn halve(&mut self) {
        let mut bins = Vec::with_capacity(self.bins.len() * 2);
        for b in &self.bins {
            let mid = b.center();
            let hot = b.count >= self.halve_threshold;
            let count = if hot { b.count / 2 } else { 0 };
            let idle = if b.count == 0 { b.idle + 1 } else { 0 };
            bins.push(Bin {
                lo: b.lo,
                hi: mid,
                count,
                idle,
            });
            bins.push(Bin {
                lo: mid,
                hi: b.hi,
                count,
                idle,
            });
        }
        self.delta /= 2.0;
        self.halvings += 1;

        // merge idle neighbours of equal width pairwise
        let mut merged: Vec<Bin> = Vec::with_capacity(bins.len());
        let mut i = 0;
        while i < bins.len() {
            let pair = bins.get(i + 1).filter(|next| {
                let b = &bins[i];
                b.idle >= MERGE_IDLE_HALVINGS
                    && next.idle >= MERGE_IDLE_HALVINGS
                    && (b.width() - next.width()).abs() <= 1e-9 * b.width()
            });
            match pair {
                Some(next) => {
                    merged.push(Bin {
                        lo: bins[i].lo,
                        hi: next.hi,
                        count: 0,
                        idle: 0,
                    });
                    i += 2;
                }
                None => {
                    merged.push(bins[i].clone());
                    i += 1;
                }
            }
        }
        self.bins = merged;
    }

    /// Checks that the bins tile `[min, max]` exactly.
    pub fn check_partition(&self) -> Result<()> {
        let fail = |why: String| Err(Error::Numerical(format!("bin grid for {}: {why}", self.lever)));
        if self.bins.is_empty() {
            return fail("no bins".into());
        }
        if self.bins[0].lo != self.min || self.bins[self.bins.len() - 1].hi != self.max {
            return fail("bins do not reach the grid bounds".into());
        }
        for w in self.bins.windows(2) {
            if w[0].hi != w[1].lo {
                return fail(format!("gap or overlap at {}", w[0].hi));
            }
        }
        if self.bins.iter().any(|b| !(b.hi > b.lo)) {
            return fail("empty bin".into());
        }
        Ok(())
    }
}
