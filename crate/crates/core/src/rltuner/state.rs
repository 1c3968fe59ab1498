use serde::{Deserialize, Serialize};

use crate::discretiser::BinGrid;
use crate::error::{Error, Result};
use crate::simengine::{Configuration, LeverSpace, MetricMatrix};

/// Steps amalgamated by the heatmap blend; the exponential weight is
/// `2 / (BLEND_STEPS + 1)`.
pub const BLEND_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoding {
    /// metric-major grid, one cell per (metric, node), each in [0, 1].
    pub heatmaps: Vec<f64>,
    /// Position of each ranked lever in its bins or categories, in [0, 1].
    pub config_plane: Vec<f64>,
}

impl StateEncoding {
    pub fn to_input(&self) -> Vec<f64> {
        self.heatmaps.iter().chain(&self.config_plane).copied().collect()
    }
}

/// Running normalisation bounds and blend history for the heatmaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub metrics: Vec<String>,
    pub nodes: usize,
    pub blend_weight: f64,
    #[serde(with = "crate::floats::vec")]
    pub lo: Vec<f64>,
    #[serde(with = "crate::floats::vec")]
    pub hi: Vec<f64>,
    pub blended: Option<Vec<f64>>,
}

impl StateEncoder {
    pub fn new(metrics: Vec<String>, nodes: usize) -> Self {
        let n = metrics.len();
        StateEncoder {
            metrics,
            nodes,
            blend_weight: 2.0 / (BLEND_STEPS as f64 + 1.0),
            lo: vec![f64::INFINITY; n],
            hi: vec![f64::NEG_INFINITY; n],
            blended: None,
        }
    }

    pub fn input_len(&self, levers: usize) -> usize {
        self.metrics.len() * self.nodes + levers
    }

    /// Time-averaged value of every tracked metric on every node.
    fn window_means(&self, window: &MetricMatrix) -> Result<Vec<f64>> {
        if window.node_count != self.nodes {
            return Err(Error::validation(
                "nodes",
                format!("window has {} nodes, encoder expects {}", window.node_count, self.nodes),
            ));
        }
        let mut out = Vec::with_capacity(self.metrics.len() * self.nodes);
        for name in &self.metrics {
            let m = window
                .metric_index(name)
                .ok_or_else(|| Error::validation("metric", format!("unknown metric {name}")))?;
            for n in 0..self.nodes {
                let present: Vec<f64> = window.series(m, n).into_iter().flatten().collect();
                out.push(if present.is_empty() {
                    f64::NAN
                } else {
                    present.iter().sum::<f64>() / present.len() as f64
                });
            }
        }
        Ok(out)
    }

    /// Normalises the window against running per-metric bounds (updated
    /// with this window first) and blends it into the history.
    pub fn encode(
        &mut self,
        window: &MetricMatrix,
        space: &LeverSpace,
        config: &Configuration,
        ranking: &[String],
        grids: &[Option<BinGrid>],
    ) -> Result<StateEncoding> {
        let means = self.window_means(window)?;
        for (m, cells) in means.chunks(self.nodes).enumerate() {
            for &v in cells.iter().filter(|v| v.is_finite()) {
                self.lo[m] = self.lo[m].min(v);
                self.hi[m] = self.hi[m].max(v);
            }
        }
        let fresh: Vec<f64> = means
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = i / self.nodes;
                let span = self.hi[m] - self.lo[m];
                if !v.is_finite() || !(span > 0.0) {
                    0.0
                } else {
                    ((v - self.lo[m]) / span).clamp(0.0, 1.0)
                }
            })
            .collect();
        let heatmaps = match &self.blended {
            None => fresh,
            Some(old) => {
                let w = self.blend_weight;
                fresh.iter().zip(old).map(|(n, o)| w * n + (1.0 - w) * o).collect()
            }
        };
        self.blended = Some(heatmaps.clone());
        Ok(StateEncoding {
            heatmaps,
            config_plane: config_plane(space, config, ranking, grids)?,
        })
    }
}

pub fn config_plane(
    space: &LeverSpace,
    config: &Configuration,
    ranking: &[String],
    grids: &[Option<BinGrid>],
) -> Result<Vec<f64>> {
    ranking
        .iter()
        .zip(grids)
        .map(|(name, grid)| {
            let i = space
                .index_of(name)
                .ok_or_else(|| Error::validation("lever", format!("unknown lever {name}")))?;
            let value = config.values[i];
            Ok(match (grid, space.levers[i].category_count()) {
                (Some(g), _) => position(g.bin_of(value), g.len()),
                (None, Some(n)) => position(value as usize, n),
                (None, None) => space.levers[i].normalize(value),
            })
        })
        .collect()
}

fn position(index: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        index as f64 / (count - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simengine::default_space;

    fn window(values: &[f64]) -> MetricMatrix {
        let mut m = MetricMatrix::new(vec!["a".into()], values.len(), 60.0);
        m.push_sample(60.0, &values.iter().map(|&v| Some(v)).collect::<Vec<_>>());
        m
    }

    #[test]
    fn constant_metrics_give_equal_cells() {
        let space = default_space();
        let config = space.default_config();
        let mut enc = StateEncoder::new(vec!["a".into()], 3);
        let s = enc.encode(&window(&[2.0, 2.0, 2.0]), &space, &config, &[], &[]).unwrap();
        assert!(s.heatmaps.iter().all(|&c| c == s.heatmaps[0]));
    }

    #[test]
    fn hot_node_at_max_is_one() {
        let space = default_space();
        let config = space.default_config();
        let mut enc = StateEncoder::new(vec!["a".into()], 3);
        let s = enc.encode(&window(&[1.0, 5.0, 3.0]), &space, &config, &[], &[]).unwrap();
        assert_eq!(s.heatmaps, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn blend_recurrence() {
        let space = default_space();
        let config = space.default_config();
        let mut enc = StateEncoder::new(vec!["a".into()], 2);
        let first = enc.encode(&window(&[0.0, 4.0]), &space, &config, &[], &[]).unwrap();
        let second = enc.encode(&window(&[4.0, 0.0]), &space, &config, &[], &[]).unwrap();
        let w = 2.0 / 41.0;
        assert!((second.heatmaps[0] - (w * 1.0 + (1.0 - w) * first.heatmaps[0])).abs() < 1e-15);
        assert!((second.heatmaps[1] - (w * 0.0 + (1.0 - w) * first.heatmaps[1])).abs() < 1e-15);
    }

    #[test]
    fn unknown_metric_or_nodes() {
        let space = default_space();
        let config = space.default_config();
        let mut enc = StateEncoder::new(vec!["b".into()], 2);
        assert!(enc.encode(&window(&[1.0, 2.0]), &space, &config, &[], &[]).is_err());
        let mut enc = StateEncoder::new(vec!["a".into()], 3);
        assert!(enc.encode(&window(&[1.0, 2.0]), &space, &config, &[], &[]).is_err());
    }
}
