use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time x metric x node observations with a missing-entry mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub times: Vec<f64>,
    pub metric_names: Vec<String>,
    pub node_count: usize,
    pub sample_period: f64,
    #[serde(with = "crate::floats::vec")]
    values: Vec<f64>,
    present: Vec<bool>,
}

impl MetricMatrix {
    pub fn new(metric_names: Vec<String>, node_count: usize, sample_period: f64) -> Self {
        MetricMatrix {
            times: Vec::new(),
            metric_names,
            node_count,
            sample_period,
            values: Vec::new(),
            present: Vec::new(),
        }
    }

    pub fn metric_count(&self) -> usize {
        self.metric_names.len()
    }

    pub fn sample_count(&self) -> usize {
        self.times.len()
    }

    fn stride(&self) -> usize {
        self.metric_names.len() * self.node_count
    }

    /// Appends one sample; `row` is laid out metric-major (`m * nodes + n`),
    /// with `None` marking a missing observation.
    pub fn push_sample(&mut self, t: f64, row: &[Option<f64>]) {
        assert_eq!(row.len(), self.stride(), "sample width mismatch");
        self.times.push(t);
        for v in row {
            self.values.push(v.unwrap_or(f64::NAN));
            self.present.push(v.is_some());
        }
    }

    pub fn get(&self, t: usize, metric: usize, node: usize) -> Option<f64> {
        let i = t * self.stride() + metric * self.node_count + node;
        self.present[i].then(|| self.values[i])
    }

    /// Time series of one metric on one node.
    pub fn series(&self, metric: usize, node: usize) -> Vec<Option<f64>> {
        (0..self.sample_count()).map(|t| self.get(t, metric, node)).collect()
    }

    pub fn metric_index(&self, name: &str) -> Option<usize> {
        self.metric_names.iter().position(|m| m == name)
    }

    pub fn missing_count(&self) -> usize {
        self.present.iter().filter(|p| !**p).count()
    }

    pub fn offset_times(&mut self, dt: f64) {
        self.times.iter_mut().for_each(|t| *t += dt);
    }

    pub fn extend(&mut self, other: &MetricMatrix) -> Result<()> {
        if other.metric_names != self.metric_names || other.node_count != self.node_count {
            return Err(Error::validation("metric matrix", "shapes differ"));
        }
        self.times.extend_from_slice(&other.times);
        self.values.extend_from_slice(&other.values);
        self.present.extend_from_slice(&other.present);
        Ok(())
    }

    /// Checks dimensions and that every present value is finite.
    pub fn validate(&self) -> Result<()> {
        let expected = self.times.len() * self.stride();
        if self.values.len() != expected || self.present.len() != expected {
            return Err(Error::validation("metric matrix", "inconsistent dimensions"));
        }
        if self
            .values
            .iter()
            .zip(&self.present)
            .any(|(v, &p)| p && !v.is_finite())
        {
            return Err(Error::validation("metric matrix", "non-finite value"));
        }
        Ok(())
    }

    /// Long format `t_s,node,metric,value`; missing entries are omitted.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t_s,node,metric,value")?;
        for (t, &time) in self.times.iter().enumerate() {
            for (m, name) in self.metric_names.iter().enumerate() {
                for n in 0..self.node_count {
                    if let Some(v) = self.get(t, m, n) {
                        writeln!(out, "{time:.3},{n},{name},{v:.6}")?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads the long format back. Metric order follows first appearance;
    /// absent (time, node, metric) combinations become missing entries.
    pub fn read_csv<R: Read>(input: R, sample_period: f64) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t_s: f64,
            node: usize,
            metric: String,
            value: f64,
        }
        let mut rows = Vec::new();
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut times: Vec<f64> = Vec::new();
        let mut nodes = 0;
        for row in csv::Reader::from_reader(input).deserialize::<Row>() {
            let row = row?;
            let m = *index.entry(row.metric.clone()).or_insert_with(|| {
                names.push(row.metric.clone());
                names.len() - 1
            });
            match times.last() {
                Some(&t) if row.t_s == t => {}
                Some(&t) if row.t_s < t => {
                    return Err(Error::validation("t_s", "rows must be grouped by ascending time"));
                }
                _ => times.push(row.t_s),
            }
            nodes = nodes.max(row.node + 1);
            rows.push((times.len() - 1, m, row.node, row.value));
        }
        let mut out = MetricMatrix::new(names, nodes, sample_period);
        let stride = out.stride();
        out.times = times;
        out.values = vec![f64::NAN; out.times.len() * stride];
        out.present = vec![false; out.times.len() * stride];
        for (t, m, node, value) in rows {
            let i = t * stride + m * nodes + node;
            out.values[i] = value;
            out.present[i] = true;
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing() {
        let mut m = MetricMatrix::new(vec!["a".into(), "b".into()], 2, 60.0);
        m.push_sample(60.0, &[Some(1.0), Some(2.0), None, Some(4.0)]);
        m.push_sample(120.0, &[Some(5.0), Some(6.0), Some(7.0), Some(8.0)]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t_s,node,metric,value\n"));
        let back = MetricMatrix::read_csv(buf.as_slice(), 60.0).unwrap();
        assert_eq!(back.get(0, 1, 0), None);
        assert_eq!(back.get(1, 1, 1), Some(8.0));
        assert_eq!(back.missing_count(), 1);
        assert_eq!(back.series(0, 1), vec![Some(2.0), Some(6.0)]);
    }
}
