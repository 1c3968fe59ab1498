use serde::{Deserialize, Serialize};

/// A gap-free series. `fallback` is set when fewer than four points were
/// present and linear or constant filling was used instead of a spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filled {
    pub values: Vec<f64>,
    pub fallback: bool,
}

/// Fills gaps in an equally spaced series. Interior gaps come from a cubic
/// spline through the present points; leading and trailing gaps repeat
/// the nearest present value. A series with no present point becomes zeros.
pub fn interpolate_missing(series: &[Option<f64>]) -> Filled {
    let known: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i as f64, v)))
        .collect();
    if known.len() == series.len() {
        return Filled {
            values: known.into_iter().map(|(_, v)| v).collect(),
            fallback: false,
        };
    }
    let fallback = known.len() < 4;
    if known.is_empty() {
        return Filled {
            values: vec![0.0; series.len()],
            fallback,
        };
    }
    let spline = (!fallback).then(|| CubicSpline::fit(&known));
    let (first, last) = (known[0], known[known.len() - 1]);
    let values = series
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if let Some(v) = v {
                return *v;
            }
            let x = i as f64;
            if x < first.0 {
                first.1
            } else if x > last.0 {
                last.1
            } else if let Some(s) = &spline {
                s.eval(x)
            } else {
                linear(&known, x)
            }
        })
        .collect();
    Filled { values, fallback }
}

fn linear(known: &[(f64, f64)], x: f64) -> f64 {
    let j = known.partition_point(|p| p.0 <= x).clamp(1, known.len() - 1);
    let (x0, y0) = known[j - 1];
    let (x1, y1) = known[j];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Cubic spline with not-a-knot end conditions (third derivative continuous
/// across the second and second-to-last knots), stored as knot second
/// derivatives. Cubic data is reproduced exactly.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    /// `points` must have strictly increasing abscissae and at least four entries.
    pub fn fit(points: &[(f64, f64)]) -> Self {
        let n = points.len();
        assert!(n >= 4, "not-a-knot spline needs four points");
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        // interior rows i = 1..n-1: h[i-1] m[i-1] + 2(h[i-1]+h[i]) m[i] + h[i] m[i+1] = r[i]
        let k = n - 2;
        let mut lower = vec![0.0; k];
        let mut diag = vec![0.0; k];
        let mut upper = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 1..n - 1 {
            lower[i - 1] = h[i - 1];
            diag[i - 1] = 2.0 * (h[i - 1] + h[i]);
            upper[i - 1] = h[i];
            rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        // eliminate m[0] = ((h0 + h1) m[1] - h0 m[2]) / h1
        let (h0, h1) = (h[0], h[1]);
        diag[0] += h0 * (h0 + h1) / h1;
        upper[0] -= h0 * h0 / h1;
        // eliminate m[n-1] = ((ha + hb) m[n-2] - hb m[n-3]) / ha
        let (ha, hb) = (h[n - 3], h[n - 2]);
        diag[k - 1] += hb * (ha + hb) / ha;
        lower[k - 1] -= hb * hb / ha;

        for i in 1..k {
            let w = lower[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
        }
        m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
        m[n - 1] = ((ha + hb) * m[n - 2] - hb * m[n - 3]) / ha;
        CubicSpline { xs, ys, m }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let j = self.xs.partition_point(|&p| p <= x).clamp(1, n - 1);
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * self.ys[j - 1]
            + b * self.ys[j]
            + ((a * a * a - a) * self.m[j - 1] + (b * b * b - b) * self.m[j]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_gaps_is_identity() {
        let s: Vec<Option<f64>> = [1.0, 5.0, -2.0].iter().map(|&v| Some(v)).collect();
        let f = interpolate_missing(&s);
        assert_eq!(f.values, vec![1.0, 5.0, -2.0]);
        assert!(!f.fallback);
    }

    #[test]
    fn cubic_gap_filled_exactly() {
        let p = |x: f64| 0.5 * x * x * x - 2.0 * x * x + x - 3.0;
        let mut s: Vec<Option<f64>> = (0..9).map(|i| Some(p(i as f64))).collect();
        s[4] = None;
        let f = interpolate_missing(&s);
        assert!((f.values[4] - p(4.0)).abs() < 1e-9);
    }

    #[test]
    fn spline_reproduces_linear_data() {
        // exact on straight lines
        let mut s: Vec<Option<f64>> = (0..8).map(|i| Some(2.0 * i as f64 - 1.0)).collect();
        s[3] = None;
        s[4] = None;
        let f = interpolate_missing(&s);
        assert!((f.values[3] - 5.0).abs() < 1e-12);
        assert!((f.values[4] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn sine_gap_within_tolerance() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.6).collect();
        let mut s: Vec<Option<f64>> = xs.iter().map(|x| Some(x.sin())).collect();
        s[5] = None;
        let f = interpolate_missing(&s);
        assert!((f.values[5] - xs[5].sin()).abs() < 0.05);
    }

    #[test]
    fn edges_extend_constant() {
        let s = vec![None, Some(1.0), Some(2.0), Some(4.0), Some(3.0), None, None];
        let f = interpolate_missing(&s);
        assert_eq!(f.values[0], 1.0);
        assert_eq!(f.values[5], 3.0);
        assert_eq!(f.values[6], 3.0);
        assert!(!f.fallback);
    }

    #[test]
    fn few_points_fall_back_to_linear() {
        let s = vec![Some(0.0), None, Some(2.0), Some(3.0)];
        let f = interpolate_missing(&s);
        assert!(f.fallback);
        assert_eq!(f.values[1], 1.0);
    }
}
