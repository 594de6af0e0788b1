//! Cubic smoothing spline with natural end conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Piecewise cubic `c0 + c1·d + c2·d² + c3·d³` with `d = t − knots[i]` on
/// `[knots[i], knots[i + 1]]`. Outside the knots the end pieces are extended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCubic {
    pub knots: Vec<f64>,
    pub coefficients: Vec<[f64; 4]>,
}

impl PiecewiseCubic {
    pub fn is_valid(&self) -> bool {
        self.knots.len() >= 2
            && self.coefficients.len() + 1 == self.knots.len()
            && self.knots.windows(2).all(|w| w[0] < w[1])
            && self.knots.iter().all(|k| k.is_finite())
            && self.coefficients.iter().flatten().all(|c| c.is_finite())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = match self.knots.partition_point(|k| *k <= t) {
            0 => 0,
            p => (p - 1).min(self.coefficients.len() - 1),
        };
        let d = t - self.knots[i];
        let c = &self.coefficients[i];
        c[0] + d * (c[1] + d * (c[2] + d * c[3]))
    }
}

/// Minimises `Σ wᵢ (yᵢ − f(xᵢ))² + λ ∫ f''²` over natural cubic splines.
///
/// Needs at least three strictly increasing abscissae and positive weights.
pub fn smoothing_spline(x: &[f64], y: &[f64], w: &[f64], lambda: f64) -> Option<PiecewiseCubic> {
    let n = x.len();
    if n < 3 || y.len() != n || w.len() != n || x.windows(2).any(|p| p[0] >= p[1]) || w.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let h: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
    let m = n - 2;
    let mut q = DMatrix::zeros(n, m);
    let mut r = DMatrix::zeros(m, m);
    for j in 0..m {
        q[(j, j)] = 1.0 / h[j];
        q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
        q[(j + 2, j)] = 1.0 / h[j + 1];
        r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
        if j + 1 < m {
            r[(j, j + 1)] = h[j + 1] / 6.0;
            r[(j + 1, j)] = h[j + 1] / 6.0;
        }
    }
    let yv = DVector::from_column_slice(y);
    let winv = DMatrix::from_diagonal(&DVector::from_iterator(n, w.iter().map(|v| 1.0 / v)));
    let lhs = &r + q.transpose() * &winv * &q * lambda;
    let gamma = lhs.lu().solve(&(q.transpose() * &yv))?;
    let g = &yv - &winv * &q * &gamma * lambda;

    let mut second = vec![0.0; n];
    second[1..=m].copy_from_slice(gamma.as_slice());
    let coefficients = (0..n - 1)
        .map(|i| {
            let hi = h[i];
            [
                g[i],
                (g[i + 1] - g[i]) / hi - hi * (2.0 * second[i] + second[i + 1]) / 6.0,
                second[i] / 2.0,
                (second[i + 1] - second[i]) / (6.0 * hi),
            ]
        })
        .collect();
    Some(PiecewiseCubic { knots: x.to_vec(), coefficients })
}
