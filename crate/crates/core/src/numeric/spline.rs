//! Natural cubic spline interpolation with constant extrapolation.

use crate::error::{CoreError, Result};

/// Cubic spline through `(x_j, y_j)` knots with natural boundary conditions
/// (second derivative zero at both ends). Outside the knot range the spline
/// is extended as a constant with the value of the nearest knot.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    y2: Vec<f64>,
}

impl CubicSpline {
    /// Fit a natural cubic spline. Knot abscissae must be finite and strictly
    /// increasing; at least two knots are required.
    pub fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(CoreError::InvalidParameter(format!(
                "spline knot count mismatch: {} abscissae vs {} values",
                xs.len(),
                ys.len()
            )));
        }
        if xs.len() < 2 {
            return Err(CoreError::InvalidParameter(
                "spline needs at least two knots".into(),
            ));
        }
        for w in xs.windows(2) {
            if !(w[0] < w[1]) {
                return Err(CoreError::InvalidParameter(format!(
                    "spline knots must be strictly increasing: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "spline knots must be finite".into(),
            ));
        }

        let n = xs.len();
        let mut y2 = vec![0.0; n];
        let mut u = vec![0.0; n];
        // Tridiagonal sweep; natural boundary conditions pin y2[0] = y2[n-1] = 0.
        for i in 1..n - 1 {
            let sig = (xs[i] - xs[i - 1]) / (xs[i + 1] - xs[i - 1]);
            let p = sig * y2[i - 1] + 2.0;
            y2[i] = (sig - 1.0) / p;
            let d = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
                - (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
            u[i] = (6.0 * d / (xs[i + 1] - xs[i - 1]) - sig * u[i - 1]) / p;
        }
        for i in (1..n - 1).rev() {
            y2[i] = y2[i] * y2[i + 1] + u[i];
        }
        Ok(Self { xs, ys, y2 })
    }

    pub fn knots_x(&self) -> &[f64] {
        &self.xs
    }

    pub fn knots_y(&self) -> &[f64] {
        &self.ys
    }

    /// Evaluate the spline; constant beyond the first/last knot.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        // partition_point returns the first knot > x, so the interval is [k-1, k].
        let k = self.xs.partition_point(|&t| t <= x);
        let (lo, hi) = (k - 1, k);
        let h = self.xs[hi] - self.xs[lo];
        let a = (self.xs[hi] - x) / h;
        let b = (x - self.xs[lo]) / h;
        a * self.ys[lo]
            + b * self.ys[hi]
            + ((a * a * a - a) * self.y2[lo] + (b * b * b - b) * self.y2[hi]) * (h * h) / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knots_exactly() {
        let xs = vec![-1.0, 0.0, 0.5, 2.0, 3.0];
        let ys = vec![2.0, -1.0, 0.5, 4.0, 4.5];
        let s = CubicSpline::natural(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((s.eval(*x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_data_reproduced_exactly() {
        let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.7 - 1.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 0.25).collect();
        let s = CubicSpline::natural(xs, ys).unwrap();
        for i in 0..70 {
            let x = -1.0 + i as f64 * 0.07;
            assert!((s.eval(x) - (3.0 * x - 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_extrapolation() {
        let s = CubicSpline::natural(vec![0.0, 1.0, 2.0], vec![1.0, 4.0, 2.0]).unwrap();
        assert_eq!(s.eval(-100.0), 1.0);
        assert_eq!(s.eval(100.0), 2.0);
    }

    #[test]
    fn rejects_unsorted_knots() {
        assert!(CubicSpline::natural(vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]).is_err());
        assert!(CubicSpline::natural(vec![0.0], vec![1.0]).is_err());
    }
}
