//! Adaptive quadrature: midpoint refinement in 2D, Simpson refinement in 1D.

use crate::error::{CoreError, Result};

const MAX_DEPTH_2D: usize = 24;
const MAX_DEPTH_1D: usize = 52;

/// Integrate `f` over the axis-aligned box `[lo, hi]` by adaptive midpoint
/// refinement. Each cell compares Richardson extrapolations of two
/// successive midpoint refinements; cells that disagree split into four.
/// `tol` is an absolute tolerance for the whole box.
pub fn integrate_2d<F>(f: &F, lo: [f64; 2], hi: [f64; 2], tol: f64) -> Result<f64>
where
    F: Fn(f64, f64) -> f64 + ?Sized,
{
    if !(lo[0] < hi[0] && lo[1] < hi[1]) {
        return Err(CoreError::InvalidParameter(
            "integration box must have positive extent".into(),
        ));
    }
    let cell = Cell2 { lo, hi };
    let fc = f(cell.center()[0], cell.center()[1]);
    let fkids = cell.children().map(|c| f(c.center()[0], c.center()[1]));
    let v = refine_2d(f, &cell, fc, fkids, tol, 0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::QuadratureFailure(
            "non-finite integrand encountered".into(),
        ))
    }
}

#[derive(Clone, Copy)]
struct Cell2 {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Cell2 {
    fn center(&self) -> [f64; 2] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1])]
    }

    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn children(&self) -> [Cell2; 4] {
        let m = self.center();
        [
            Cell2 { lo: self.lo, hi: m },
            Cell2 {
                lo: [m[0], self.lo[1]],
                hi: [self.hi[0], m[1]],
            },
            Cell2 {
                lo: [self.lo[0], m[1]],
                hi: [m[0], self.hi[1]],
            },
            Cell2 { lo: m, hi: self.hi },
        ]
    }
}

/// `fc` is the integrand at the cell midpoint, `fkids` at its four child
/// midpoints; grandchild midpoints are evaluated here and handed down on
/// recursion so no point is evaluated twice.
fn refine_2d<F>(f: &F, cell: &Cell2, fc: f64, fkids: [f64; 4], tol: f64, depth: usize) -> f64
where
    F: Fn(f64, f64) -> f64 + ?Sized,
{
    let kids = cell.children();
    let mut fgrand = [[0.0f64; 4]; 4];
    for (k, kid) in kids.iter().enumerate() {
        for (g, gc) in kid.children().iter().enumerate() {
            let c = gc.center();
            fgrand[k][g] = f(c[0], c[1]);
        }
    }
    let area = cell.area();
    let m0 = fc * area;
    let m1: f64 = fkids.iter().sum::<f64>() * area / 4.0;
    let m2: f64 = fgrand.iter().flatten().sum::<f64>() * area / 16.0;
    // Midpoint error is O(h^2); one Richardson step per level gives two
    // O(h^4) estimates whose difference bounds the finer one.
    let r1 = (4.0 * m1 - m0) / 3.0;
    let r2 = (4.0 * m2 - m1) / 3.0;
    if depth >= MAX_DEPTH_2D || (r2 - r1).abs() <= 15.0 * tol {
        return (16.0 * r2 - r1) / 15.0;
    }
    let child_tol = tol / 2.0;
    kids.iter()
        .enumerate()
        .map(|(k, kid)| refine_2d(f, kid, fkids[k], fgrand[k], child_tol, depth + 1))
        .sum()
}

/// Adaptive Simpson integration of `f` over `[a, b]` with absolute tolerance `tol`.
pub fn integrate_1d<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64 + ?Sized,
{
    if !(a < b) {
        return Err(CoreError::InvalidParameter(
            "integration interval must have positive length".into(),
        ));
    }
    let m = (a + b) / 2.0;
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let v = simpson_refine(f, a, b, fa, fm, fb, whole, tol, 0);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::QuadratureFailure(
            "non-finite integrand encountered".into(),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_refine<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> f64
where
    F: Fn(f64) -> f64 + ?Sized,
{
    let m = (a + b) / 2.0;
    let lm = (a + m) / 2.0;
    let rm = (m + b) / 2.0;
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth >= MAX_DEPTH_1D || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
        + simpson_refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn gaussian_mass_2d() {
        let f = |x: f64, y: f64| (-0.5 * (x * x + y * y)).exp() / (2.0 * PI);
        let v = integrate_2d(&f, [-8.0, -8.0], [8.0, 8.0], 1e-8).unwrap();
        assert!((v - 1.0).abs() < 1e-7, "got {v}");
    }

    #[test]
    fn kinked_integrand_2d() {
        let f = |x: f64, y: f64| x.abs() + y.abs();
        let v = integrate_2d(&f, [-1.0, -1.0], [1.0, 1.0], 1e-9).unwrap();
        assert!((v - 4.0).abs() < 1e-8, "got {v}");
    }

    #[test]
    fn polynomial_exact_2d() {
        let f = |x: f64, y: f64| x * x * y * y + 3.0 * x + 1.0;
        let v = integrate_2d(&f, [0.0, 0.0], [2.0, 1.0], 1e-10).unwrap();
        // int x^2 dx * int y^2 dy + 3 int x * 1 + area = 8/3 * 1/3 + 6 + 2.
        assert!((v - (8.0 / 9.0 + 6.0 + 2.0)).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn simpson_matches_closed_forms() {
        let v = integrate_1d(&|x: f64| x.exp(), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (std::f64::consts::E - 1.0)).abs() < 1e-11);
        let v = integrate_1d(&|x: f64| (x * x).sin(), 0.0, 3.0, 1e-10).unwrap();
        // Fresnel-type reference computed with mpmath.
        assert!((v - 0.7735625268937690).abs() < 1e-8);
    }
}
