//! Target and latent distributions with exact log-densities, sampling, and
//! grid discretization.
//!
//! Four analytic families are provided: a single Gaussian, a Gaussian mixture,
//! a ring-shaped mixture with equally spaced modes on a circle, and a compact
//! box-with-linear-skirt density that no constant-Jacobian flow can fit. All
//! objects are immutable after construction; evaluation and sampling are safe
//! to call concurrently as long as callers use independent RNG streams.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::numeric::rng::chunk_substream;

const LN_2PI: f64 = 1.8378770664093453;
const SAMPLE_CHUNK: usize = 8192;
const MAX_REJECTION_ATTEMPTS: usize = 100_000;

/// A full-covariance Gaussian in `D` dimensions.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance, row-major.
    chol: DMatrix<f64>,
    /// `-D/2 ln(2 pi) - 1/2 ln|cov|`.
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || d == 0 {
            return Err(CoreError::InvalidParameter(format!(
                "covariance must be {d}x{d}"
            )));
        }
        let sym_err = (&cov - cov.transpose()).abs().max();
        if sym_err > 1e-12 {
            return Err(CoreError::InvalidParameter(
                "covariance must be symmetric".into(),
            ));
        }
        let chol = Cholesky::<f64, Dyn>::new(cov.clone())
            .ok_or_else(|| {
                CoreError::InvalidParameter("covariance must be positive definite".into())
            })?
            .l();
        let log_det: f64 = (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self::new(vec![0.0; dim], DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        if d == 2 {
            // Inline forward substitution for the 2x2 factor; this is the hot path.
            let d0 = x[0] - self.mean[0];
            let d1 = x[1] - self.mean[1];
            let y0 = d0 / self.chol[(0, 0)];
            let y1 = (d1 - self.chol[(1, 0)] * y0) / self.chol[(1, 1)];
            return self.log_norm - 0.5 * (y0 * y0 + y1 * y1);
        }
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc -= self.chol[(i, j)] * y[j];
            }
            y[i] = acc / self.chol[(i, i)];
        }
        self.log_norm - 0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let d = self.dim();
        if d == 2 {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            out[0] = self.mean[0] + self.chol[(0, 0)] * z0;
            out[1] = self.mean[1] + self.chol[(1, 0)] * z0 + self.chol[(1, 1)] * z1;
            return;
        }
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.chol[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

/// Mixture of Gaussians with a fixed weight simplex.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() || components.is_empty() {
            return Err(CoreError::InvalidParameter(
                "mixture needs one weight per component".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "mixture weights must be positive".into(),
            ));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(CoreError::InvalidParameter(
                "mixture components must share a dimension".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.into_iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut terms = [0.0f64; 8];
        let many = self.components.len() > terms.len();
        let mut heap;
        let buf: &mut [f64] = if many {
            heap = vec![0.0; self.components.len()];
            &mut heap
        } else {
            &mut terms[..self.components.len()]
        };
        for (k, comp) in self.components.iter().enumerate() {
            let t = self.log_weights[k] + comp.log_density(x);
            buf[k] = t;
            if t > best {
                best = t;
            }
        }
        if best == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        best + buf.iter().map(|t| (t - best).exp()).sum::<f64>().ln()
    }

    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        self.components[pick].sample_into(rng, out);
    }

    /// Closed-form mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut m = vec![0.0; d];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for i in 0..d {
                m[i] += w * c.mean()[i];
            }
        }
        m
    }

    /// Closed-form mixture covariance
    /// `sum_k w_k (cov_k + mu_k mu_k^T) - mu mu^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DVector::from_vec(self.mean());
        let mut cov = DMatrix::zeros(d, d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let mu = DVector::from_column_slice(c.mean());
            cov += (c.cov() + &mu * mu.transpose()) * *w;
        }
        cov - &m * m.transpose()
    }
}

/// Compactly supported counterexample density: a plateau on the unit box
/// around the origin skirted by a linear decay to zero. In terms of
/// `m = max(|x|, |y|)` the density is `plateau` for `m <= 1/2`,
/// `plateau - slope (m - 1/2)` while positive, and zero outside.
#[derive(Debug, Clone)]
pub struct BoxCounterexample {
    plateau: f64,
    slope: f64,
}

impl BoxCounterexample {
    pub fn new(plateau: f64, slope: f64) -> Result<Self> {
        if !(plateau > 0.0 && plateau.is_finite()) || !(slope > 0.0 && slope.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "plateau and slope must be positive".into(),
            ));
        }
        Ok(Self { plateau, slope })
    }

    /// Construct with the slope chosen so the density integrates to one.
    pub fn normalized(plateau: f64) -> Result<Self> {
        Self::new(plateau, counterexample_normalizer(plateau)?)
    }

    pub fn plateau(&self) -> f64 {
        self.plateau
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// Half-width of the support square.
    pub fn support_half_width(&self) -> f64 {
        0.5 + self.plateau / self.slope
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let m = x.abs().max(y.abs());
        if m <= 0.5 {
            self.plateau
        } else {
            (self.plateau - self.slope * (m - 0.5)).max(0.0)
        }
    }

    /// Total mass of the linear decay skirt, from the exact piecewise
    /// integral over square shells of perimeter `8m`:
    /// `8 int_0^T (c - k u)(u + 1/2) du = (4/3) c T^2 + 2 c T` with `T = c/k`.
    pub fn skirt_mass(plateau: f64, slope: f64) -> f64 {
        let t = plateau / slope;
        (4.0 / 3.0) * plateau * t * t + 2.0 * plateau * t
    }

    /// Total mass of the density (plateau plus skirt).
    pub fn total_mass(plateau: f64, slope: f64) -> f64 {
        plateau + Self::skirt_mass(plateau, slope)
    }
}

/// Slope `k` for which the box counterexample density integrates to one.
/// Root-found on the analytic piecewise integral.
pub fn counterexample_normalizer(plateau: f64) -> Result<f64> {
    if !(plateau > 0.0) || !plateau.is_finite() {
        return Err(CoreError::InvalidParameter(
            "plateau must lie in (0, 1)".into(),
        ));
    }
    if plateau >= 1.0 {
        // The plateau alone carries mass >= 1, so the skirt would need zero
        // or negative mass and no finite slope exists.
        return Err(CoreError::NoValidSlope { plateau });
    }
    let mass = |k: f64| BoxCounterexample::total_mass(plateau, k);
    let mut lo = 1e-6;
    let mut hi = 1e9;
    if mass(lo) < 1.0 || mass(hi) > 1.0 {
        return Err(CoreError::NoValidSlope { plateau });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = 0.5 * (lo + hi);
    if (mass(k) - 1.0).abs() > 1e-10 {
        return Err(CoreError::NoValidSlope { plateau });
    }
    Ok(k)
}

/// An evaluable, sampleable target distribution.
#[derive(Debug, Clone)]
pub enum AnalyticDensity {
    Gaussian(Gaussian),
    Gmm(GaussianMixture),
    RingMixture {
        n_modes: usize,
        radius: f64,
        sigma: f64,
        mixture: GaussianMixture,
    },
    BoxCounterexample(BoxCounterexample),
}

impl AnalyticDensity {
    pub fn standard_normal(dim: usize) -> Self {
        Self::Gaussian(Gaussian::standard(dim))
    }

    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Ok(Self::Gaussian(Gaussian::new(mean, cov)?))
    }

    /// 2D Gaussian with covariance `[[1, rho], [rho, 1]]`.
    pub fn correlated_gaussian(rho: f64) -> Result<Self> {
        Self::gaussian(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
        )
    }

    pub fn gmm(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        Ok(Self::Gmm(GaussianMixture::new(weights, components)?))
    }

    /// Two-mode benchmark mixture: equal weights, means `(-1/2, -1/2)` and
    /// `(1/2, 1/2)`, isotropic covariances `0.2 I` and `0.1 I`.
    pub fn bimodal_gmm() -> Self {
        let comps = vec![
            Gaussian::isotropic(vec![-0.5, -0.5], 0.2).unwrap(),
            Gaussian::isotropic(vec![0.5, 0.5], 0.1).unwrap(),
        ];
        Self::Gmm(GaussianMixture::new(vec![0.5, 0.5], comps).unwrap())
    }

    /// Mixture of `n_modes` isotropic Gaussians with scale `sigma`, means
    /// equally spaced on the circle of radius `radius` at angles `2 pi i / M`.
    pub fn ring_mixture(n_modes: usize, radius: f64, sigma: f64) -> Result<Self> {
        if n_modes == 0 {
            return Err(CoreError::InvalidParameter(
                "ring mixture needs at least one mode".into(),
            ));
        }
        if !(radius > 0.0) || !(sigma > 0.0) {
            return Err(CoreError::InvalidParameter(
                "ring radius and sigma must be positive".into(),
            ));
        }
        let comps = (0..n_modes)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / n_modes as f64;
                Gaussian::isotropic(vec![radius * phi.cos(), radius * phi.sin()], sigma * sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        let mixture = GaussianMixture::new(vec![1.0 / n_modes as f64; n_modes], comps)?;
        Ok(Self::RingMixture {
            n_modes,
            radius,
            sigma,
            mixture,
        })
    }

    /// Normalized box counterexample with the given plateau value.
    pub fn box_counterexample(plateau: f64) -> Result<Self> {
        Ok(Self::BoxCounterexample(BoxCounterexample::normalized(
            plateau,
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            Self::Gmm(m) => m.dim(),
            Self::RingMixture { mixture, .. } => mixture.dim(),
            Self::BoxCounterexample(_) => 2,
        }
    }

    /// `ln p(x)`; `-inf` where the density vanishes.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gaussian(g) => g.log_density(x),
            Self::Gmm(m) => m.log_density(x),
            Self::RingMixture { mixture, .. } => mixture.log_density(x),
            Self::BoxCounterexample(b) => {
                let d = b.density(x[0], x[1]);
                if d > 0.0 {
                    d.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Self::BoxCounterexample(b) => b.density(x[0], x[1]),
            _ => self.log_density(x).exp(),
        }
    }

    /// Draw one sample into `out`.
    pub fn sample_into(&self, rng: &mut impl Rng, out: &mut [f64]) -> Result<()> {
        match self {
            Self::Gaussian(g) => g.sample_into(rng, out),
            Self::Gmm(m) => m.sample_into(rng, out),
            Self::RingMixture { mixture, .. } => mixture.sample_into(rng, out),
            Self::BoxCounterexample(b) => {
                // Rejection from the uniform envelope over the support square
                // with height `plateau`; acceptance is ~0.9 for plateau 0.9.
                let hw = b.support_half_width();
                for _ in 0..MAX_REJECTION_ATTEMPTS {
                    let x = rng.random_range(-hw..hw);
                    let y = rng.random_range(-hw..hw);
                    let u: f64 = rng.random();
                    if u * b.plateau <= b.density(x, y) {
                        out[0] = x;
                        out[1] = y;
                        return Ok(());
                    }
                }
                return Err(CoreError::RejectionFailure {
                    attempts: MAX_REJECTION_ATTEMPTS,
                });
            }
        }
        Ok(())
    }

    /// Draw `n` i.i.d. samples as a flat row-major array. The result depends
    /// only on `(self, n, seed)`, not on the number of worker threads.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        out.par_chunks_mut(SAMPLE_CHUNK * d)
            .enumerate()
            .try_for_each(|(chunk_id, chunk)| {
                let mut rng = chunk_substream(seed, 0, chunk_id as u64);
                for point in chunk.chunks_exact_mut(d) {
                    self.sample_into(&mut rng, point)?;
                }
                Ok::<(), CoreError>(())
            })?;
        Ok(out)
    }

    /// Axis-aligned box holding essentially all the mass (exact for the box
    /// density, mean +- 8 sigma per axis for the Gaussian families).
    pub fn support_box(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::BoxCounterexample(b) => {
                let hw = b.support_half_width();
                (vec![-hw, -hw], vec![hw, hw])
            }
            _ => {
                let d = self.dim();
                let comps: &[Gaussian] = match self {
                    Self::Gaussian(g) => std::slice::from_ref(g),
                    Self::Gmm(m) => m.components(),
                    Self::RingMixture { mixture, .. } => mixture.components(),
                    Self::BoxCounterexample(_) => unreachable!(),
                };
                let mut lo = vec![f64::INFINITY; d];
                let mut hi = vec![f64::NEG_INFINITY; d];
                for c in comps {
                    for i in 0..d {
                        let s = 8.0 * c.cov()[(i, i)].sqrt();
                        lo[i] = lo[i].min(c.mean()[i] - s);
                        hi[i] = hi[i].max(c.mean()[i] + s);
                    }
                }
                (lo, hi)
            }
        }
    }

    /// Closed-form covariance where available (Gaussian families).
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        match self {
            Self::Gaussian(g) => Some(g.cov().clone()),
            Self::Gmm(m) => Some(m.covariance()),
            Self::RingMixture { mixture, .. } => Some(mixture.covariance()),
            Self::BoxCounterexample(_) => None,
        }
    }
}

// ── Grid discretization ─────────────────────────────────────────────────

/// A 2D density discretized as normalized masses on a regular cell grid.
/// Cell `(ix, iy)` is stored at index `iy * nx + ix` and covers
/// `origin + [ix, iy] * spacing` to `origin + [ix+1, iy+1] * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    origin: [f64; 2],
    spacing: [f64; 2],
    extents: [usize; 2],
    masses: Vec<f64>,
}

impl GridDensity {
    /// Minimum fraction of the total probability mass a grid must capture.
    pub const COVERAGE_REQUIREMENT: f64 = 0.999;

    pub fn from_parts(
        origin: [f64; 2],
        spacing: [f64; 2],
        extents: [usize; 2],
        masses: Vec<f64>,
    ) -> Result<Self> {
        if masses.len() != extents[0] * extents[1] || masses.is_empty() {
            return Err(CoreError::InvalidParameter(
                "mass array does not match grid extents".into(),
            ));
        }
        if spacing[0] <= 0.0 || spacing[1] <= 0.0 {
            return Err(CoreError::InvalidParameter(
                "grid spacing must be positive".into(),
            ));
        }
        if masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "cell masses must be finite and nonnegative".into(),
            ));
        }
        let mut g = Self {
            origin,
            spacing,
            extents,
            masses,
        };
        g.normalize()?;
        Ok(g)
    }

    /// Centered grid of `extents` cells with uniform `spacing`, filled from a
    /// density function by the midpoint rule and normalized.
    pub fn from_density_fn(
        f: impl Fn(f64, f64) -> f64 + Sync,
        center: [f64; 2],
        spacing: [f64; 2],
        extents: [usize; 2],
    ) -> Result<Self> {
        let origin = [
            center[0] - 0.5 * extents[0] as f64 * spacing[0],
            center[1] - 0.5 * extents[1] as f64 * spacing[1],
        ];
        let cell_vol = spacing[0] * spacing[1];
        let nx = extents[0];
        let mut masses = vec![0.0; nx * extents[1]];
        masses
            .par_chunks_mut(nx)
            .enumerate()
            .for_each(|(iy, row)| {
                let y = origin[1] + (iy as f64 + 0.5) * spacing[1];
                for (ix, m) in row.iter_mut().enumerate() {
                    let x = origin[0] + (ix as f64 + 0.5) * spacing[0];
                    *m = f(x, y) * cell_vol;
                }
            });
        Self::from_parts(origin, spacing, extents, masses)
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn extents(&self) -> [usize; 2] {
        self.extents
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn n_cells(&self) -> usize {
        self.masses.len()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 2] {
        let nx = self.extents[0];
        let (ix, iy) = (idx % nx, idx / nx);
        [
            self.origin[0] + (ix as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (iy as f64 + 0.5) * self.spacing[1],
        ]
    }

    /// Index of the cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let ix = (p[0] - self.origin[0]) / self.spacing[0];
        let iy = (p[1] - self.origin[1]) / self.spacing[1];
        if ix < 0.0 || iy < 0.0 {
            return None;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= self.extents[0] || iy >= self.extents[1] {
            return None;
        }
        Some(iy * self.extents[0] + ix)
    }

    /// Density value of a cell (mass over cell volume).
    pub fn cell_density(&self, idx: usize) -> f64 {
        self.masses[idx] / self.cell_volume()
    }

    /// Bilinear interpolation of the density field between cell centers;
    /// zero outside the grid.
    pub fn density_at(&self, p: [f64; 2]) -> f64 {
        let gx = (p[0] - self.origin[0]) / self.spacing[0] - 0.5;
        let gy = (p[1] - self.origin[1]) / self.spacing[1] - 0.5;
        let (nx, ny) = (self.extents[0], self.extents[1]);
        if gx < -0.5 || gy < -0.5 || gx > nx as f64 - 0.5 || gy > ny as f64 - 0.5 {
            return 0.0;
        }
        let x0 = gx.floor().clamp(0.0, (nx - 1) as f64) as usize;
        let y0 = gy.floor().clamp(0.0, (ny - 1) as f64) as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let tx = (gx - x0 as f64).clamp(0.0, 1.0);
        let ty = (gy - y0 as f64).clamp(0.0, 1.0);
        let d = |ix: usize, iy: usize| self.cell_density(iy * nx + ix);
        let top = d(x0, y1) * (1.0 - tx) + d(x1, y1) * tx;
        let bot = d(x0, y0) * (1.0 - tx) + d(x1, y0) * tx;
        bot * (1.0 - ty) + top * ty
    }

    fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(CoreError::InvalidParameter(
                "grid carries no mass to normalize".into(),
            ));
        }
        for m in &mut self.masses {
            *m /= total;
        }
        Ok(())
    }

    /// Mass-weighted mean and covariance of the cell centers.
    pub fn mean_and_covariance(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut mean = [0.0; 2];
        for (i, &m) in self.masses.iter().enumerate() {
            let c = self.cell_center(i);
            mean[0] += m * c[0];
            mean[1] += m * c[1];
        }
        let mut cov = [[0.0; 2]; 2];
        for (i, &m) in self.masses.iter().enumerate() {
            let c = self.cell_center(i);
            let dx = c[0] - mean[0];
            let dy = c[1] - mean[1];
            cov[0][0] += m * dx * dx;
            cov[0][1] += m * dx * dy;
            cov[1][1] += m * dy * dy;
        }
        cov[1][0] = cov[0][1];
        (mean, cov)
    }
}

/// Discretize an analytic 2D density onto a regular grid by the midpoint
/// rule. Fails if the grid captures less than
/// [`GridDensity::COVERAGE_REQUIREMENT`] of the mass.
pub fn discretize(
    density: &AnalyticDensity,
    center: [f64; 2],
    spacing: [f64; 2],
    extents: [usize; 2],
) -> Result<GridDensity> {
    if density.dim() != 2 {
        return Err(CoreError::UnsupportedDimension {
            required: 2,
            actual: density.dim(),
        });
    }
    let origin = [
        center[0] - 0.5 * extents[0] as f64 * spacing[0],
        center[1] - 0.5 * extents[1] as f64 * spacing[1],
    ];
    let cell_vol = spacing[0] * spacing[1];
    let nx = extents[0];
    let mut masses = vec![0.0; nx * extents[1]];
    masses
        .par_chunks_mut(nx)
        .enumerate()
        .for_each(|(iy, row)| {
            let y = origin[1] + (iy as f64 + 0.5) * spacing[1];
            for (ix, m) in row.iter_mut().enumerate() {
                let x = origin[0] + (ix as f64 + 0.5) * spacing[0];
                *m = density.density(&[x, y]) * cell_vol;
            }
        });
    let covered: f64 = masses.iter().sum();
    if covered < GridDensity::COVERAGE_REQUIREMENT {
        return Err(CoreError::GridCoverage {
            covered,
            missing: 1.0 - covered,
            required: GridDensity::COVERAGE_REQUIREMENT,
        });
    }
    GridDensity::from_parts(origin, spacing, extents, masses)
}
