//! Optimal volume-preserving transport and the bounds it cannot undercut.
//!
//! A flow with constant Jacobian determinant can only permute probability
//! mass and apply one global dilation. On a common grid the best such map
//! aligns cells by decreasing mass; in the continuum the best latent is the
//! radially decreasing rearrangement `p*` of the target, whose superlevel
//! sets keep their volumes. The remaining loss is the KL from `p*` to the
//! isotropic Gaussian with matched generalized variance, and a compact
//! plateau density yields explicit lower bounds via Pinsker's inequality.

use rand::Rng;
use rayon::prelude::*;

use crate::densities::{AnalyticDensity, GridDensity};
use crate::error::{CoreError, Result};

const LN_2PI: f64 = 1.8378770664093453;

// ── Sorted grid transport ───────────────────────────────────────────────

/// Cell permutation aligning a source grid with a latent grid by decreasing
/// mass, together with a global dilation `scale` applied after the permutation.
#[derive(Debug, Clone)]
pub struct SortedGridMap {
    source: GridDensity,
    latent: GridDensity,
    /// `perm[i]` is the latent cell assigned to source cell `i`.
    perm: Vec<u32>,
    scale: f64,
}

/// Align the k-th largest source mass with the k-th largest latent mass.
/// Both grids must share cell count and cell volume. Ties break by cell
/// index; the KL value is tie-invariant.
pub fn sorted_grid_map(source: GridDensity, latent: GridDensity) -> Result<SortedGridMap> {
    if source.n_cells() != latent.n_cells() {
        return Err(CoreError::GridMismatch(format!(
            "cell counts differ: {} vs {}",
            source.n_cells(),
            latent.n_cells()
        )));
    }
    let (va, vb) = (source.cell_volume(), latent.cell_volume());
    if (va - vb).abs() > 1e-12 * va.max(vb) {
        return Err(CoreError::GridMismatch(format!(
            "cell volumes differ: {va} vs {vb}"
        )));
    }
    let by_mass_desc = |masses: &[f64]| -> Vec<u32> {
        let mut idx: Vec<u32> = (0..masses.len() as u32).collect();
        idx.sort_by(|&i, &j| masses[j as usize].total_cmp(&masses[i as usize]));
        idx
    };
    let src_sorted = by_mass_desc(source.masses());
    let lat_sorted = by_mass_desc(latent.masses());
    let mut perm = vec![0u32; source.n_cells()];
    for (s, l) in src_sorted.iter().zip(&lat_sorted) {
        perm[*s as usize] = *l;
    }
    Ok(SortedGridMap {
        source,
        latent,
        perm,
        scale: 1.0,
    })
}

impl SortedGridMap {
    pub fn source(&self) -> &GridDensity {
        &self.source
    }

    pub fn latent(&self) -> &GridDensity {
        &self.latent
    }

    pub fn permutation(&self) -> &[u32] {
        &self.perm
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "scale must be positive".into(),
            ));
        }
        self.scale = scale;
        Ok(())
    }

    /// Discrete KL between the source masses and the permuted latent masses,
    /// `sum_i p_i ln(p_i / q_perm(i))` with `0 ln 0 = 0`.
    pub fn discrete_mass_kl(&self) -> f64 {
        discrete_kl_for_perm(self.source.masses(), self.latent.masses(), &self.perm)
    }

    /// Covariance of the permuted latent (the discrete rearrangement `p*`):
    /// source masses sitting at their assigned latent cell centers.
    pub fn permuted_covariance(&self) -> [[f64; 2]; 2] {
        let mut mean = [0.0f64; 2];
        for (i, &m) in self.source.masses().iter().enumerate() {
            let c = self.latent.cell_center(self.perm[i] as usize);
            mean[0] += m * c[0];
            mean[1] += m * c[1];
        }
        let mut cov = [[0.0f64; 2]; 2];
        for (i, &m) in self.source.masses().iter().enumerate() {
            let c = self.latent.cell_center(self.perm[i] as usize);
            let dx = c[0] - mean[0];
            let dy = c[1] - mean[1];
            cov[0][0] += m * dx * dx;
            cov[0][1] += m * dx * dy;
            cov[1][1] += m * dy * dy;
        }
        cov[1][0] = cov[0][1];
        cov
    }

    /// Per-axis dilation minimizing the model KL: `|Sigma|^(-1/(2D))` of the
    /// permuted covariance.
    pub fn optimal_scale_from_covariance(&self) -> f64 {
        let cov = self.permuted_covariance();
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        det.powf(-0.25)
    }

    /// KL achieved by the permutation followed by the dilation `c` against a
    /// standard-normal latent; equivalently the KL from the permuted masses
    /// to `N(0, c^{-2} I)` discretized at cell centers.
    pub fn model_kl(&self, c: f64) -> f64 {
        let vol = self.source.cell_volume();
        let mut kl = 0.0;
        for (i, &m) in self.source.masses().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let z = self.latent.cell_center(self.perm[i] as usize);
            let r2 = z[0] * z[0] + z[1] * z[1];
            // ln N(z; 0, c^{-2} I) = ln c^2 - ln 2pi - c^2 r^2 / 2.
            let log_latent = 2.0 * c.ln() - LN_2PI - 0.5 * c * c * r2;
            kl += m * ((m / vol).ln() - log_latent);
        }
        kl
    }

    /// Transport a point: move it to its cell's assigned latent cell keeping
    /// the relative position, then dilate by `scale`. `None` off-grid.
    pub fn transport(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let idx = self.source.cell_of(p)?;
        let from = self.source.cell_center(idx);
        let to = self.latent.cell_center(self.perm[idx] as usize);
        Some([
            (to[0] + (p[0] - from[0])) * self.scale,
            (to[1] + (p[1] - from[1])) * self.scale,
        ])
    }
}

/// Discrete KL for an arbitrary cell assignment; exposed for the optimality
/// comparisons against random and exhaustive permutations.
pub fn discrete_kl_for_perm(p: &[f64], q: &[f64], perm: &[u32]) -> f64 {
    let mut kl = 0.0;
    for (i, &m) in p.iter().enumerate() {
        if m > 0.0 {
            kl += m * (m / q[perm[i] as usize]).ln();
        }
    }
    kl
}

/// Standard-normal latent discretized on the same geometry as `like`.
pub fn standard_normal_grid(like: &GridDensity) -> Result<GridDensity> {
    let origin = like.origin();
    let spacing = like.spacing();
    let extents = like.extents();
    let center = [
        origin[0] + 0.5 * extents[0] as f64 * spacing[0],
        origin[1] + 0.5 * extents[1] as f64 * spacing[1],
    ];
    GridDensity::from_density_fn(
        |x, y| (-0.5 * (x * x + y * y)).exp() / (2.0 * std::f64::consts::PI),
        center,
        spacing,
        extents,
    )
}

// ── Radial rearrangement ────────────────────────────────────────────────

/// The rotationally symmetric, radially non-increasing density whose
/// superlevel sets have the same volumes as the source. Tabulated as
/// `(r_k, p_k)` pairs with the superlevel volumes that produced them;
/// evaluation interpolates `ln p` linearly in `r^2`.
#[derive(Debug, Clone)]
pub struct RadialProfile {
    dim: usize,
    radii: Vec<f64>,
    values: Vec<f64>,
    /// Superlevel volumes `|L_v^+|` matching `values`.
    volumes: Vec<f64>,
}

/// Density levels probed when building a profile: logarithmically spaced
/// between the maximum and `max * 1e-6`.
const PROFILE_LEVELS: usize = 256;
const PROFILE_LEVEL_FLOOR: f64 = 1e-6;

impl RadialProfile {
    /// Rearrange a grid density by counting cells above each level.
    pub fn from_grid(grid: &GridDensity) -> Result<Self> {
        let vol = grid.cell_volume();
        let mut dens: Vec<f64> = grid.masses().iter().map(|m| m / vol).collect();
        dens.sort_unstable_by(|a, b| b.total_cmp(a));
        let p_max = dens[0];
        if !(p_max > 0.0) {
            return Err(CoreError::InvalidParameter(
                "grid density has no positive cells".into(),
            ));
        }
        let ratio = PROFILE_LEVEL_FLOOR.powf(1.0 / (PROFILE_LEVELS - 1) as f64);
        let mut radii = vec![0.0];
        let mut values = vec![p_max];
        let mut volumes = vec![0.0];
        let mut level = p_max;
        let mut prev_vol = 0.0;
        for k in 0..PROFILE_LEVELS {
            if k > 0 {
                level *= ratio;
            }
            // Number of cells with density >= level; `dens` is descending.
            let count = dens.partition_point(|&d| d >= level);
            let v = count as f64 * vol;
            if v < prev_vol {
                return Err(CoreError::NonMonotoneProfile { level });
            }
            prev_vol = v;
            // D = 2: the disc of equal area has radius sqrt(v / pi).
            let r = (v / std::f64::consts::PI).sqrt();
            if r > *radii.last().unwrap() {
                radii.push(r);
                values.push(level);
                volumes.push(v);
            }
        }
        if radii.len() < 3 {
            return Err(CoreError::InvalidParameter(
                "profile degenerated to fewer than three levels".into(),
            ));
        }
        Ok(Self {
            dim: 2,
            radii,
            values,
            volumes,
        })
    }

    /// Rearrange an analytic density, discretizing it on its support box
    /// with `cells_per_axis` cells per axis first.
    pub fn from_density(density: &AnalyticDensity, cells_per_axis: usize) -> Result<Self> {
        if density.dim() != 2 {
            return Err(CoreError::UnsupportedDimension {
                required: 2,
                actual: density.dim(),
            });
        }
        let (lo, hi) = density.support_box();
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let spacing = span / cells_per_axis as f64;
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let grid = GridDensity::from_density_fn(
            |x, y| density.density(&[x, y]),
            center,
            [spacing, spacing],
            [cells_per_axis, cells_per_axis],
        )?;
        Self::from_grid(&grid)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Superlevel volume `|L_v^+|` at tabulated level `values()[k]`.
    pub fn superlevel_volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn max_radius(&self) -> f64 {
        *self.radii.last().unwrap()
    }

    /// `p*(r)`: log-linear interpolation in `r^2`, zero beyond the last
    /// tabulated radius.
    pub fn value_at(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return self.values[0];
        }
        let n = self.radii.len();
        if r >= self.radii[n - 1] {
            return 0.0;
        }
        let k = self.radii.partition_point(|&t| t <= r);
        let (r0, r1) = (self.radii[k - 1], self.radii[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        let t = (r * r - r0 * r0) / (r1 * r1 - r0 * r0);
        (v0.ln() * (1.0 - t) + v1.ln() * t).exp()
    }

    /// Radial quadrature `int_0^R g(r) 2 pi r p*(r) dr` with each tabulated
    /// segment subdivided for accuracy.
    fn radial_integral(&self, g: impl Fn(f64) -> f64) -> f64 {
        const SUBDIV: usize = 16;
        let mut total = 0.0;
        for w in self.radii.windows(2) {
            let (r0, r1) = (w[0], w[1]);
            let h = (r1 - r0) / SUBDIV as f64;
            // Midpoint rule per sub-segment.
            for s in 0..SUBDIV {
                let r = r0 + (s as f64 + 0.5) * h;
                total += g(r) * 2.0 * std::f64::consts::PI * r * self.value_at(r) * h;
            }
        }
        total
    }

    /// `int p*` over the plane; 1 up to tabulation error.
    pub fn total_mass(&self) -> f64 {
        self.radial_integral(|_| 1.0)
    }

    /// Per-axis variance of the isotropic `p*`: `sigma^2` with
    /// `Sigma_{p*} = sigma^2 I`.
    pub fn second_moment_per_axis(&self) -> f64 {
        self.radial_integral(|r| r * r) / (2.0 * self.total_mass())
    }

    /// Optimal per-axis dilation `C = |Sigma_{p*}|^(-1/(2D)) = 1/sigma`.
    pub fn optimal_scale(&self) -> f64 {
        1.0 / self.second_moment_per_axis().sqrt()
    }

    /// `KL(p* || N(0, sigma2 I))` by radial quadrature.
    pub fn kl_to_isotropic_gaussian(&self, sigma2: f64) -> Result<f64> {
        if !(sigma2 > 0.0) {
            return Err(CoreError::InvalidParameter(
                "variance must be positive".into(),
            ));
        }
        let mass = self.total_mass();
        let kl = self.radial_integral(|r| {
            let p = self.value_at(r) / mass;
            p.ln() + LN_2PI + sigma2.ln() + 0.5 * r * r / sigma2
        }) / mass;
        if kl.is_finite() {
            Ok(kl)
        } else {
            Err(CoreError::QuadratureFailure(
                "radial KL integral did not converge".into(),
            ))
        }
    }

    /// The achievable-KL lower bound: distance from `p*` to the isotropic
    /// Gaussian with matched generalized variance.
    pub fn lower_bound_kl(&self) -> Result<BoundReport> {
        let sigma2 = self.second_moment_per_axis();
        let kl = self.kl_to_isotropic_gaussian(sigma2)?;
        Ok(BoundReport {
            kl_lower_bound: kl.max(0.0),
            optimal_scale: 1.0 / sigma2.sqrt(),
            sigma_det: sigma2 * sigma2,
        })
    }

    /// Draw samples from the rotationally symmetric density by inverse-CDF
    /// sampling of the radial law `2 pi r p*(r)`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        const SUBDIV: usize = 16;
        // Tabulate the radial CDF on the subdivided radius grid.
        let mut rs = vec![0.0];
        let mut cdf = vec![0.0];
        let mut acc = 0.0;
        for w in self.radii.windows(2) {
            let h = (w[1] - w[0]) / SUBDIV as f64;
            for s in 0..SUBDIV {
                let r_mid = w[0] + (s as f64 + 0.5) * h;
                acc += 2.0 * std::f64::consts::PI * r_mid * self.value_at(r_mid) * h;
                rs.push(w[0] + (s as f64 + 1.0) * h);
                cdf.push(acc);
            }
        }
        for c in &mut cdf {
            *c /= acc;
        }
        let mut out = vec![0.0; 2 * n];
        for p in out.chunks_exact_mut(2) {
            let u: f64 = rng.random();
            let k = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let (c0, c1) = (cdf[k - 1], cdf[k]);
            let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
            let r = rs[k - 1] + t * (rs[k] - rs[k - 1]);
            let phi = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            p[0] = r * phi.cos();
            p[1] = r * phi.sin();
        }
        out
    }
}

/// Lower-bound summary for a target under volume-preserving transport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    /// `KL(p* || N(0, |Sigma|^(1/D) I))`; no volume-preserving flow with a
    /// standard-normal latent can do better.
    pub kl_lower_bound: f64,
    /// The loss-minimizing global dilation `C = |Sigma|^(-1/(2D))`.
    pub optimal_scale: f64,
    /// Generalized variance `|Sigma_{p*}|`.
    pub sigma_det: f64,
}

// ── Counterexample bounds ───────────────────────────────────────────────

/// Which case of the plateau-density argument produced a bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundCase {
    /// The model never exceeds `plateau - epsilon` (the near-plateau set is
    /// empty at this Jacobian value).
    EmptySet,
    /// The near-plateau set is a disc image with bounded area.
    BoundedArea,
}

/// Per-Jacobian row of the counterexample sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterexampleRow {
    /// Constant Jacobian determinant probed.
    pub jacobian: f64,
    /// Area of the set where the model density can exceed `plateau - epsilon`.
    pub area: f64,
    pub case: BoundCase,
    /// KL lower bound at this Jacobian via Pinsker's inequality.
    pub bound: f64,
}

/// Lower bounds for the box counterexample across constant-Jacobian flows.
#[derive(Debug, Clone)]
pub struct CounterexampleBounds {
    pub epsilon: f64,
    /// Case-1 bound `2 epsilon^2`.
    pub case1_bound: f64,
    /// Case-2 bound `2 (epsilon (1 - 1/(e (0.9 - epsilon))))^2`.
    pub case2_bound: f64,
    /// Largest possible near-plateau area `1/(e (0.9 - epsilon))`.
    pub max_area: f64,
    /// Jacobian value attaining it, `2 pi e (0.9 - epsilon)`.
    pub argmax_jacobian: f64,
    /// The sweep over the requested Jacobian grid.
    pub rows: Vec<CounterexampleRow>,
    /// Minimum of the per-Jacobian bounds over the sweep.
    pub overall_bound: f64,
}

const PLATEAU: f64 = 0.9;

/// Evaluate the KL lower bounds of the plateau counterexample for every
/// Jacobian value in `j_grid`. The model density can exceed
/// `plateau - epsilon` only on a set of area
/// `|A|(J) = (2 pi / J) ln(J / (2 pi (plateau - epsilon)))` (where positive),
/// leaving total-variation distance at least `epsilon (1 - |A|)` on the unit
/// plateau square; Pinsker turns that into `KL >= 2 (epsilon (1 - |A|))^2`.
pub fn counterexample_bounds(epsilon: f64, j_grid: &[f64]) -> Result<CounterexampleBounds> {
    if !(epsilon > 0.0 && epsilon < PLATEAU) {
        return Err(CoreError::InvalidParameter(format!(
            "epsilon must lie in (0, {PLATEAU})"
        )));
    }
    let gap = PLATEAU - epsilon;
    let case1 = 2.0 * epsilon * epsilon;
    let max_area = 1.0 / (std::f64::consts::E * gap);
    let case2 = 2.0 * (epsilon * (1.0 - max_area)).powi(2);
    let rows: Vec<CounterexampleRow> = j_grid
        .iter()
        .map(|&j| {
            let area = counterexample_area(epsilon, j);
            if area <= 0.0 {
                CounterexampleRow {
                    jacobian: j,
                    area: 0.0,
                    case: BoundCase::EmptySet,
                    bound: case1,
                }
            } else {
                CounterexampleRow {
                    jacobian: j,
                    area,
                    case: BoundCase::BoundedArea,
                    bound: 2.0 * (epsilon * (1.0 - area)).powi(2),
                }
            }
        })
        .collect();
    let overall = rows
        .iter()
        .map(|r| r.bound)
        .fold(f64::INFINITY, f64::min);
    Ok(CounterexampleBounds {
        epsilon,
        case1_bound: case1,
        case2_bound: case2,
        max_area,
        argmax_jacobian: 2.0 * std::f64::consts::PI * std::f64::consts::E * gap,
        rows,
        overall_bound: overall,
    })
}

/// Area of the near-plateau set at Jacobian `j`; nonpositive means empty.
pub fn counterexample_area(epsilon: f64, j: f64) -> f64 {
    let gap = PLATEAU - epsilon;
    (2.0 * std::f64::consts::PI / j) * (j / (2.0 * std::f64::consts::PI * gap)).ln()
}

/// Logarithmically spaced Jacobian grid on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (llo + (lhi - llo) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

// ── Modes and pushforwards ──────────────────────────────────────────────

/// Count the modes of a grid density: connected equal-mass plateaus (8-way
/// connectivity) all of whose in-grid neighbors carry strictly smaller mass.
pub fn count_modes(grid: &GridDensity) -> usize {
    let [nx, ny] = grid.extents();
    let masses = grid.masses();
    let mut visited = vec![false; masses.len()];
    let mut modes = 0;
    let mut stack = Vec::new();
    for start in 0..masses.len() {
        if visited[start] {
            continue;
        }
        // Flood-fill the plateau of exactly-equal masses containing `start`.
        let level = masses[start];
        let mut is_max = true;
        stack.push(start);
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            let (ix, iy) = (idx % nx, idx / nx);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (jx, jy) = (ix as i64 + dx, iy as i64 + dy);
                    if jx < 0 || jy < 0 || jx >= nx as i64 || jy >= ny as i64 {
                        continue;
                    }
                    let j = jy as usize * nx + jx as usize;
                    if masses[j] == level {
                        if !visited[j] {
                            visited[j] = true;
                            stack.push(j);
                        }
                    } else if masses[j] > level {
                        is_max = false;
                    }
                }
            }
        }
        if is_max && level > 0.0 {
            modes += 1;
        }
    }
    modes
}

/// Resample a grid density through an analytic measure-preserving map given
/// by its inverse: the pushforward density at `y` is the source density at
/// `inverse(y)` (unit Jacobian). Fails if more than 0.5% of the mass leaves
/// the grid.
pub fn pushforward_grid(
    grid: &GridDensity,
    inverse_map: impl Fn([f64; 2]) -> [f64; 2] + Sync,
) -> Result<GridDensity> {
    let [nx, ny] = grid.extents();
    let origin = grid.origin();
    let spacing = grid.spacing();
    let vol = grid.cell_volume();
    let mut masses = vec![0.0; nx * ny];
    masses.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        let y = origin[1] + (iy as f64 + 0.5) * spacing[1];
        for (ix, m) in row.iter_mut().enumerate() {
            let x = origin[0] + (ix as f64 + 0.5) * spacing[0];
            *m = grid.density_at(inverse_map([x, y])) * vol;
        }
    });
    let total: f64 = masses.iter().sum();
    if total < 0.995 {
        return Err(CoreError::MassLoss {
            lost_fraction: (1.0 - total) * 100.0,
        });
    }
    GridDensity::from_parts(origin, spacing, grid.extents(), masses)
}

/// Inverse of the vertical shear `(x, y) -> (x, y + c x)`.
pub fn shear_inverse(c: f64) -> impl Fn([f64; 2]) -> [f64; 2] {
    move |p| [p[0], p[1] - c * p[0]]
}

/// Inverse of the rotation by `angle`.
pub fn rotation_inverse(angle: f64) -> impl Fn([f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    move |p| [c * p[0] + s * p[1], -s * p[0] + c * p[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::discretize;
    use crate::numeric::rng::substream;

    fn two_cell_grid(masses: [f64; 2]) -> GridDensity {
        GridDensity::from_parts([0.0, 0.0], [1.0, 1.0], [2, 1], masses.to_vec()).unwrap()
    }

    #[test]
    fn two_cell_toy_matches_brute_force() {
        let source = two_cell_grid([0.9, 0.1]);
        let latent = two_cell_grid([0.3, 0.7]);
        let map = sorted_grid_map(source.clone(), latent.clone()).unwrap();
        assert_eq!(map.permutation(), &[1, 0]);
        let kl = map.discrete_mass_kl();
        let expect = 0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.11632).abs() < 1e-4);
        // Brute force over both permutations confirms the minimum.
        let other = discrete_kl_for_perm(source.masses(), latent.masses(), &[0, 1]);
        assert!(kl < other);
    }

    #[test]
    fn identical_grids_give_zero_kl() {
        let d = AnalyticDensity::bimodal_gmm();
        let g = discretize(&d, [0.0, 0.0], [0.05, 0.05], [80, 80]).unwrap();
        let map = sorted_grid_map(g.clone(), g).unwrap();
        assert!(map.discrete_mass_kl().abs() < 1e-12);
    }

    #[test]
    fn sorted_assignment_beats_random_permutations() {
        let d = AnalyticDensity::bimodal_gmm();
        let source = discretize(&d, [0.0, 0.0], [0.2, 0.2], [20, 20]).unwrap();
        let latent = standard_normal_grid(&source).unwrap();
        let map = sorted_grid_map(source.clone(), latent.clone()).unwrap();
        let sorted_kl = map.discrete_mass_kl();
        let mut rng = substream(31, 0);
        let n = source.n_cells();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        for _ in 0..100 {
            // Fisher-Yates shuffle.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let kl = discrete_kl_for_perm(source.masses(), latent.masses(), &perm);
            assert!(kl >= sorted_kl - 1e-12);
        }
    }

    #[test]
    fn sorted_assignment_is_exhaustively_optimal_on_tiny_grids() {
        let source = GridDensity::from_parts(
            [0.0, 0.0],
            [1.0, 1.0],
            [3, 2],
            vec![0.05, 0.3, 0.02, 0.4, 0.03, 0.2],
        )
        .unwrap();
        let latent = GridDensity::from_parts(
            [0.0, 0.0],
            [1.0, 1.0],
            [3, 2],
            vec![0.1, 0.15, 0.3, 0.05, 0.25, 0.15],
        )
        .unwrap();
        let best = sorted_grid_map(source.clone(), latent.clone())
            .unwrap()
            .discrete_mass_kl();
        // All 6! assignments.
        let mut perm: Vec<u32> = (0..6).collect();
        let mut min_kl = f64::INFINITY;
        permutohedron_heap(&mut perm, &mut |p: &[u32]| {
            let kl = discrete_kl_for_perm(source.masses(), latent.masses(), p);
            if kl < min_kl {
                min_kl = kl;
            }
        });
        assert!((best - min_kl).abs() < 1e-12, "{best} vs exhaustive {min_kl}");
    }

    /// Heap's algorithm, enough for the 6-cell exhaustive check.
    fn permutohedron_heap(items: &mut Vec<u32>, visit: &mut impl FnMut(&[u32])) {
        fn inner(k: usize, items: &mut Vec<u32>, visit: &mut impl FnMut(&[u32])) {
            if k == 1 {
                visit(items);
                return;
            }
            for i in 0..k {
                inner(k - 1, items, visit);
                if k % 2 == 0 {
                    items.swap(i, k - 1);
                } else {
                    items.swap(0, k - 1);
                }
            }
        }
        let n = items.len();
        inner(n, items, visit);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = two_cell_grid([0.5, 0.5]);
        let b = GridDensity::from_parts([0.0, 0.0], [1.0, 1.0], [3, 1], vec![0.2, 0.3, 0.5])
            .unwrap();
        assert!(matches!(
            sorted_grid_map(a.clone(), b),
            Err(CoreError::GridMismatch(_))
        ));
        let c = GridDensity::from_parts([0.0, 0.0], [0.5, 0.5], [2, 1], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            sorted_grid_map(a, c),
            Err(CoreError::GridMismatch(_))
        ));
    }

    #[test]
    fn radial_profile_of_standard_normal_is_fixed_point() {
        let d = AnalyticDensity::standard_normal(2);
        let profile = RadialProfile::from_density(&d, 800).unwrap();
        // p*(r) = (1/2pi) exp(-r^2/2) within 1%.
        for r in [0.0f64, 0.5, 1.0, 2.0, 3.0] {
            let exact = (-0.5 * r * r).exp() / (2.0 * std::f64::consts::PI);
            let got = profile.value_at(r);
            assert!(
                (got - exact).abs() / exact < 0.01,
                "p*({r}) = {got} vs {exact}"
            );
        }
        assert!((profile.total_mass() - 1.0).abs() < 1e-3);
        let report = profile.lower_bound_kl().unwrap();
        assert!(report.kl_lower_bound < 1e-3, "bound {}", report.kl_lower_bound);
        assert!((report.optimal_scale - 1.0).abs() < 1e-3);
    }

    #[test]
    fn radial_profile_of_anisotropic_gaussian() {
        // For N(0, diag(1, 4)) the superlevel sets are ellipses of area
        // 2 pi sqrt(|Sigma|) ln(p_max / v), so p* = N(0, 2 I) exactly.
        let d = AnalyticDensity::gaussian(
            vec![0.0, 0.0],
            nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]),
        )
        .unwrap();
        let profile = RadialProfile::from_density(&d, 1000).unwrap();
        let p_max = 1.0 / (4.0 * std::f64::consts::PI);
        assert!((profile.value_at(0.0) - p_max).abs() / p_max < 0.01);
        // Superlevel volumes match the ellipse-area oracle within 2%.
        for (k, (&v, &vol)) in profile
            .values()
            .iter()
            .zip(profile.superlevel_volumes())
            .enumerate()
        {
            if k == 0 || v < p_max * 1e-5 {
                continue;
            }
            let oracle = 2.0 * std::f64::consts::PI * 2.0 * (p_max / v).ln();
            if oracle > 0.5 {
                assert!(
                    (vol - oracle).abs() / oracle < 0.02,
                    "level {v}: volume {vol} vs {oracle}"
                );
            }
        }
        // p* is the matched Gaussian itself: the bound collapses to zero and
        // both quadrature routes must agree near zero in absolute terms.
        let report = profile.lower_bound_kl().unwrap();
        assert!((report.optimal_scale - 1.0 / 2f64.sqrt()).abs() < 2e-3);
        assert!(report.kl_lower_bound < 1e-3, "bound {}", report.kl_lower_bound);
        let sigma2 = profile.second_moment_per_axis();
        assert!((sigma2 - 2.0).abs() < 0.01);
        // Independent 2D-grid route for KL(p* || N(0, 2I)).
        let grid_kl = {
            let g = discretize(&d, [0.0, 0.0], [0.02, 0.02], [1000, 1000]).unwrap();
            let p = RadialProfile::from_grid(&g).unwrap();
            p.kl_to_isotropic_gaussian(2.0).unwrap()
        };
        assert!(
            (grid_kl - report.kl_lower_bound).abs() < 1e-3,
            "grid route {grid_kl} vs radial {}",
            report.kl_lower_bound
        );
    }

    #[test]
    fn optimal_scale_formula_cases() {
        // p* = N(0, I): |Sigma| = 1, C = 1. p* = N(0, 4I): |Sigma| = 16, C = 1/2.
        let std2 = AnalyticDensity::standard_normal(2);
        let p1 = RadialProfile::from_density(&std2, 800).unwrap();
        assert!((p1.optimal_scale() - 1.0).abs() < 1e-3);
        let wide = AnalyticDensity::gaussian(
            vec![0.0, 0.0],
            nalgebra::DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 4.0]),
        )
        .unwrap();
        let p4 = RadialProfile::from_density(&wide, 800).unwrap();
        assert!((p4.optimal_scale() - 0.5).abs() < 1e-3);
        let report = p4.lower_bound_kl().unwrap();
        assert!((report.sigma_det - 16.0).abs() < 0.2);
    }

    #[test]
    fn scale_formula_minimizes_model_kl() {
        // Evaluate KL(p* || N(0, C^{-2} I)) on a grid of C around the formula
        // value; the formula value must be the minimizer.
        let d = AnalyticDensity::bimodal_gmm();
        let profile = RadialProfile::from_density(&d, 600).unwrap();
        let c_star = profile.optimal_scale();
        let kl_at = |c: f64| profile.kl_to_isotropic_gaussian(1.0 / (c * c)).unwrap();
        let base = kl_at(c_star);
        for f in [0.8, 0.9, 0.95, 1.05, 1.1, 1.25] {
            assert!(
                kl_at(c_star * f) >= base - 1e-9,
                "C = {c_star} * {f} beats the formula"
            );
        }
    }

    #[test]
    fn rearrangement_is_idempotent() {
        let d = AnalyticDensity::bimodal_gmm();
        let profile = RadialProfile::from_density(&d, 600).unwrap();
        // Build a grid from p* and rearrange again.
        let span = 2.0 * profile.max_radius();
        let spacing = span / 600.0;
        let grid = GridDensity::from_density_fn(
            |x, y| profile.value_at((x * x + y * y).sqrt()),
            [0.0, 0.0],
            [spacing, spacing],
            [600, 600],
        )
        .unwrap();
        let again = RadialProfile::from_grid(&grid).unwrap();
        for r in [0.2, 0.5, 0.8, 1.2] {
            let a = profile.value_at(r);
            let b = again.value_at(r);
            assert!(
                (a - b).abs() / a.max(1e-12) < 0.03,
                "p*({r}): {a} vs rearranged {b}"
            );
        }
    }

    #[test]
    fn counterexample_reference_values() {
        let grid = log_grid(1e-3, 1e3, 200);
        let b = counterexample_bounds(0.1, &grid).unwrap();
        assert!((b.case1_bound - 0.02).abs() < 1e-15);
        assert!((b.case2_bound - 0.005836).abs() < 1e-6);
        assert!((b.max_area - 0.4598493).abs() < 1e-6);
        assert!((b.argmax_jacobian - 13.6635748).abs() < 1e-6);
        assert!(b.overall_bound >= 0.0058);
        // Grid maximum of the area agrees with the closed form.
        let grid_max = b.rows.iter().map(|r| r.area).fold(0.0, f64::max);
        assert!((grid_max - b.max_area).abs() < 1e-3);
        for row in &b.rows {
            assert!(row.bound >= 0.0058);
            assert!(row.bound <= b.case1_bound + 1e-15);
        }
    }

    #[test]
    fn counterexample_rejects_bad_epsilon() {
        assert!(counterexample_bounds(0.0, &[1.0]).is_err());
        assert!(counterexample_bounds(0.9, &[1.0]).is_err());
    }

    #[test]
    fn mode_counting_on_reference_grids() {
        let bimodal = discretize(
            &AnalyticDensity::bimodal_gmm(),
            [0.0, 0.0],
            [0.01, 0.01],
            [400, 400],
        )
        .unwrap();
        assert_eq!(count_modes(&bimodal), 2);
        let normal = discretize(
            &AnalyticDensity::standard_normal(2),
            [0.0, 0.0],
            [0.05, 0.05],
            [200, 200],
        )
        .unwrap();
        assert_eq!(count_modes(&normal), 1);
        // A plateau is a single mode even though it spans many cells.
        let uniform = discretize(
            &AnalyticDensity::box_counterexample(0.9).unwrap(),
            [0.0, 0.0],
            [0.05, 0.05],
            [24, 24],
        )
        .unwrap();
        assert_eq!(count_modes(&uniform), 1);
    }

    #[test]
    fn pushforward_preserves_modes() {
        let bimodal = discretize(
            &AnalyticDensity::bimodal_gmm(),
            [0.0, 0.0],
            [0.01, 0.01],
            [400, 400],
        )
        .unwrap();
        let sheared = pushforward_grid(&bimodal, shear_inverse(0.7)).unwrap();
        assert_eq!(count_modes(&sheared), 2);
        let rotated = pushforward_grid(&bimodal, rotation_inverse(0.5235987755982988)).unwrap();
        assert_eq!(count_modes(&rotated), 2);
        let identity = pushforward_grid(&bimodal, |p| p).unwrap();
        let worst = identity
            .masses()
            .iter()
            .zip(bimodal.masses())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn pushforward_detects_mass_loss() {
        let tight = discretize(
            &AnalyticDensity::bimodal_gmm(),
            [0.0, 0.0],
            [0.0105, 0.0105],
            [381, 381],
        )
        .unwrap();
        // Shift everything far off-grid.
        let err = pushforward_grid(&tight, |p| [p[0] - 10.0, p[1]]).unwrap_err();
        assert!(matches!(err, CoreError::MassLoss { .. }));
    }

    #[test]
    fn transported_sample_covariance_matches_formula_scale() {
        let d = AnalyticDensity::bimodal_gmm();
        let source = discretize(&d, [0.0, 0.0], [0.01, 0.01], [400, 400]).unwrap();
        let latent = standard_normal_grid(&source).unwrap();
        let map = sorted_grid_map(source, latent).unwrap();
        let c_formula = map.optimal_scale_from_covariance();
        // Empirical-covariance route: transport 4096 samples (undilated map)
        // and compute their covariance.
        let xs = d.sample(4096, 2024).unwrap();
        let mut pts = Vec::with_capacity(4096);
        for p in xs.chunks_exact(2) {
            if let Some(q) = map.transport([p[0], p[1]]) {
                pts.push(q);
            }
        }
        assert!(pts.len() > 4000);
        let n = pts.len() as f64;
        let mean = pts
            .iter()
            .fold([0.0f64; 2], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n]);
        let mut cov = [[0.0f64; 2]; 2];
        for p in &pts {
            let dx = p[0] - mean[0];
            let dy = p[1] - mean[1];
            cov[0][0] += dx * dx / n;
            cov[0][1] += dx * dy / n;
            cov[1][1] += dy * dy / n;
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
        let c_emp = det.powf(-0.25);
        assert!(
            (c_emp - c_formula).abs() / c_formula < 0.02,
            "empirical {c_emp} vs formula {c_formula}"
        );
    }
}
