//! Invertible coupling blocks and composed flows.
//!
//! A block rotates the plane by `Q` in `SO(2)`, then applies an affine map to
//! the active coordinate whose scale and shift are spline functions of the
//! passive coordinate. Damping mixes the coupling output with its input,
//! `a~ = damping (s(b) a + t(b)) + (1 - damping) a`, so the effective scale is
//! `damping s(b) + (1 - damping)`, clamped into `[1/L, L]`. Rotations are
//! applied undamped; the convex mix of a rotation with the identity would not
//! stay invertible. Log-determinants accumulate as the sum of log effective
//! scales; rotations contribute zero.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::densities::AnalyticDensity;
use crate::error::{CoreError, Result};
use crate::numeric::spline::CubicSpline;

/// An element of `SO(D)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationLayer {
    dim: usize,
    mat: Vec<f64>,
}

impl RotationLayer {
    pub fn identity(dim: usize) -> Self {
        let mut mat = vec![0.0; dim * dim];
        for i in 0..dim {
            mat[i * dim + i] = 1.0;
        }
        Self { dim, mat }
    }

    /// Planar rotation by `angle`.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            dim: 2,
            mat: vec![c, -s, s, c],
        }
    }

    /// Haar-distributed rotation: QR of a Gaussian matrix with the sign fix
    /// of Mezzadri, then a reflection correction to land in `SO(D)`.
    pub fn haar(dim: usize, rng: &mut impl Rng) -> Self {
        use rand_distr::StandardNormal;
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = g.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..dim {
            if r[(j, j)] < 0.0 {
                for i in 0..dim {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        if q.determinant() < 0.0 {
            for i in 0..dim {
                q[(i, 0)] = -q[(i, 0)];
            }
        }
        let mut mat = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                mat[i * dim + j] = q[(i, j)];
            }
        }
        Self { dim, mat }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix_row_major(&self) -> &[f64] {
        &self.mat
    }

    pub fn from_matrix_row_major(dim: usize, mat: Vec<f64>) -> Result<Self> {
        if mat.len() != dim * dim {
            return Err(CoreError::InvalidParameter(
                "rotation matrix has wrong size".into(),
            ));
        }
        let q = Self { dim, mat };
        if q.orthogonality_error() > 1e-9 || (q.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::InvalidParameter(
                "matrix is not special orthogonal".into(),
            ));
        }
        Ok(q)
    }

    /// Rotation angle for D = 2.
    pub fn angle(&self) -> Option<f64> {
        (self.dim == 2).then(|| self.mat[2].atan2(self.mat[0]))
    }

    /// `y = Q x`.
    pub fn apply(&self, x: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim;
        if d == 2 {
            let (a, b) = (x[0], x[1]);
            x[0] = self.mat[0] * a + self.mat[1] * b;
            x[1] = self.mat[2] * a + self.mat[3] * b;
            return;
        }
        scratch.copy_from_slice(x);
        for i in 0..d {
            let row = &self.mat[i * d..(i + 1) * d];
            x[i] = row.iter().zip(scratch.iter()).map(|(m, v)| m * v).sum();
        }
    }

    /// `x = Q^T y`.
    pub fn apply_transpose(&self, y: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim;
        if d == 2 {
            let (a, b) = (y[0], y[1]);
            y[0] = self.mat[0] * a + self.mat[2] * b;
            y[1] = self.mat[1] * a + self.mat[3] * b;
            return;
        }
        scratch.copy_from_slice(y);
        for i in 0..d {
            y[i] = (0..d).map(|j| self.mat[j * d + i] * scratch[j]).sum();
        }
    }

    /// Largest elementwise deviation of `Q^T Q` from the identity.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| self.mat[k * d + i] * self.mat[k * d + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn determinant(&self) -> f64 {
        DMatrix::from_row_slice(self.dim, self.dim, &self.mat).determinant()
    }
}

/// Scale/shift conditioner: natural cubic splines through per-bin knots over
/// the passive coordinate, constant outside the knot range.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineConditioner {
    centers: Vec<f64>,
    scale_knots: Vec<f64>,
    shift_knots: Vec<f64>,
    scale: CubicSpline,
    shift: CubicSpline,
}

impl SplineConditioner {
    pub fn new(centers: Vec<f64>, scale_knots: Vec<f64>, shift_knots: Vec<f64>) -> Result<Self> {
        if scale_knots.iter().any(|&s| !(s > 0.0)) {
            return Err(CoreError::InvalidParameter(
                "scale knots must be positive".into(),
            ));
        }
        let scale = CubicSpline::natural(centers.clone(), scale_knots.clone())?;
        let shift = CubicSpline::natural(centers.clone(), shift_knots.clone())?;
        Ok(Self {
            centers,
            scale_knots,
            shift_knots,
            scale,
            shift,
        })
    }

    /// Conditioner for the identity coupling.
    pub fn identity() -> Self {
        Self::new(vec![-1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]).expect("valid knots")
    }

    /// Constant `(s, t)` conditioner.
    pub fn constant(s: f64, t: f64) -> Result<Self> {
        Self::new(vec![-1.0, 1.0], vec![s, s], vec![t, t])
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn scale_knots(&self) -> &[f64] {
        &self.scale_knots
    }

    pub fn shift_knots(&self) -> &[f64] {
        &self.shift_knots
    }

    /// Raw `(s(b), t(b))` before damping and clamping.
    pub fn eval(&self, b: f64) -> (f64, f64) {
        (self.scale.eval(b), self.shift.eval(b))
    }
}

/// Rotation followed by a damped, Lipschitz-clamped affine coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    rotation: RotationLayer,
    conditioner: SplineConditioner,
    damping: f64,
    lipschitz: f64,
}

impl CouplingBlock {
    pub fn new(
        rotation: RotationLayer,
        conditioner: SplineConditioner,
        damping: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        if rotation.dim() != 2 {
            return Err(CoreError::UnsupportedDimension {
                required: 2,
                actual: rotation.dim(),
            });
        }
        if !(damping > 0.0 && damping <= 1.0) {
            return Err(CoreError::InvalidParameter(
                "damping must lie in (0, 1]".into(),
            ));
        }
        if !(lipschitz > 1.0) {
            return Err(CoreError::InvalidParameter(
                "Lipschitz bound must exceed 1".into(),
            ));
        }
        Ok(Self {
            rotation,
            conditioner,
            damping,
            lipschitz,
        })
    }

    /// Identity block: unit rotation, unit scale, zero shift.
    pub fn identity() -> Self {
        Self::new(
            RotationLayer::identity(2),
            SplineConditioner::identity(),
            1.0,
            20.0,
        )
        .expect("valid block")
    }

    pub fn rotation(&self) -> &RotationLayer {
        &self.rotation
    }

    pub fn conditioner(&self) -> &SplineConditioner {
        &self.conditioner
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Damped and clamped `(scale, shift)` actually applied at passive value `b`.
    pub fn effective_params(&self, b: f64) -> (f64, f64) {
        let (s_raw, t_raw) = self.conditioner.eval(b);
        let s = (self.damping * s_raw + (1.0 - self.damping))
            .clamp(1.0 / self.lipschitz, self.lipschitz);
        (s, self.damping * t_raw)
    }

    /// In-place forward map; returns the log-determinant contribution.
    pub fn forward_in_place(&self, x: &mut [f64; 2]) -> f64 {
        self.rotation.apply(x, &mut []);
        let (s, t) = self.effective_params(x[0]);
        x[1] = s * x[1] + t;
        s.ln()
    }

    /// In-place inverse map; returns the log-determinant contribution of the
    /// inverse (the negated forward contribution).
    pub fn inverse_in_place(&self, z: &mut [f64; 2]) -> f64 {
        let (s, t) = self.effective_params(z[0]);
        z[1] = (z[1] - t) / s;
        self.rotation.apply_transpose(z, &mut []);
        -s.ln()
    }
}

/// An ordered stack of coupling blocks acting on the plane.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Flow {
    blocks: Vec<CouplingBlock>,
}

impl Flow {
    pub fn empty() -> Self {
        Self { blocks: Vec::new() }
    }

    pub fn from_blocks(blocks: Vec<CouplingBlock>) -> Self {
        Self { blocks }
    }

    pub fn push(&mut self, block: CouplingBlock) {
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `z = f(x)` with the accumulated log-determinant.
    pub fn forward(&self, x: [f64; 2]) -> Result<([f64; 2], f64)> {
        let mut p = x;
        let mut logdet = 0.0;
        for (i, block) in self.blocks.iter().enumerate() {
            logdet += block.forward_in_place(&mut p);
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(CoreError::NonFinite { block: i });
            }
        }
        Ok((p, logdet))
    }

    /// `x = f^{-1}(z)` with the log-determinant of the inverse.
    pub fn inverse(&self, z: [f64; 2]) -> Result<([f64; 2], f64)> {
        let mut p = z;
        let mut logdet = 0.0;
        for (i, block) in self.blocks.iter().enumerate().rev() {
            logdet += block.inverse_in_place(&mut p);
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(CoreError::NonFinite { block: i });
            }
        }
        Ok((p, logdet))
    }

    /// Push a flat row-major batch through the flow in place, adding each
    /// point's log-determinant into `logdets` when provided.
    pub fn forward_batch_in_place(
        &self,
        points: &mut [f64],
        logdets: Option<&mut [f64]>,
    ) -> Result<()> {
        debug_assert_eq!(points.len() % 2, 0);
        const PAR_CHUNK: usize = 4096;
        match logdets {
            Some(lds) => {
                debug_assert_eq!(lds.len() * 2, points.len());
                points
                    .par_chunks_mut(2 * PAR_CHUNK)
                    .zip(lds.par_chunks_mut(PAR_CHUNK))
                    .try_for_each(|(chunk, lds)| self.forward_chunk(chunk, Some(lds)))
            }
            None => points
                .par_chunks_mut(2 * PAR_CHUNK)
                .try_for_each(|chunk| self.forward_chunk(chunk, None)),
        }
    }

    fn forward_chunk(&self, chunk: &mut [f64], mut lds: Option<&mut [f64]>) -> Result<()> {
        for (j, slot) in chunk.chunks_exact_mut(2).enumerate() {
            let p: &mut [f64; 2] = slot.try_into().unwrap();
            let mut logdet = 0.0;
            for (i, block) in self.blocks.iter().enumerate() {
                logdet += block.forward_in_place(p);
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(CoreError::NonFinite { block: i });
                }
            }
            if let Some(lds) = lds.as_deref_mut() {
                lds[j] += logdet;
            }
        }
        Ok(())
    }

    /// `ln p_theta(x) = ln p(f(x)) + ln |f'(x)|`.
    pub fn model_log_density(&self, latent: &AnalyticDensity, x: [f64; 2]) -> Result<f64> {
        let (z, logdet) = self.forward(x)?;
        Ok(latent.log_density(&z) + logdet)
    }
}

/// Log-determinant of a block's Jacobian from central finite differences.
/// Test oracle for the analytic accumulation; not used on any training path.
pub fn logdet_fd_check(block: &CouplingBlock, x: [f64; 2], h: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(CoreError::InvalidParameter(
            "finite-difference step must lie in [1e-6, 1e-3]".into(),
        ));
    }
    let eval = |p: [f64; 2]| {
        let mut q = p;
        block.forward_in_place(&mut q);
        q
    };
    let mut jac = [[0.0f64; 2]; 2];
    for j in 0..2 {
        let mut plus = x;
        let mut minus = x;
        plus[j] += h;
        minus[j] -= h;
        let (fp, fm) = (eval(plus), eval(minus));
        for i in 0..2 {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(CoreError::SingularJacobian);
    }
    Ok(det.abs().ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::substream;

    fn example_block(damping: f64) -> CouplingBlock {
        CouplingBlock::new(
            RotationLayer::identity(2),
            SplineConditioner::constant(2.0, 1.0).unwrap(),
            damping,
            20.0,
        )
        .unwrap()
    }

    /// A smooth non-trivial block for round-trip and Jacobian tests.
    fn wavy_block(angle: f64) -> CouplingBlock {
        let centers: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let scale: Vec<f64> = centers.iter().map(|b| 1.0 + 0.5 * (1.3 * b).sin().abs()).collect();
        let shift: Vec<f64> = centers.iter().map(|b| 0.7 * (0.9 * b).cos()).collect();
        CouplingBlock::new(
            RotationLayer::from_angle(angle),
            SplineConditioner::new(centers, scale, shift).unwrap(),
            0.8,
            20.0,
        )
        .unwrap()
    }

    #[test]
    fn undamped_block_matches_affine_form() {
        let block = example_block(1.0);
        let mut p = [3.0, 5.0];
        let logdet = block.forward_in_place(&mut p);
        assert_eq!(p, [3.0, 11.0]);
        assert!((logdet - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn damped_block_mixes_identity_and_coupling() {
        let block = example_block(0.5);
        let mut p = [3.0, 5.0];
        let logdet = block.forward_in_place(&mut p);
        // 0.5 (2 * 5 + 1) + 0.5 * 5 = 8, scale 0.5 * 2 + 0.5 = 1.5.
        assert!((p[1] - 8.0).abs() < 1e-15);
        assert!((logdet - 1.5f64.ln()).abs() < 1e-15);
        let mut z = [3.0, 8.0];
        block.inverse_in_place(&mut z);
        assert!((z[0] - 3.0).abs() < 1e-15 && (z[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identity_conditioner_only_rotates() {
        let q = RotationLayer::from_angle(0.7);
        let block =
            CouplingBlock::new(q.clone(), SplineConditioner::identity(), 1.0, 20.0).unwrap();
        let mut p = [1.0, 2.0];
        let logdet = block.forward_in_place(&mut p);
        let mut expect = [1.0, 2.0];
        q.apply(&mut expect, &mut []);
        assert_eq!(p, expect);
        assert_eq!(logdet, 0.0);
    }

    #[test]
    fn scale_clamped_to_lipschitz_band() {
        // sigma = 100 yields knot s = 1/100; undamped effective scale clamps at 1/L.
        let cond = SplineConditioner::constant(0.01, 0.0).unwrap();
        let block =
            CouplingBlock::new(RotationLayer::identity(2), cond, 1.0, 20.0).unwrap();
        let (s, _) = block.effective_params(0.0);
        assert_eq!(s, 1.0 / 20.0);
    }

    #[test]
    fn empty_flow_is_identity() {
        let f = Flow::empty();
        let (z, logdet) = f.forward([0.3, -0.8]).unwrap();
        assert_eq!(z, [0.3, -0.8]);
        assert_eq!(logdet, 0.0);
        let latent = AnalyticDensity::standard_normal(2);
        let lp = f.model_log_density(&latent, [0.0, 0.0]).unwrap();
        assert!((lp + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn hundred_block_round_trip() {
        let blocks: Vec<CouplingBlock> =
            (0..100).map(|i| wavy_block(0.37 * i as f64)).collect();
        let flow = Flow::from_blocks(blocks);
        let mut rng = substream(21, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let x = [
                rng.random_range(-2.0..2.0f64),
                rng.random_range(-2.0..2.0f64),
            ];
            let (z, ld) = flow.forward(x).unwrap();
            let (back, ld_inv) = flow.inverse(z).unwrap();
            worst = worst.max((back[0] - x[0]).abs().max((back[1] - x[1]).abs()));
            assert!((ld + ld_inv).abs() < 1e-9);
        }
        assert!(worst < 1e-8, "round-trip error {worst}");
    }

    #[test]
    fn logdet_fd_matches_analytic_on_example_block() {
        let block = example_block(0.5);
        let fd = logdet_fd_check(&block, [3.0, 5.0], 1e-5).unwrap();
        assert!((fd - 1.5f64.ln()).abs() < 1e-6);
        let rot_only = CouplingBlock::new(
            RotationLayer::from_angle(1.1),
            SplineConditioner::identity(),
            1.0,
            20.0,
        )
        .unwrap();
        let fd = logdet_fd_check(&rot_only, [0.4, -0.2], 1e-5).unwrap();
        assert!(fd.abs() < 1e-8);
    }

    #[test]
    fn logdet_fd_matches_analytic_on_wavy_blocks() {
        let mut rng = substream(5, 0);
        for i in 0..20 {
            let block = wavy_block(0.511 * i as f64);
            for _ in 0..100 {
                let x = [
                    rng.random_range(-2.5..2.5f64),
                    rng.random_range(-2.5..2.5f64),
                ];
                let (s, _) = {
                    let mut y = x;
                    block.rotation().apply(&mut y, &mut []);
                    block.effective_params(y[0])
                };
                let fd = logdet_fd_check(&block, x, 1e-5).unwrap();
                assert!(
                    (fd - s.ln()).abs() < 1e-5,
                    "block {i}: fd {fd} vs analytic {}",
                    s.ln()
                );
            }
        }
    }

    #[test]
    fn rotation_preserves_norm_and_is_special_orthogonal() {
        let mut rng = substream(2, 9);
        for dim in [2usize, 3, 5] {
            let q = RotationLayer::haar(dim, &mut rng);
            assert!(q.orthogonality_error() < 1e-12);
            assert!((q.determinant() - 1.0).abs() < 1e-12);
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0f64)).collect();
            let norm0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut scratch = vec![0.0; dim];
            q.apply(&mut v, &mut scratch);
            let norm1: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm0 - norm1).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_forward_matches_pointwise() {
        let flow = Flow::from_blocks((0..7).map(|i| wavy_block(0.9 * i as f64)).collect());
        let mut rng = substream(3, 3);
        let n = 10_000;
        let mut batch: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-2.0..2.0f64)).collect();
        let reference: Vec<f64> = batch.clone();
        let mut lds = vec![0.0; n];
        flow.forward_batch_in_place(&mut batch, Some(&mut lds)).unwrap();
        for k in (0..n).step_by(997) {
            let x = [reference[2 * k], reference[2 * k + 1]];
            let (z, ld) = flow.forward(x).unwrap();
            assert_eq!([batch[2 * k], batch[2 * k + 1]], z);
            assert_eq!(lds[k], ld);
        }
    }

    #[test]
    fn pushforward_density_integrates_to_one() {
        // Change of variables conserves mass for any single block.
        let block = wavy_block(0.6);
        let flow = Flow::from_blocks(vec![block]);
        let latent = AnalyticDensity::standard_normal(2);
        let mass = crate::numeric::quadrature::integrate_2d(
            &|x, y| flow.model_log_density(&latent, [x, y]).unwrap().exp(),
            [-9.0, -9.0],
            [9.0, 9.0],
            1e-6,
        )
        .unwrap();
        assert!((mass - 1.0).abs() < 1e-3, "mass = {mass}");
    }

    #[test]
    fn model_density_matches_fd_jacobian_route() {
        let block = example_block(0.5);
        let flow = Flow::from_blocks(vec![block.clone()]);
        let latent = AnalyticDensity::standard_normal(2);
        for x in [[0.2, 0.4], [-1.0, 0.3], [1.5, -2.0]] {
            let analytic = flow.model_log_density(&latent, x).unwrap();
            let (z, _) = flow.forward(x).unwrap();
            let fd = latent.log_density(&z) + logdet_fd_check(&block, x, 1e-5).unwrap();
            assert!((analytic - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_input_reports_block_index() {
        let flow = Flow::from_blocks(vec![wavy_block(0.0), wavy_block(1.0)]);
        let err = flow.forward([f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { block: 0 }));
    }
}
