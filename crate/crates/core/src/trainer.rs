//! Greedy layer-wise flow construction from binned conditional moments.
//!
//! Each step rotates the current latent samples by candidate rotations, bins
//! them by the passive coordinate into equal-count bins, and reads off the
//! per-bin mean `m_j` and standard deviation `sigma_j` of the active
//! coordinate. The estimator
//!
//! ```text
//! delta_hat = 1/2 * avg_j [ m_j^2 + sigma_j^2 - 1 - ln sigma_j^2 ]
//! ```
//!
//! is the loss improvement a single undamped affine coupling block could
//! achieve at that rotation; it vanishes exactly when the latent distribution
//! is standard normal. The winning rotation's table becomes the next block
//! via spline knots `s_j = 1/sigma_j`, `t_j = -m_j/sigma_j` at the bin
//! centers. Fresh samples are drawn from the target before every step.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::densities::AnalyticDensity;
use crate::error::{CoreError, Result};
use crate::flow::{CouplingBlock, Flow, RotationLayer, SplineConditioner};
use crate::numeric::rng::{derive_seed, substream};
use crate::numeric::stats::{equal_count_bins, mean_with_se};

/// Cap on the number of samples used for the per-step KL estimate; fitting
/// always uses the full batch.
const KL_EVAL_MAX: usize = 1 << 17;

/// Hyperparameters of the greedy construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    /// Samples drawn (or reused) per step.
    pub n_samples: usize,
    /// Equal-count bins over the passive coordinate.
    pub bins: usize,
    /// Number of coupling blocks to append.
    pub n_blocks: usize,
    /// Step damping: fraction of the coupling output mixed into the update.
    pub damping: f64,
    /// Rotation candidates scored per step.
    pub n_rotations: usize,
    /// Bi-Lipschitz clamp for the effective scale.
    pub lipschitz: f64,
    pub seed: u64,
    /// Redraw training data from the target before every step.
    pub resample_each_step: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            n_samples: 1 << 18,
            bins: 64,
            n_blocks: 100,
            damping: 0.5,
            n_rotations: 10,
            lipschitz: 20.0,
            seed: 0,
            resample_each_step: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(CoreError::InvalidParameter("need at least 2 bins".into()));
        }
        if self.n_samples < 32 * self.bins {
            return Err(CoreError::InvalidParameter(format!(
                "need n_samples >= 32 * bins, got {} for {} bins",
                self.n_samples, self.bins
            )));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(CoreError::InvalidParameter(
                "damping must lie in (0, 1]".into(),
            ));
        }
        if self.n_rotations < 1 {
            return Err(CoreError::InvalidParameter(
                "need at least one rotation candidate".into(),
            ));
        }
        if !(self.lipschitz > 1.0) {
            return Err(CoreError::InvalidParameter(
                "Lipschitz bound must exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// Binned conditional moments of the active coordinate over the passive one.
#[derive(Debug, Clone)]
pub struct MomentTable {
    /// Bin boundaries (length `bins + 1`); outermost are the sample extremes.
    pub edges: Vec<f64>,
    /// Mean passive value per bin; the spline knot locations.
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
    /// Conditional means `m_j` of the active coordinate.
    pub means: Vec<f64>,
    /// Conditional standard deviations `sigma_j > 0`.
    pub stds: Vec<f64>,
}

impl MomentTable {
    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    /// `(mean term, variance term)` of the block-improvement estimator:
    /// `1/2 avg m^2` and `1/2 avg (sigma^2 - 1 - ln sigma^2)`.
    pub fn delta_terms(&self) -> (f64, f64) {
        let b = self.bins() as f64;
        let mut mean_term = 0.0;
        let mut var_term = 0.0;
        for (m, s) in self.means.iter().zip(&self.stds) {
            mean_term += m * m;
            let s2 = s * s;
            var_term += s2 - 1.0 - s2.ln();
        }
        (0.5 * mean_term / b, 0.5 * var_term / b)
    }

    pub fn delta_hat(&self) -> f64 {
        let (m, v) = self.delta_terms();
        m + v
    }
}

pub(crate) fn rotate_split(samples: &[f64], q: &RotationLayer) -> (Vec<f64>, Vec<f64>) {
    let m = q.matrix_row_major();
    let n = samples.len() / 2;
    let mut b = vec![0.0; n];
    let mut a = vec![0.0; n];
    for (k, p) in samples.chunks_exact(2).enumerate() {
        b[k] = m[0] * p[0] + m[1] * p[1];
        a[k] = m[2] * p[0] + m[3] * p[1];
    }
    (b, a)
}

fn table_from_split(b: &[f64], a: &[f64], bins: usize) -> Result<MomentTable> {
    let binned = equal_count_bins(b, bins)?;
    let mut edges = Vec::with_capacity(bins + 1);
    let mut centers = Vec::with_capacity(bins);
    let mut counts = Vec::with_capacity(bins);
    let mut means = Vec::with_capacity(bins);
    let mut stds = Vec::with_capacity(bins);
    edges.push(b[binned.order[0] as usize]);
    for (j, &(start, end)) in binned.ranges.iter().enumerate() {
        let idx = &binned.order[start..end];
        let count = idx.len();
        let mut b_sum = 0.0;
        let mut a_sum = 0.0;
        for &i in idx {
            b_sum += b[i as usize];
            a_sum += a[i as usize];
        }
        let b_mean = b_sum / count as f64;
        let a_mean = a_sum / count as f64;
        let mut ss = 0.0;
        for &i in idx {
            let d = a[i as usize] - a_mean;
            ss += d * d;
        }
        let var = ss / (count as f64 - 1.0);
        if !(var > 0.0) {
            return Err(CoreError::DegenerateBin { bin: j, count });
        }
        if j + 1 < bins {
            let last = b[binned.order[end - 1] as usize];
            let next = b[binned.order[end] as usize];
            edges.push(0.5 * (last + next));
        }
        centers.push(b_mean);
        counts.push(count);
        means.push(a_mean);
        stds.push(var.sqrt());
    }
    edges.push(b[*binned.order.last().unwrap() as usize]);
    for w in centers.windows(2) {
        if !(w[0] < w[1]) {
            return Err(CoreError::InvalidParameter(
                "bin centers are not strictly increasing (massive ties in the passive coordinate)"
                    .into(),
            ));
        }
    }
    Ok(MomentTable {
        edges,
        centers,
        counts,
        means,
        stds,
    })
}

/// Empirical conditional moments of `(Q x)_active` over equal-count bins of
/// `(Q x)_passive`.
pub fn fit_moment_table(samples: &[f64], q: &RotationLayer, bins: usize) -> Result<MomentTable> {
    let (b, a) = rotate_split(samples, q);
    table_from_split(&b, &a, bins)
}

/// Plug-in estimate of the loss improvement one more affine coupling block
/// could achieve at rotation `q`.
pub fn delta_affine_hat(samples: &[f64], q: &RotationLayer, bins: usize) -> Result<f64> {
    Ok(fit_moment_table(samples, q, bins)?.delta_hat())
}

/// The estimator's `(mean, variance)` term split.
pub fn delta_affine_terms(
    samples: &[f64],
    q: &RotationLayer,
    bins: usize,
) -> Result<(f64, f64)> {
    Ok(fit_moment_table(samples, q, bins)?.delta_terms())
}

/// Turn a fitted moment table into a coupling block: spline knots
/// `s_j = 1/sigma_j`, `t_j = -m_j/sigma_j` at the bin centers.
pub fn build_block(
    table: &MomentTable,
    rotation: RotationLayer,
    damping: f64,
    lipschitz: f64,
) -> Result<CouplingBlock> {
    let scale: Vec<f64> = table.stds.iter().map(|s| 1.0 / s).collect();
    let shift: Vec<f64> = table
        .means
        .iter()
        .zip(&table.stds)
        .map(|(m, s)| -m / s)
        .collect();
    let conditioner = SplineConditioner::new(table.centers.clone(), scale, shift)?;
    CouplingBlock::new(rotation, conditioner, damping, lipschitz)
}

/// Result of scoring rotation candidates.
#[derive(Debug, Clone)]
pub struct RotationSelection {
    pub rotation: RotationLayer,
    pub delta_hat: f64,
    pub table: MomentTable,
}

/// Score `n_candidates` random rotations (angles uniform on `[0, pi)`; angle
/// and angle + pi induce the same split up to sign) and return the one with
/// the largest block improvement. Ties break toward the earlier candidate.
pub fn select_rotation(
    samples: &[f64],
    n_candidates: usize,
    rng: &mut impl Rng,
) -> Result<RotationSelection> {
    if n_candidates == 0 {
        return Err(CoreError::InvalidParameter(
            "need at least one rotation candidate".into(),
        ));
    }
    let angles: Vec<f64> = (0..n_candidates)
        .map(|_| rng.random_range(0.0..std::f64::consts::PI))
        .collect();
    select_rotation_from_angles(samples, &angles, DEFAULT_SELECTION_BINS)
}

const DEFAULT_SELECTION_BINS: usize = 64;

/// Deterministic core of [`select_rotation`]: scores explicit angles.
pub fn select_rotation_from_angles(
    samples: &[f64],
    angles: &[f64],
    bins: usize,
) -> Result<RotationSelection> {
    let scored: Vec<(RotationLayer, MomentTable)> = angles
        .par_iter()
        .map(|&angle| {
            let q = RotationLayer::from_angle(angle);
            let table = fit_moment_table(samples, &q, bins)?;
            Ok((q, table))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    let mut best_delta = f64::NEG_INFINITY;
    for (k, (_, table)) in scored.iter().enumerate() {
        let d = table.delta_hat();
        if d > best_delta {
            best_delta = d;
            best = k;
        }
    }
    let (rotation, table) = scored.into_iter().nth(best).unwrap();
    Ok(RotationSelection {
        rotation,
        delta_hat: best_delta,
        table,
    })
}

/// Monte-Carlo KL estimate with jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub kl: f64,
    pub se: f64,
}

/// Data-space Monte-Carlo estimate of `KL(p || p_theta)` for a flow with a
/// standard-normal latent: the mean of `ln p(x) - ln p_theta(x)` over fresh
/// target samples.
pub fn kl_hat(
    flow: &Flow,
    target: &AnalyticDensity,
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    let xs = target.sample(n, seed)?;
    kl_hat_from_samples(flow, target, &xs)
}

/// KL estimate over an already-drawn batch of target samples.
pub fn kl_hat_from_samples(
    flow: &Flow,
    target: &AnalyticDensity,
    xs: &[f64],
) -> Result<KlEstimate> {
    let n = xs.len() / 2;
    let mut zs = xs.to_vec();
    let mut logdets = vec![0.0; n];
    flow.forward_batch_in_place(&mut zs, Some(&mut logdets))?;
    let summands = kl_summands(target, xs, &zs, &logdets)?;
    let (kl, se) = mean_with_se(&summands);
    Ok(KlEstimate { kl, se })
}

const LN_2PI: f64 = 1.8378770664093453;

fn kl_summands(
    target: &AnalyticDensity,
    xs: &[f64],
    zs: &[f64],
    logdets: &[f64],
) -> Result<Vec<f64>> {
    let summands: Vec<f64> = xs
        .par_chunks_exact(2)
        .zip(zs.par_chunks_exact(2))
        .zip(logdets.par_iter())
        .map(|((x, z), ld)| {
            let model = -0.5 * (z[0] * z[0] + z[1] * z[1]) - LN_2PI + ld;
            target.log_density(x) - model
        })
        .collect();
    if summands.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::NonFinite { block: usize::MAX });
    }
    Ok(summands)
}

/// One row of the training trace, describing the state after `block` blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    /// Number of blocks in the flow at this point.
    pub block: usize,
    /// Raw block improvement available on this latent (before damping and
    /// clamping), i.e. what the next block was selected on.
    pub delta_hat: f64,
    pub kl_hat: f64,
    pub kl_se: f64,
    /// Rotation angle chosen for the next block.
    pub angle: f64,
    /// Wall time of this step in seconds.
    pub seconds: f64,
    /// KL improvement realized by the block that produced this state.
    pub realized_improvement: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn initial(&self) -> &TraceRecord {
        self.records.first().expect("trace is never empty")
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace is never empty")
    }
}

/// Append `cfg.n_blocks` greedily fitted coupling blocks, tracking the block
/// improvement and KL per step. Earlier blocks stay frozen.
pub fn greedy_train(target: &AnalyticDensity, cfg: &TrainerConfig) -> Result<(Flow, TrainTrace)> {
    cfg.validate()?;
    if target.dim() != 2 {
        return Err(CoreError::UnsupportedDimension {
            required: 2,
            actual: target.dim(),
        });
    }
    let abort = |block: usize| move |e: CoreError| CoreError::TrainAborted {
        block,
        source: Box::new(e),
    };

    let mut flow = Flow::empty();
    let mut records = Vec::with_capacity(cfg.n_blocks + 1);
    // State carried between steps when not resampling.
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut logdets = Vec::new();

    for step in 0..=cfg.n_blocks {
        let t0 = Instant::now();
        if step == 0 || cfg.resample_each_step {
            xs = target.sample(cfg.n_samples, derive_seed(cfg.seed, step as u64))?;
            zs = xs.clone();
            logdets = vec![0.0; cfg.n_samples];
            flow.forward_batch_in_place(&mut zs, Some(&mut logdets))
                .map_err(abort(step))?;
        }

        let n_eval = cfg.n_samples.min(KL_EVAL_MAX);
        let summands = kl_summands(target, &xs[..2 * n_eval], &zs[..2 * n_eval], &logdets[..n_eval])
            .map_err(abort(step))?;
        let (kl, kl_se) = mean_with_se(&summands);

        let mut rot_rng = substream(cfg.seed, 0x524f_5400 + step as u64);
        let angles: Vec<f64> = (0..cfg.n_rotations)
            .map(|_| rot_rng.random_range(0.0..std::f64::consts::PI))
            .collect();
        let sel =
            select_rotation_from_angles(&zs, &angles, cfg.bins).map_err(abort(step + 1))?;

        let realized = if step == 0 {
            0.0
        } else {
            let prev: &TraceRecord = records.last().unwrap();
            prev.kl_hat - kl
        };
        records.push(TraceRecord {
            block: step,
            delta_hat: sel.delta_hat,
            kl_hat: kl,
            kl_se,
            angle: sel.rotation.angle().unwrap_or(0.0),
            seconds: t0.elapsed().as_secs_f64(),
            realized_improvement: realized,
        });

        if step < cfg.n_blocks {
            let block = build_block(&sel.table, sel.rotation, cfg.damping, cfg.lipschitz)
                .map_err(abort(step + 1))?;
            if !cfg.resample_each_step {
                let one = Flow::from_blocks(vec![block.clone()]);
                one.forward_batch_in_place(&mut zs, Some(&mut logdets))
                    .map_err(abort(step + 1))?;
            }
            flow.push(block);
        }
    }
    Ok((flow, TrainTrace { records }))
}
