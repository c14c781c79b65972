//! Unsupervised learning of convolutional analysis operators.
//!
//! Training alternates two exact block updates:
//!
//! * sparse codes: every feature map is replaced by the (joint) hard
//!   threshold of the current filter responses, which is the global
//!   minimizer of the training cost for fixed filters;
//! * filters: one majorized gradient step on the quadratic fit term, followed
//!   by the Frobenius-nearest projection back onto the scaled tight frames
//!   `{D : D Dᵀ = I/P}` (computed from a thin SVD).
//!
//! Both steps are non-increasing in the training cost, so the objective trace
//! is monotone whenever extrapolation is off. Single-channel CAOL is the
//! one-channel instance with fit weight 1 and ℓ₀ weight α; the multi-channel
//! joint form uses fit weights γₑ and unit weight on the joint ℓ₁,₀ count.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::{operator_norm_sq, ConvPlan};
use crate::error::{Error, Result};
use crate::types::{ChannelPair, FeatureStack, FilterBank, Grid, Image};

/// Relative singular-value floor below which the projection is flagged rank deficient.
const RANK_TOLERANCE: f64 = 1e-12;

/// Keeps `a_j` iff `½ a_j² ≥ β`.
pub fn hard_threshold(a: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::param(format!("threshold must be positive, got {beta}")));
    }
    Ok(a.iter().map(|&v| if 0.5 * v * v >= beta { v } else { 0.0 }).collect())
}

/// Keeps the tuple `(a_{1,j}, …, a_{E,j})` iff `Σ_e ½ γ_e a_{e,j}² ≥ 1`, zeroes it otherwise.
pub fn multi_hard_threshold(channels: &[&[f64]], gammas: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_joint(channels, gammas)?;
    let mut out: Vec<Vec<f64>> = channels.iter().map(|c| c.to_vec()).collect();
    let n = channels.first().map_or(0, |c| c.len());
    for j in 0..n {
        if !joint_keep(channels.iter().map(|c| c[j]), gammas, 1.0) {
            out.iter_mut().for_each(|c| c[j] = 0.0);
        }
    }
    Ok(out)
}

fn check_joint(channels: &[&[f64]], gammas: &[f64]) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::Empty("threshold channels"));
    }
    if channels.len() != gammas.len() {
        return Err(Error::LengthMismatch { expected: channels.len(), actual: gammas.len() });
    }
    if let Some(g) = gammas.iter().find(|g| !(**g > 0.0)) {
        return Err(Error::param(format!("channel weights must be positive, got {g}")));
    }
    let n = channels[0].len();
    if let Some(c) = channels.iter().find(|c| c.len() != n) {
        return Err(Error::LengthMismatch { expected: n, actual: c.len() });
    }
    Ok(())
}

/// Shared keep rule: `Σ_e ½ w_e a_e² ≥ λ`.
#[inline]
fn joint_keep(values: impl Iterator<Item = f64>, weights: &[f64], l0_weight: f64) -> bool {
    let energy: f64 = values.zip(weights).map(|(a, w)| 0.5 * w * a * a).sum();
    energy >= l0_weight
}

#[derive(Clone, Debug)]
pub struct TightFrameProjection {
    pub bank: FilterBank,
    /// Set when σ_min < 1e-12·σ_max; the missing directions come from the SVD's
    /// orthonormal completion.
    pub rank_deficient: bool,
}

/// Frobenius-nearest scaled tight frame: `D = U Vᵀ / √P` from the thin SVD `G = U Σ Vᵀ`.
pub fn project_tight_frame(g: &DMatrix<f64>, filter_size: usize) -> Result<TightFrameProjection> {
    let p = filter_size * filter_size;
    if g.nrows() != p || g.ncols() == 0 {
        return Err(Error::dims(format!("expected a {p}×K matrix, got {}×{}", g.nrows(), g.ncols())));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let svd = g.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let rank_deficient = !(smin >= RANK_TOLERANCE * smax) || smax == 0.0;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let d = (u * vt) / (p as f64).sqrt();
    if rank_deficient {
        log::warn!("tight-frame projection of a rank-deficient matrix (σ_min/σ_max = {:e})", smin / smax);
    }
    Ok(TightFrameProjection { bank: FilterBank::from_matrix(filter_size, &d)?, rank_deficient })
}

/// Normalized random start: i.i.d. standard normal taps projected onto the tight frames.
pub fn random_tight_frame(filter_size: usize, count: usize, seed: u64) -> Result<FilterBank> {
    let p = filter_size * filter_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(p, count, |_, _| StandardNormal.sample(&mut rng));
    Ok(project_tight_frame(&g, filter_size)?.bank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// ℓ₀ weight of single-channel training.
    pub alpha: f64,
    /// Per-channel fit weights of joint training.
    pub gammas: Vec<f64>,
    /// Side of each square filter; P = filter_size².
    pub filter_size: usize,
    /// K
    pub filter_count: usize,
    pub max_outer: usize,
    /// Stop once the relative change of the training cost drops below this.
    pub tol: f64,
    pub extrapolation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 7×7 filters, 49 of them, tolerance 1e-4 and at most 3000 iterations;
    /// weights from the simulated-phantom experiments (γ = 800, α = 0.01).
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            gammas: vec![800.0, 800.0],
            filter_size: 7,
            filter_count: 49,
            max_outer: 3000,
            tol: 1e-4,
            extrapolation: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Weights used for the clinical-data experiments (γ = 1e4, α = 1e-4).
    pub fn clinical() -> Self {
        TrainConfig { alpha: 1e-4, gammas: vec![1e4, 1e4], ..TrainConfig::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::param(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::param("all channel weights must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tolerance must be positive"));
        }
        if self.filter_count == 0 {
            return Err(Error::param("filter count must be positive"));
        }
        Ok(())
    }
}

/// Weights of the generic training cost
/// `Σ_e (w_e/2) Σ_{l,k} ‖d_{e,k} ⊛ x_{e,l} − z_{e,l,k}‖² + λ Σ_{l,k} ‖(z_{1,l,k}, …)‖_{1,0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityWeights {
    pub fit: Vec<f64>,
    pub l0: f64,
}

impl SparsityWeights {
    pub fn caol(alpha: f64) -> Self {
        SparsityWeights { fit: vec![1.0], l0: alpha }
    }

    pub fn joint(gammas: &[f64]) -> Self {
        SparsityWeights { fit: gammas.to_vec(), l0: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Training {
    /// One bank per channel.
    pub banks: Vec<FilterBank>,
    /// Training cost after each sparse-code update, i.e. F(Dᵗ, zᵗ⁺¹).
    pub objective: Vec<f64>,
    /// Largest tight-frame residual over channels after each filter update.
    pub frame_residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Fraction of nonzero feature coefficients at the last sparse-code update.
    pub density: f64,
}

/// Joint sparse codes of one image per channel under the given banks.
pub fn sparse_codes(images: &[&[f64]], grid: Grid, banks: &[FilterBank], weights: &SparsityWeights) -> Result<Vec<FeatureStack>> {
    if images.len() != banks.len() || images.len() != weights.fit.len() {
        return Err(Error::dims("one image, bank and weight per channel required"));
    }
    let mut stacks = Vec::with_capacity(images.len());
    for (x, bank) in images.iter().zip(banks) {
        let plan = ConvPlan::new(grid, bank.filter_size())?;
        stacks.push(FeatureStack::new(grid, plan.analyze(bank, x)?)?);
    }
    threshold_stacks(&mut stacks, weights);
    Ok(stacks)
}

/// Applies the joint keep rule in place; returns the joint support size.
pub(crate) fn threshold_stacks(stacks: &mut [FeatureStack], weights: &SparsityWeights) -> usize {
    let k_count = stacks[0].count();
    let n = stacks[0].grid().len();
    let mut kept = 0;
    for k in 0..k_count {
        for j in 0..n {
            let keep = joint_keep(stacks.iter().map(|s| s.map(k)[j]), &weights.fit, weights.l0);
            if keep {
                kept += 1;
            } else {
                for s in stacks.iter_mut() {
                    s.maps_mut()[k][j] = 0.0;
                }
            }
        }
    }
    kept
}

/// Filter-training engine over E channels of L co-registered images.
pub fn train_joint(channels: &[Vec<&[f64]>], grid: Grid, weights: &SparsityWeights, cfg: &TrainConfig) -> Result<Training> {
    cfg.validate()?;
    let e_count = channels.len();
    if e_count == 0 || channels[0].is_empty() {
        return Err(Error::Empty("training set"));
    }
    if weights.fit.len() != e_count {
        return Err(Error::LengthMismatch { expected: e_count, actual: weights.fit.len() });
    }
    let l_count = channels[0].len();
    for c in channels {
        if c.len() != l_count {
            return Err(Error::dims("every channel needs the same number of training images"));
        }
        for x in c {
            grid.check(x)?;
        }
    }
    let plan = ConvPlan::new(grid, cfg.filter_size)?;
    let (p, k_count) = (plan.taps(), cfg.filter_count);

    let init = random_tight_frame(cfg.filter_size, k_count, cfg.seed)?;
    let mut banks = vec![init; e_count];
    let mut previous = banks.clone();
    // Lipschitz constant of channel e's filter gradient
    let mut lipschitz = Vec::with_capacity(e_count);
    for (c, w) in channels.iter().zip(&weights.fit) {
        let lam = if c.iter().all(|x| x.iter().all(|v| *v == 0.0)) { 0.0 } else { operator_norm_sq(c, grid, cfg.filter_size)? };
        lipschitz.push(w * lam);
    }

    let mut objective = Vec::new();
    let mut frame_residuals = Vec::new();
    let mut converged = false;
    let mut density = 0.0;
    let mut momentum_age = 0usize;
    let mut iterations = 0;

    for t in 0..cfg.max_outer {
        iterations = t + 1;
        // responses[e][l] holds the K maps of image l in channel e
        let responses: Vec<Vec<Vec<Vec<f64>>>> = channels
            .iter()
            .zip(&banks)
            .map(|(c, bank)| c.par_iter().map(|x| plan.analyze(bank, x).expect("checked dims")).collect())
            .collect();

        // sparse codes + cost F(Dᵗ, zᵗ⁺¹)
        let mut fit = 0.0;
        let mut support = 0usize;
        let mut residuals = responses.clone();
        for l in 0..l_count {
            for k in 0..k_count {
                for j in 0..grid.len() {
                    let keep = joint_keep((0..e_count).map(|e| responses[e][l][k][j]), &weights.fit, weights.l0);
                    if keep {
                        support += 1;
                        for r in residuals.iter_mut() {
                            r[l][k][j] = 0.0;
                        }
                    }
                }
            }
        }
        for (e, r) in residuals.iter().enumerate() {
            let ss: f64 = r.iter().flatten().flatten().map(|v| v * v).sum();
            fit += 0.5 * weights.fit[e] * ss;
        }
        let cost = fit + weights.l0 * support as f64;
        density = support as f64 / (l_count * k_count * grid.len()) as f64;

        if let Some(&prev) = objective.last() {
            if cfg.extrapolation && cost > prev {
                momentum_age = 0;
            }
            let change = (prev - cost).abs() / f64::max(prev.abs(), f64::MIN_POSITIVE);
            objective.push(cost);
            if change < cfg.tol {
                converged = true;
                break;
            }
        } else {
            objective.push(cost);
        }

        // filter update, one channel at a time
        let mut next_banks = Vec::with_capacity(e_count);
        for e in 0..e_count {
            if lipschitz[e] == 0.0 {
                next_banks.push(banks[e].clone());
                frame_residuals.push(banks[e].tight_frame_residual());
                continue;
            }
            let current = banks[e].to_matrix();
            let (anchor, resid) = if cfg.extrapolation && momentum_age > 0 {
                let w = (momentum_age as f64 - 1.0).max(0.0) / (momentum_age as f64 + 2.0);
                let anchor = &current + (&current - previous[e].to_matrix()) * w;
                let anchor_bank = FilterBank::from_matrix(cfg.filter_size, &anchor)?;
                // residuals at the extrapolated point with the current codes
                let mut r: Vec<Vec<Vec<f64>>> =
                    channels[e].par_iter().map(|x| plan.analyze(&anchor_bank, x).expect("checked dims")).collect();
                for l in 0..l_count {
                    for k in 0..k_count {
                        for j in 0..grid.len() {
                            let z = responses[e][l][k][j] - residuals[e][l][k][j];
                            r[l][k][j] -= z;
                        }
                    }
                }
                (anchor, r)
            } else {
                (current, residuals[e].clone())
            };
            let grads: Vec<Vec<f64>> = (0..k_count)
                .into_par_iter()
                .map(|k| {
                    let mut g = vec![0.0; p];
                    for (l, x) in channels[e].iter().enumerate() {
                        let part = plan.filter_adjoint(x, &resid[l][k]).expect("checked dims");
                        g.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    g
                })
                .collect();
            let step = weights.fit[e] / lipschitz[e];
            let target = DMatrix::from_fn(p, k_count, |i, k| anchor[(i, k)] - step * grads[k][i]);
            let projected = project_tight_frame(&target, cfg.filter_size)?.bank;
            frame_residuals.push(projected.tight_frame_residual());
            next_banks.push(projected);
        }
        if let Some(last) = frame_residuals.len().checked_sub(e_count) {
            let worst = frame_residuals[last..].iter().copied().fold(0.0, f64::max);
            frame_residuals.truncate(last);
            frame_residuals.push(worst);
        }
        previous = std::mem::replace(&mut banks, next_banks);
        momentum_age += 1;
    }
    Ok(Training { banks, objective, frame_residuals, iterations, converged, density })
}

fn common_grid(images: &[&Image]) -> Result<Grid> {
    let first = images.first().ok_or(Error::Empty("training set"))?;
    for img in images {
        if img.grid() != first.grid() {
            return Err(Error::dims("training images differ in size"));
        }
    }
    Ok(first.grid())
}

/// Single-channel training with ℓ₀ weight `cfg.alpha`.
pub fn caol_train(images: &[Image], cfg: &TrainConfig) -> Result<Training> {
    let refs: Vec<&Image> = images.iter().collect();
    let grid = common_grid(&refs)?;
    let channel: Vec<&[f64]> = images.iter().map(|x| x.values()).collect();
    train_joint(&[channel], grid, &SparsityWeights::caol(cfg.alpha), cfg)
}

/// Joint two-channel training with weights `cfg.gammas`.
pub fn mcaol_train(pairs: &[ChannelPair<Image>], cfg: &TrainConfig) -> Result<(ChannelPair<FilterBank>, Training)> {
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.gammas.len() != 2 {
        return Err(Error::param(format!("two channel weights required, got {}", cfg.gammas.len())));
    }
    for p in pairs {
        p.validate()?;
    }
    let all: Vec<&Image> = pairs.iter().flat_map(|p| [&p.low, &p.high]).collect();
    let grid = common_grid(&all)?;
    let low: Vec<&[f64]> = pairs.iter().map(|p| p.low.values()).collect();
    let high: Vec<&[f64]> = pairs.iter().map(|p| p.high.values()).collect();
    let training = train_joint(&[low, high], grid, &SparsityWeights::joint(&cfg.gammas), cfg)?;
    let pair = ChannelPair::from_vec(training.banks.clone(), pairs[0].labels)?;
    Ok((pair, training))
}

/// Short hash identifying a training run's inputs and settings.
pub fn provenance(cfg: &TrainConfig, images: &[&Image]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    for img in images {
        for v in img.values() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}
