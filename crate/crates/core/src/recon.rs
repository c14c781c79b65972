//! Model-based reconstruction with learned and handcrafted priors.
//!
//! Learned priors alternate an exact sparse-code update with a bounded
//! quasi-Newton image update per channel:
//!
//! ```text
//! Φ_e(x) = ρ_e L_e(x) + (w_e/2) Σ_k ‖d_{e,k} ⊛ x − z_{e,k}‖²
//! ```
//!
//! where the codes `z` come from the joint keep rule `Σ_e ½ w_e a_e² ≥ λ`.
//! The joint prior uses `w_e = γ_e, λ = 1`; the single-channel prior uses
//! `w = 1, λ = α`. TV, JTV and the prior-free estimate are single solves of a
//! smooth objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::ConvPlan;
use crate::error::{Error, Result};
use crate::learning::SparsityWeights;
use crate::optimizer::{minimize, SolverConfig, Termination};
use crate::physics::{DataFit, PoissonFit, PwlsFit, SourceModel};
use crate::projector::SystemMatrix;
use crate::types::{ChannelPair, FilterBank, Grid, Image, Sinogram};

/// Weights ω of the 8-neighbourhood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeights {
    pub axial: f64,
    pub diagonal: f64,
}

impl Default for NeighborWeights {
    fn default() -> Self {
        NeighborWeights { axial: 1.0, diagonal: std::f64::consts::FRAC_1_SQRT_2 }
    }
}

impl NeighborWeights {
    /// Forward half of the neighbourhood as (row offset, column offset, ω).
    /// Every unordered pair appears once; the penalty counts it from both ends.
    fn forward_offsets(&self) -> [(usize, isize, f64); 4] {
        [(0, 1, self.axial), (1, 0, self.axial), (1, 1, self.diagonal), (1, -1, self.diagonal)]
    }
}

fn for_each_pair(grid: Grid, w: &NeighborWeights, mut f: impl FnMut(usize, usize, f64)) {
    for (dr, dc, omega) in w.forward_offsets() {
        for r in 0..grid.height.saturating_sub(dr) {
            for c in 0..grid.width {
                let c2 = c as isize + dc;
                if c2 < 0 || c2 >= grid.width as isize {
                    continue;
                }
                f(grid.index(r, c), grid.index(r + dr, c2 as usize), omega);
            }
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param(format!("smoothing must be positive, got {eps}")));
    }
    Ok(())
}

/// Smoothed TV `Σ_j Σ_{k∈N_j} ω_jk √((x_j − x_k)² + ε)` and its gradient.
pub fn tv_penalty(grid: Grid, x: &[f64], eps: f64, weights: &NeighborWeights) -> Result<(f64, Vec<f64>)> {
    check_eps(eps)?;
    grid.check(x)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    for_each_pair(grid, weights, |j, k, omega| {
        let d = x[j] - x[k];
        let s = (d * d + eps).sqrt();
        value += 2.0 * omega * s;
        let g = 2.0 * omega * d / s;
        grad[j] += g;
        grad[k] -= g;
    });
    Ok((value, grad))
}

/// Joint TV coupling both channels' differences under one square root.
pub fn jtv_penalty(grid: Grid, x1: &[f64], x2: &[f64], eps: f64, weights: &NeighborWeights) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_eps(eps)?;
    grid.check(x1)?;
    grid.check(x2)?;
    let mut value = 0.0;
    let mut g1 = vec![0.0; x1.len()];
    let mut g2 = vec![0.0; x2.len()];
    for_each_pair(grid, weights, |j, k, omega| {
        let (d1, d2) = (x1[j] - x1[k], x2[j] - x2[k]);
        let s = (d1 * d1 + d2 * d2 + eps).sqrt();
        value += 2.0 * omega * s;
        let (a, b) = (2.0 * omega * d1 / s, 2.0 * omega * d2 / s);
        g1[j] += a;
        g1[k] -= a;
        g2[j] += b;
        g2[k] -= b;
    });
    Ok((value, g1, g2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    /// Data-fit weights ρ_e.
    pub rhos: [f64; 2],
    /// Joint-sparsity weights γ_e.
    pub gammas: [f64; 2],
    /// TV / JTV weight.
    pub beta: f64,
    /// Single-channel ℓ₀ weight.
    pub alpha: f64,
    pub epsilon: f64,
    pub n_outer: usize,
    /// Iterations of the prior-free solve that seeds the learned priors.
    pub init_iters: usize,
    pub inner: SolverConfig,
    pub neighbors: NeighborWeights,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            rhos: [1.0, 1.0],
            gammas: [800.0, 800.0],
            beta: 1.0,
            alpha: 0.01,
            epsilon: 1e-8,
            n_outer: 300,
            init_iters: 100,
            inner: SolverConfig::default(),
            neighbors: NeighborWeights::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::param("data-fit weights must be positive"));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0)) || !(self.alpha > 0.0) {
            return Err(Error::param("sparsity weights must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::param("TV weight must be nonnegative"));
        }
        check_eps(self.epsilon)?;
        self.inner.validate()
    }
}

/// Measured data of one channel.
#[derive(Clone, Copy)]
pub struct ChannelData<'a> {
    pub matrix: &'a SystemMatrix,
    pub counts: &'a Sinogram,
    pub source: &'a SourceModel,
}

impl<'a> ChannelData<'a> {
    pub fn new(matrix: &'a SystemMatrix, counts: &'a Sinogram, source: &'a SourceModel) -> Self {
        ChannelData { matrix, counts, source }
    }

    fn poisson(&self) -> Result<PoissonFit<'a>> {
        PoissonFit::new(self.matrix, self.counts, self.source)
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub images: Vec<Image>,
    /// Learned priors: full objective after every half-step (codes, then images).
    /// Smooth priors: the solver's objective per iteration.
    pub objective: Vec<f64>,
    /// Final joint support, filter-major (`k · J + j`); learned priors only.
    pub support: Option<Vec<bool>>,
    pub inner_iterations: usize,
}

impl Reconstruction {
    pub fn into_image(mut self) -> Image {
        self.images.swap_remove(0)
    }

    pub fn into_pair(self, labels: [f64; 2]) -> Result<ChannelPair<Image>> {
        ChannelPair::from_vec(self.images, labels)
    }
}

fn to_image(grid: Grid, pixel_size: f64, values: Vec<f64>) -> Result<Image> {
    Image::new(grid.width, grid.height, pixel_size, values)
}

/// `Φ(x) = ρ·fit(x) + (w/2) Σ_k ‖d_k ⊛ x − z_k‖²` for fixed codes.
pub struct ImageObjective<'a> {
    pub fit: &'a dyn DataFit,
    pub rho: f64,
    pub plan: &'a ConvPlan,
    pub bank: &'a FilterBank,
    pub weight: f64,
    pub codes: &'a [Vec<f64>],
}

impl ImageObjective<'_> {
    pub fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut value = self.rho * self.fit.value_grad(x, grad);
        grad.iter_mut().for_each(|g| *g *= self.rho);
        let mut residuals = self.plan.analyze(self.bank, x).expect("checked dims");
        let mut ss = 0.0;
        for (r, z) in residuals.iter_mut().zip(self.codes) {
            for (ri, zi) in r.iter_mut().zip(z) {
                *ri -= zi;
                ss += *ri * *ri;
            }
        }
        value += 0.5 * self.weight * ss;
        let back = self.plan.synthesize_adjoint(self.bank, &residuals).expect("checked dims");
        grad.iter_mut().zip(back).for_each(|(g, b)| *g += self.weight * b);
        value
    }
}

fn sparse_codes(plans: &[ConvPlan], banks: &[FilterBank], xs: &[Vec<f64>], weights: &SparsityWeights) -> (Vec<Vec<Vec<f64>>>, Vec<bool>, f64) {
    let mut codes: Vec<Vec<Vec<f64>>> =
        plans.iter().zip(banks).zip(xs).map(|((p, b), x)| p.analyze(b, x).expect("checked dims")).collect();
    let k_count = banks[0].count();
    let n = xs[0].len();
    let mut support = vec![false; k_count * n];
    let mut fit = 0.0;
    let mut kept = 0usize;
    for k in 0..k_count {
        for j in 0..n {
            let energy: f64 = codes.iter().zip(&weights.fit).map(|(c, w)| 0.5 * w * c[k][j] * c[k][j]).sum();
            if energy >= weights.l0 {
                support[k * n + j] = true;
                kept += 1;
            } else {
                fit += energy;
                codes.iter_mut().for_each(|c| c[k][j] = 0.0);
            }
        }
    }
    (codes, support, fit + weights.l0 * kept as f64)
}

/// Alternating reconstruction under a learned (joint) sparsity prior.
///
/// One data term, data weight, bank and start image per channel.
pub fn reconstruct_sparse(
    fits: &[&dyn DataFit],
    rhos: &[f64],
    banks: &[FilterBank],
    weights: &SparsityWeights,
    start: Vec<Vec<f64>>,
    n_outer: usize,
    inner: &SolverConfig,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<bool>, usize)> {
    let e_count = fits.len();
    if e_count == 0 {
        return Err(Error::Empty("channels"));
    }
    if rhos.len() != e_count || banks.len() != e_count || weights.fit.len() != e_count || start.len() != e_count {
        return Err(Error::dims("one data term, weight, bank and start image per channel required"));
    }
    let grid = fits[0].grid();
    let count = banks[0].count();
    for (fit, (bank, x)) in fits.iter().zip(banks.iter().zip(&start)) {
        if fit.grid() != grid {
            return Err(Error::dims("channels differ in image size"));
        }
        if bank.count() != count {
            return Err(Error::dims("banks differ in filter count"));
        }
        grid.check(x)?;
    }
    let plans = banks.iter().map(|b| ConvPlan::new(grid, b.filter_size())).collect::<Result<Vec<_>>>()?;

    let mut xs = start;
    let mut objective = Vec::with_capacity(2 * n_outer);
    let mut support = vec![false; count * grid.len()];
    let mut inner_iterations = 0;
    for _ in 0..n_outer {
        let (codes, supp, prior) = sparse_codes(&plans, banks, &xs, weights);
        support = supp;
        let fit_part: f64 = fits.iter().zip(rhos).zip(&xs).map(|((f, r), x)| r * f.value(x)).sum();
        objective.push(fit_part + prior);

        let kept = support.iter().filter(|s| **s).count() as f64;
        let solved: Vec<Result<(Vec<f64>, f64, usize)>> = (0..e_count)
            .into_par_iter()
            .map(|e| {
                let phi = ImageObjective {
                    fit: fits[e],
                    rho: rhos[e],
                    plan: &plans[e],
                    bank: &banks[e],
                    weight: weights.fit[e],
                    codes: &codes[e],
                };
                let sol = minimize(|x, g| phi.value_grad(x, g), xs[e].clone(), inner)?;
                Ok((sol.x, sol.objective, sol.trace.len() - 1))
            })
            .collect();
        let mut total = weights.l0 * kept;
        for (e, s) in solved.into_iter().enumerate() {
            let (x, value, iters) = s?;
            xs[e] = x;
            total += value;
            inner_iterations += iters;
        }
        objective.push(total);
    }
    Ok((xs, objective, support, inner_iterations))
}

fn prior_free(fit: &dyn DataFit, rho: f64, iters: usize, inner: &SolverConfig) -> Result<Vec<f64>> {
    let cfg = inner.clone().with_max_iter(iters);
    let sol = minimize(
        |x, g| {
            let v = fit.value_grad(x, g);
            g.iter_mut().for_each(|gi| *gi *= rho);
            rho * v
        },
        vec![0.0; fit.grid().len()],
        &cfg,
    )?;
    Ok(sol.x)
}

fn pixel_size(data: &ChannelData) -> f64 {
    data.matrix.geometry().pixel_size
}

/// Joint reconstruction of E channels; `rhos` and `gammas` give one weight per channel.
pub fn mcaol_reconstruct_channels(
    data: &[ChannelData],
    banks: &[FilterBank],
    rhos: &[f64],
    gammas: &[f64],
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if gammas.iter().chain(rhos).any(|v| !(*v > 0.0)) {
        return Err(Error::param("channel weights must be positive"));
    }
    let fits = data.iter().map(|d| d.poisson()).collect::<Result<Vec<_>>>()?;
    let fit_refs: Vec<&dyn DataFit> = fits.iter().map(|f| f as &dyn DataFit).collect();
    learned(&fit_refs, data, banks, rhos, &SparsityWeights::joint(gammas), cfg)
}

fn learned(
    fits: &[&dyn DataFit],
    data: &[ChannelData],
    banks: &[FilterBank],
    rhos: &[f64],
    weights: &SparsityWeights,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    if fits.len() != rhos.len() {
        return Err(Error::dims("one data-fit weight per channel required"));
    }
    let start = fits
        .iter()
        .zip(rhos)
        .map(|(f, r)| prior_free(*f, *r, cfg.init_iters, &cfg.inner))
        .collect::<Result<Vec<_>>>()?;
    let (xs, objective, support, inner_iterations) =
        reconstruct_sparse(fits, rhos, banks, weights, start, cfg.n_outer, &cfg.inner)?;
    let grid = fits[0].grid();
    let images = xs.into_iter().zip(data).map(|(x, d)| to_image(grid, pixel_size(d), x)).collect::<Result<Vec<_>>>()?;
    Ok(Reconstruction { images, objective, support: Some(support), inner_iterations })
}

/// Dual-energy reconstruction with the joint learned prior.
pub fn mcaol_reconstruct(data: &ChannelPair<ChannelData>, banks: &ChannelPair<FilterBank>, cfg: &ReconConfig) -> Result<Reconstruction> {
    mcaol_reconstruct_channels(
        &[data.low, data.high],
        &[banks.low.clone(), banks.high.clone()],
        &cfg.rhos,
        &cfg.gammas,
        cfg,
    )
}

/// Single-channel reconstruction with the learned prior, ℓ₀ weight `cfg.alpha`.
pub fn caol_reconstruct(data: &ChannelData, rho: f64, bank: &FilterBank, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let fit = data.poisson()?;
    learned(&[&fit], &[*data], std::slice::from_ref(bank), &[rho], &SparsityWeights::caol(cfg.alpha), cfg)
}

/// As [`caol_reconstruct`] with the weighted least-squares data term.
pub fn caol_pwls_reconstruct(data: &ChannelData, rho: f64, bank: &FilterBank, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let fit = PwlsFit::new(data.matrix, data.counts, data.source)?;
    learned(&[&fit], &[*data], std::slice::from_ref(bank), &[rho], &SparsityWeights::caol(cfg.alpha), cfg)
}

fn smooth_solve(
    grid: Grid,
    pixel_sizes: &[f64],
    n: usize,
    inner: &SolverConfig,
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
) -> Result<Reconstruction> {
    let sol = minimize(&mut f, vec![0.0; n], inner)?;
    if sol.termination == Termination::NoProgress {
        log::debug!("line search stalled after {} iterations", sol.trace.len() - 1);
    }
    let j = grid.len();
    let images = pixel_sizes
        .iter()
        .enumerate()
        .map(|(e, px)| to_image(grid, *px, sol.x[e * j..(e + 1) * j].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Reconstruction {
        images,
        objective: sol.trace.iter().map(|r| r.objective).collect(),
        support: None,
        inner_iterations: sol.trace.len() - 1,
    })
}

/// Prior-free estimate: `min_{x≥0} ρ L(x)` from a zero start.
pub fn mle_reconstruct(data: &ChannelData, rho: f64, cfg: &ReconConfig) -> Result<Reconstruction> {
    tv_like(data, rho, 0.0, cfg)
}

/// `min_{x≥0} ρ L(x) + β R_tv(x)` from a zero start.
pub fn tv_reconstruct(data: &ChannelData, rho: f64, cfg: &ReconConfig) -> Result<Reconstruction> {
    tv_like(data, rho, cfg.beta, cfg)
}

fn tv_like(data: &ChannelData, rho: f64, beta: f64, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    if !(rho > 0.0) {
        return Err(Error::param("data-fit weight must be positive"));
    }
    let fit = data.poisson()?;
    let grid = fit.grid();
    smooth_solve(grid, &[pixel_size(data)], grid.len(), &cfg.inner, |x, g| {
        let mut v = rho * fit.value_grad(x, g);
        g.iter_mut().for_each(|gi| *gi *= rho);
        if beta > 0.0 {
            let (r, rg) = tv_penalty(grid, x, cfg.epsilon, &cfg.neighbors).expect("checked dims");
            v += beta * r;
            g.iter_mut().zip(rg).for_each(|(gi, ri)| *gi += beta * ri);
        }
        v
    })
}

/// `min_{x₁,x₂≥0} ρ₁L₁ + ρ₂L₂ + β R_jtv(x₁, x₂)` as one solve over the stacked channels.
pub fn jtv_reconstruct(data: &ChannelPair<ChannelData>, cfg: &ReconConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let fits = [data.low.poisson()?, data.high.poisson()?];
    let grid = fits[0].grid();
    if fits[1].grid() != grid {
        return Err(Error::dims("channels differ in image size"));
    }
    let j = grid.len();
    let (rhos, beta) = (cfg.rhos, cfg.beta);
    smooth_solve(grid, &[pixel_size(&data.low), pixel_size(&data.high)], 2 * j, &cfg.inner, |x, g| {
        let (x1, x2) = x.split_at(j);
        let (g1, g2) = g.split_at_mut(j);
        let mut v = rhos[0] * fits[0].value_grad(x1, g1) + rhos[1] * fits[1].value_grad(x2, g2);
        g1.iter_mut().for_each(|gi| *gi *= rhos[0]);
        g2.iter_mut().for_each(|gi| *gi *= rhos[1]);
        if beta > 0.0 {
            let (r, r1, r2) = jtv_penalty(grid, x1, x2, cfg.epsilon, &cfg.neighbors).expect("checked dims");
            v += beta * r;
            g1.iter_mut().zip(r1).for_each(|(gi, ri)| *gi += beta * ri);
            g2.iter_mut().zip(r2).for_each(|(gi, ri)| *gi += beta * ri);
        }
        v
    })
}
