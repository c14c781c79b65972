//! Same-size 2D convolution with zero padding.
//!
//! `convolve` is a true convolution (the kernel is flipped): a kernel whose
//! only nonzero tap sits one column right of centre moves image content one
//! column to the right. Output dimensions always equal input dimensions; the
//! boundary is handled by zero padding followed by truncation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{FilterBank, Grid, Image};

/// Seed of the power-iteration start vector; fixed so majorizers are reproducible.
const POWER_ITERATION_SEED: u64 = 0x6d61_6a6f_7269_7a65;
const POWER_ITERATION_TOL: f64 = 1e-4;
const POWER_ITERATION_MAX: usize = 1000;
const POWER_ITERATION_INFLATION: f64 = 1.01;

/// Validated pairing of an image grid with a square kernel size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvPlan {
    grid: Grid,
    filter_size: usize,
}

impl ConvPlan {
    pub fn new(grid: Grid, filter_size: usize) -> Result<Self> {
        if filter_size == 0 || filter_size % 2 == 0 {
            return Err(Error::param(format!("filter size must be odd, got {filter_size}")));
        }
        if filter_size > grid.width || filter_size > grid.height {
            return Err(Error::dims(format!(
                "{filter_size}x{filter_size} filter larger than {}x{} image",
                grid.width, grid.height
            )));
        }
        Ok(ConvPlan { grid, filter_size })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    /// Zero-pad amount per side.
    pub fn padding(&self) -> usize {
        self.filter_size / 2
    }

    pub fn taps(&self) -> usize {
        self.filter_size * self.filter_size
    }

    /// Visits every kernel tap with its (row, column) displacement and the
    /// output row/column ranges for which the displaced input stays in the grid.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, isize, isize, std::ops::Range<usize>, std::ops::Range<usize>)) {
        let h = self.padding() as isize;
        let (w, ht) = (self.grid.width as isize, self.grid.height as isize);
        for u in 0..self.filter_size {
            let dy = u as isize - h;
            let rows = dy.max(0) as usize..(ht + dy.min(0)) as usize;
            for v in 0..self.filter_size {
                let dx = v as isize - h;
                let cols = dx.max(0) as usize..(w + dx.min(0)) as usize;
                f(u * self.filter_size + v, dy, dx, rows.clone(), cols);
            }
        }
    }

    /// `out[r, c] = Σ d[u, v] · x[r − dy, c − dx]`, accumulated into `out`.
    fn convolve_into(&self, d: &[f64], x: &[f64], out: &mut [f64]) {
        let w = self.grid.width;
        self.for_each_tap(|t, dy, dx, rows, cols| {
            let coef = d[t];
            if coef == 0.0 {
                return;
            }
            for r in rows {
                let src_row = (r as isize - dy) as usize;
                let dst = &mut out[r * w + cols.start..r * w + cols.end];
                let s0 = (cols.start as isize - dx) as usize;
                let src = &x[src_row * w + s0..src_row * w + s0 + dst.len()];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += coef * s;
                }
            }
        });
    }

    /// Adjoint of `convolve_into`: correlation with the same kernel.
    fn adjoint_into(&self, d: &[f64], r: &[f64], out: &mut [f64]) {
        let w = self.grid.width;
        self.for_each_tap(|t, dy, dx, rows, cols| {
            let coef = d[t];
            if coef == 0.0 {
                return;
            }
            for row in rows {
                let dst_row = (row as isize - dy) as usize;
                let s0 = (cols.start as isize - dx) as usize;
                let src = &r[row * w + cols.start..row * w + cols.end];
                let dst = &mut out[dst_row * w + s0..dst_row * w + s0 + src.len()];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += coef * s;
                }
            }
        });
    }

    /// Gradient of `⟨convolve(d, x), r⟩` with respect to the kernel taps.
    fn filter_adjoint_into(&self, x: &[f64], r: &[f64], out: &mut [f64]) {
        let w = self.grid.width;
        self.for_each_tap(|t, dy, dx, rows, cols| {
            let mut acc = 0.0;
            for row in rows {
                let src_row = (row as isize - dy) as usize;
                let s0 = (cols.start as isize - dx) as usize;
                let a = &r[row * w + cols.start..row * w + cols.end];
                let b = &x[src_row * w + s0..src_row * w + s0 + a.len()];
                acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            }
            out[t] += acc;
        });
    }

    fn check_filter(&self, d: &[f64]) -> Result<()> {
        if d.len() != self.taps() {
            return Err(Error::LengthMismatch { expected: self.taps(), actual: d.len() });
        }
        Ok(())
    }

    pub fn convolve(&self, d: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_filter(d)?;
        self.grid.check(x)?;
        let mut out = vec![0.0; x.len()];
        self.convolve_into(d, x, &mut out);
        Ok(out)
    }

    pub fn convolve_adjoint(&self, d: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.check_filter(d)?;
        self.grid.check(r)?;
        let mut out = vec![0.0; r.len()];
        self.adjoint_into(d, r, &mut out);
        Ok(out)
    }

    /// Xᵀr where X is the matrix taking a kernel to its convolution with `x`.
    pub fn filter_adjoint(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>> {
        self.grid.check(x)?;
        self.grid.check(r)?;
        let mut out = vec![0.0; self.taps()];
        self.filter_adjoint_into(x, r, &mut out);
        Ok(out)
    }

    /// Responses of `x` to every filter in the bank.
    pub fn analyze(&self, bank: &FilterBank, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_bank(bank)?;
        self.grid.check(x)?;
        Ok((0..bank.count())
            .into_par_iter()
            .map(|k| {
                let mut out = vec![0.0; x.len()];
                self.convolve_into(bank.filter(k), x, &mut out);
                out
            })
            .collect())
    }

    /// Σ_k convolve_adjoint(d_k, r_k), summed in filter order.
    pub fn synthesize_adjoint(&self, bank: &FilterBank, maps: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_bank(bank)?;
        if maps.len() != bank.count() {
            return Err(Error::LengthMismatch { expected: bank.count(), actual: maps.len() });
        }
        for m in maps {
            self.grid.check(m)?;
        }
        let parts: Vec<Vec<f64>> = maps
            .par_iter()
            .enumerate()
            .map(|(k, r)| {
                let mut out = vec![0.0; r.len()];
                self.adjoint_into(bank.filter(k), r, &mut out);
                out
            })
            .collect();
        let mut sum = vec![0.0; self.grid.len()];
        for p in parts {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        Ok(sum)
    }

    fn check_bank(&self, bank: &FilterBank) -> Result<()> {
        if bank.filter_size() != self.filter_size {
            return Err(Error::dims(format!(
                "bank filter size {} does not match plan filter size {}",
                bank.filter_size(),
                self.filter_size
            )));
        }
        Ok(())
    }
}

pub fn convolve(d: &[f64], filter_size: usize, x: &Image) -> Result<Vec<f64>> {
    ConvPlan::new(x.grid(), filter_size)?.convolve(d, x.values())
}

pub fn convolve_adjoint(d: &[f64], filter_size: usize, r: &[f64], grid: Grid) -> Result<Vec<f64>> {
    ConvPlan::new(grid, filter_size)?.convolve_adjoint(d, r)
}

/// Applies Σ_l X_lᵀ X_l to a kernel, where X_l maps a kernel to its convolution with image l.
pub fn gram_apply(plans_images: &[(ConvPlan, &[f64])], d: &[f64]) -> Vec<f64> {
    let p = d.len();
    let mut out = vec![0.0; p];
    for (plan, x) in plans_images {
        let mut y = vec![0.0; x.len()];
        plan.convolve_into(d, x, &mut y);
        plan.filter_adjoint_into(x, &y, &mut out);
    }
    out
}

/// Upper estimate of λ_max(Σ_l X_lᵀ X_l) for kernels of `filter_size`.
///
/// Power iteration from a fixed pseudo-random start, stopped once the Rayleigh
/// quotient changes by less than 1e-4 relative, then inflated by 1%.
pub fn operator_norm_sq(images: &[&[f64]], grid: Grid, filter_size: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("training images"));
    }
    if images.iter().all(|x| x.iter().all(|v| *v == 0.0)) {
        return Err(Error::param("operator norm of an all-zero training set"));
    }
    let plan = ConvPlan::new(grid, filter_size)?;
    for x in images {
        grid.check(x)?;
    }
    let pairs: Vec<(ConvPlan, &[f64])> = images.iter().map(|x| (plan, *x)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..plan.taps()).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATION_MAX {
        let w = gram_apply(&pairs, &v);
        let next = dot(&v, &w);
        v = w;
        let norm = normalize(&mut v);
        if norm == 0.0 {
            break;
        }
        let converged = (next - lambda).abs() <= POWER_ITERATION_TOL * next.abs();
        lambda = next;
        if converged {
            break;
        }
    }
    Ok(lambda * POWER_ITERATION_INFLATION)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
