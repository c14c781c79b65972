//! Transmission measurement model.
//!
//! Expected counts follow Beer's law, `ȳᵢ = S·exp(−[Ax]ᵢ) + ηᵢ`, and detected
//! counts are independent Poisson draws. Data-fit terms are stored as the
//! quantity being minimized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::SystemMatrix;
use crate::types::{Grid, Image, Sinogram, SinogramKind};

/// Lower clamp on expected counts so `log ȳ` stays finite.
pub const MIN_MEAN_COUNT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Background {
    Uniform(f64),
    PerRay(Vec<f64>),
}

impl Background {
    #[inline]
    pub fn at(&self, i: usize) -> f64 {
        match self {
            Background::Uniform(b) => *b,
            Background::PerRay(v) => v[i],
        }
    }
}

/// Incident intensity and additive background for one energy channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Photons per ray, S.
    pub intensity: f64,
    /// Expected background events per ray, η.
    pub background: Background,
}

impl SourceModel {
    pub fn new(intensity: f64, background: f64) -> Result<Self> {
        let src = SourceModel { intensity, background: Background::Uniform(background) };
        src.validate(None)?;
        Ok(src)
    }

    pub fn validate(&self, rays: Option<usize>) -> Result<()> {
        if !(self.intensity.is_finite() && self.intensity > 0.0) {
            return Err(Error::param(format!("source intensity must be positive, got {}", self.intensity)));
        }
        match &self.background {
            Background::Uniform(b) if !(b.is_finite() && *b >= 0.0) => {
                Err(Error::param(format!("background must be nonnegative, got {b}")))
            }
            Background::PerRay(v) => {
                if let Some(n) = rays {
                    if v.len() != n {
                        return Err(Error::LengthMismatch { expected: n, actual: v.len() });
                    }
                }
                match v.iter().position(|b| !(b.is_finite() && *b >= 0.0)) {
                    Some(i) => Err(Error::Negative { index: i, value: v[i] }),
                    None => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

fn check_nonnegative(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !(*v >= 0.0)) {
        Some(i) => Err(Error::Negative { index: i, value: x[i] }),
        None => Ok(()),
    }
}

fn check_counts(y: &Sinogram, a: &SystemMatrix) -> Result<()> {
    if y.len() != a.n_rays() {
        return Err(Error::LengthMismatch { expected: a.n_rays(), actual: y.len() });
    }
    check_nonnegative(y.values())
}

/// Expected counts given line integrals `ax`.
pub fn mean_from_projection(ax: &[f64], src: &SourceModel) -> Vec<f64> {
    ax.iter()
        .enumerate()
        .map(|(i, &p)| (src.intensity * (-p).exp() + src.background.at(i)).max(MIN_MEAN_COUNT))
        .collect()
}

pub fn mean_counts(a: &SystemMatrix, x: &Image, src: &SourceModel) -> Result<Sinogram> {
    check_nonnegative(x.values())?;
    src.validate(Some(a.n_rays()))?;
    let ax = a.forward_project(x)?;
    let geom = a.geometry();
    Sinogram::new(
        geom.detectors,
        geom.angles.clone(),
        SinogramKind::MeanCounts,
        mean_from_projection(ax.values(), src),
    )
}

/// Independent Poisson draws per ray; the same seed always yields the same sinogram.
pub fn sample_poisson(mean: &Sinogram, seed: u64) -> Result<Sinogram> {
    check_nonnegative(mean.values())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = mean
        .values()
        .iter()
        .map(|&m| {
            if m == 0.0 {
                0.0
            } else {
                Poisson::new(m).expect("positive finite mean").sample(&mut rng)
            }
        })
        .collect();
    Sinogram::new(mean.detectors(), mean.angles().to_vec(), SinogramKind::Counts, values)
}

/// A smooth data-fit term over a flat image.
pub trait DataFit: Sync {
    fn grid(&self) -> Grid;

    fn value(&self, x: &[f64]) -> f64;

    /// Returns the value and overwrites `grad` with the gradient.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Poisson negative log-likelihood `Σ ȳᵢ(x) − yᵢ log ȳᵢ(x)` (constants dropped).
pub struct PoissonFit<'a> {
    matrix: &'a SystemMatrix,
    counts: &'a [f64],
    source: &'a SourceModel,
}

impl<'a> PoissonFit<'a> {
    pub fn new(matrix: &'a SystemMatrix, counts: &'a Sinogram, source: &'a SourceModel) -> Result<Self> {
        check_counts(counts, matrix)?;
        source.validate(Some(matrix.n_rays()))?;
        Ok(PoissonFit { matrix, counts: counts.values(), source })
    }

    fn value_from_projection(&self, ax: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, &p) in ax.iter().enumerate() {
            let ybar = (self.source.intensity * (-p).exp() + self.source.background.at(i)).max(MIN_MEAN_COUNT);
            total += ybar - self.counts[i] * ybar.ln();
        }
        total
    }
}

impl DataFit for PoissonFit<'_> {
    fn grid(&self) -> Grid {
        self.matrix.grid()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let ax = self.matrix.forward(x).expect("grid checked by caller");
        self.value_from_projection(&ax)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ax = self.matrix.forward(x).expect("grid checked by caller");
        let mut total = 0.0;
        let mut weights = vec![0.0; ax.len()];
        for (i, &p) in ax.iter().enumerate() {
            let transmitted = self.source.intensity * (-p).exp();
            let ybar = (transmitted + self.source.background.at(i)).max(MIN_MEAN_COUNT);
            total += ybar - self.counts[i] * ybar.ln();
            weights[i] = (self.counts[i] / ybar - 1.0) * transmitted;
        }
        grad.copy_from_slice(&self.matrix.back(&weights).expect("ray count checked"));
        total
    }
}

pub fn poisson_nll(a: &SystemMatrix, x: &Image, y: &Sinogram, src: &SourceModel) -> Result<f64> {
    check_nonnegative(x.values())?;
    Ok(PoissonFit::new(a, y, src)?.value(x.values()))
}

pub fn poisson_nll_grad(a: &SystemMatrix, x: &Image, y: &Sinogram, src: &SourceModel) -> Result<Vec<f64>> {
    check_nonnegative(x.values())?;
    let fit = PoissonFit::new(a, y, src)?;
    let mut g = vec![0.0; x.values().len()];
    fit.value_grad(x.values(), &mut g);
    Ok(g)
}

/// Log-transformed data and per-ray weights for the weighted least-squares surrogate.
///
/// With `ỹ = y − η`, rays with `ỹ ≥ 1` get `l = log(S/ỹ)` and `w = ỹ²/max(y, 1)`;
/// all other rays are dropped (`l = w = 0`).
pub fn pwls_transform(y: &Sinogram, src: &SourceModel) -> Result<(Sinogram, Vec<f64>)> {
    check_nonnegative(y.values())?;
    src.validate(Some(y.len()))?;
    let mut l = vec![0.0; y.len()];
    let mut w = vec![0.0; y.len()];
    for (i, &yi) in y.values().iter().enumerate() {
        let net = yi - src.background.at(i);
        if net >= 1.0 {
            l[i] = (src.intensity / net).ln();
            w[i] = net * net / yi.max(1.0);
        }
    }
    let sino = Sinogram::new(y.detectors(), y.angles().to_vec(), SinogramKind::LineIntegrals, l)?;
    Ok((sino, w))
}

/// `½ Σ wᵢ (lᵢ − [Ax]ᵢ)²`.
pub struct PwlsFit<'a> {
    matrix: &'a SystemMatrix,
    line_integrals: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> PwlsFit<'a> {
    pub fn new(matrix: &'a SystemMatrix, counts: &Sinogram, source: &SourceModel) -> Result<Self> {
        check_counts(counts, matrix)?;
        let (l, w) = pwls_transform(counts, source)?;
        Ok(PwlsFit { matrix, line_integrals: l.values().to_vec(), weights: w })
    }
}

impl DataFit for PwlsFit<'_> {
    fn grid(&self) -> Grid {
        self.matrix.grid()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let ax = self.matrix.forward(x).expect("grid checked by caller");
        ax.iter()
            .zip(&self.line_integrals)
            .zip(&self.weights)
            .map(|((p, l), w)| 0.5 * w * (l - p) * (l - p))
            .sum()
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let ax = self.matrix.forward(x).expect("grid checked by caller");
        let mut total = 0.0;
        let r: Vec<f64> = ax
            .iter()
            .zip(&self.line_integrals)
            .zip(&self.weights)
            .map(|((p, l), w)| {
                total += 0.5 * w * (l - p) * (l - p);
                w * (p - l)
            })
            .collect();
        grad.copy_from_slice(&self.matrix.back(&r).expect("ray count checked"));
        total
    }
}
