//! Value types shared by every stage of the pipeline.
//!
//! All images are stored row-major as flat `f64` buffers with explicit
//! dimensions. Rows run top to bottom, columns left to right.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width and height of a 2D pixel array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Grid { width, height }
    }

    pub fn square(side: usize) -> Self {
        Grid { width: side, height: side }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub(crate) fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), actual: values.len() });
        }
        Ok(())
    }
}

/// A square attenuation map in mm⁻¹.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_size: f64,
    values: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixel_size: f64, values: Vec<f64>) -> Result<Self> {
        if width != height {
            return Err(Error::dims(format!("image must be square, got {width}x{height}")));
        }
        if width == 0 {
            return Err(Error::Empty("image"));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::param(format!("pixel size must be positive, got {pixel_size}")));
        }
        Grid::new(width, height).check(&values)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Image { width, height, pixel_size, values })
    }

    pub fn zeros(side: usize, pixel_size: f64) -> Self {
        Image::new(side, side, pixel_size, vec![0.0; side * side]).expect("valid zero image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.width, self.height)
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Same geometry, new pixel values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Image::new(self.width, self.height, self.pixel_size, values)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    /// Rescales to unit maximum. All-zero images are returned unchanged.
    pub fn normalized_unit_max(&self) -> Image {
        let m = self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if m == 0.0 {
            return self.clone();
        }
        Image { values: self.values.iter().map(|v| v / m).collect(), ..self.clone() }
    }
}

/// K square filters of `filter_size × filter_size` taps, stored filter after filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    filter_size: usize,
    count: usize,
    coefficients: Vec<f64>,
}

impl FilterBank {
    pub fn new(filter_size: usize, count: usize, coefficients: Vec<f64>) -> Result<Self> {
        if filter_size == 0 || count == 0 {
            return Err(Error::Empty("filter bank"));
        }
        let expected = filter_size * filter_size * count;
        if coefficients.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: coefficients.len() });
        }
        if let Some(i) = coefficients.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(FilterBank { filter_size, count, coefficients })
    }

    /// Filters are the columns of a P×K matrix.
    pub fn from_matrix(filter_size: usize, m: &DMatrix<f64>) -> Result<Self> {
        let p = filter_size * filter_size;
        if m.nrows() != p {
            return Err(Error::dims(format!("expected {p} rows, got {}", m.nrows())));
        }
        // nalgebra is column-major, so the column stack is already filter-after-filter
        FilterBank::new(filter_size, m.ncols(), m.as_slice().to_vec())
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.taps(), self.count, &self.coefficients)
    }

    pub fn filter_size(&self) -> usize {
        self.filter_size
    }

    /// Number of taps per filter (P).
    pub fn taps(&self) -> usize {
        self.filter_size * self.filter_size
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        let p = self.taps();
        &self.coefficients[k * p..(k + 1) * p]
    }

    pub fn filters(&self) -> impl Iterator<Item = &[f64]> {
        self.coefficients.chunks_exact(self.taps())
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Frobenius distance of the stacked bank from the scaled tight-frame set.
    ///
    /// With K ≥ P this is ‖M Mᵀ − I_P/P‖_F; an undercomplete bank (K < P) is
    /// measured through its Gram matrix ‖Mᵀ M − I_K/P‖_F instead.
    pub fn tight_frame_residual(&self) -> f64 {
        let m = self.to_matrix();
        let p = self.taps();
        let scale = 1.0 / p as f64;
        let gram = if self.count >= p { &m * m.transpose() } else { m.transpose() * &m };
        let n = gram.nrows();
        (gram - DMatrix::<f64>::identity(n, n) * scale).norm()
    }
}

/// Feature maps of one image under every filter of a bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    grid: Grid,
    maps: Vec<Vec<f64>>,
}

impl FeatureStack {
    pub fn new(grid: Grid, maps: Vec<Vec<f64>>) -> Result<Self> {
        for m in &maps {
            grid.check(m)?;
        }
        Ok(FeatureStack { grid, maps })
    }

    pub fn zeros(grid: Grid, count: usize) -> Self {
        FeatureStack { grid, maps: vec![vec![0.0; grid.len()]; count] }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn count(&self) -> usize {
        self.maps.len()
    }

    pub fn map(&self, k: usize) -> &[f64] {
        &self.maps[k]
    }

    pub fn maps(&self) -> &[Vec<f64>] {
        &self.maps
    }

    pub(crate) fn maps_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.maps
    }

    /// Number of nonzero feature coefficients over all maps.
    pub fn nonzeros(&self) -> usize {
        self.maps.iter().map(|m| m.iter().filter(|v| **v != 0.0).count()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SinogramKind {
    /// Detected photon counts.
    Counts,
    /// Expected counts; nonnegative but not integer.
    MeanCounts,
    /// Line integrals in mm⁻¹·mm.
    LineIntegrals,
}

/// Detector × angle data, stored angle-major: ray `i = view * detectors + bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    detectors: usize,
    angles: Vec<f64>,
    kind: SinogramKind,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(detectors: usize, angles: Vec<f64>, kind: SinogramKind, values: Vec<f64>) -> Result<Self> {
        let expected = detectors * angles.len();
        if values.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        match kind {
            SinogramKind::Counts => {
                if let Some(i) = values.iter().position(|v| *v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::param(format!(
                        "count sinogram entry {i} is not a nonnegative integer: {}",
                        values[i]
                    )));
                }
            }
            SinogramKind::MeanCounts => {
                if let Some(i) = values.iter().position(|v| *v < 0.0) {
                    return Err(Error::Negative { index: i, value: values[i] });
                }
            }
            SinogramKind::LineIntegrals => {}
        }
        Ok(Sinogram { detectors, angles, kind, values })
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn kind(&self) -> SinogramKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Two co-registered quantities at a low and a high source energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair<T> {
    pub low: T,
    pub high: T,
    /// Source energies in keV, low first.
    pub labels: [f64; 2],
}

impl<T> ChannelPair<T> {
    pub fn new(low: T, high: T, labels: [f64; 2]) -> Self {
        ChannelPair { low, high, labels }
    }

    pub fn as_array(&self) -> [&T; 2] {
        [&self.low, &self.high]
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> ChannelPair<U> {
        ChannelPair { low: f(self.low), high: f(self.high), labels: self.labels }
    }

    pub fn map_ref<U>(&self, mut f: impl FnMut(&T) -> U) -> ChannelPair<U> {
        ChannelPair { low: f(&self.low), high: f(&self.high), labels: self.labels }
    }

    pub fn swapped(self) -> ChannelPair<T> {
        ChannelPair { low: self.high, high: self.low, labels: [self.labels[1], self.labels[0]] }
    }

    pub fn into_vec(self) -> Vec<T> {
        vec![self.low, self.high]
    }

    pub fn from_vec(mut v: Vec<T>, labels: [f64; 2]) -> Result<Self> {
        if v.len() != 2 {
            return Err(Error::dims(format!("expected 2 channels, got {}", v.len())));
        }
        let high = v.pop().unwrap();
        let low = v.pop().unwrap();
        Ok(ChannelPair { low, high, labels })
    }
}

impl ChannelPair<Image> {
    /// Checks that both channels share one grid and pixel size.
    pub fn validate(&self) -> Result<()> {
        if self.low.grid() != self.high.grid() || self.low.pixel_size() != self.high.pixel_size() {
            return Err(Error::dims("channel images differ in geometry"));
        }
        Ok(())
    }
}
