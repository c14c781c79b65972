//! Parallel-beam system model with exact ray/pixel intersection lengths.
//!
//! The image is centred on the rotation axis. Pixel `(row, col)` covers
//! `x ∈ [x₀ + col·Δ, x₀ + (col+1)·Δ]` with `x₀ = −width·Δ/2` and rows run
//! downward from `y = height·Δ/2`. For view angle θ and detector offset `t`
//! the ray is `{ t·n + l·e }` with `n = (cos θ, sin θ)` and `e = (−sin θ, cos θ)`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{Grid, Image, Sinogram, SinogramKind};

/// FWHM = 2√(2 ln 2)·σ.
pub const FWHM_PER_SIGMA: f64 = 2.3548;
const BLUR_TRUNCATION_SIGMAS: f64 = 4.0;
const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub detectors: usize,
    /// Radians, strictly increasing.
    pub angles: Vec<f64>,
    /// mm
    pub detector_pitch: f64,
    /// mm
    pub pixel_size: f64,
    /// Detector-space Gaussian blur, FWHM in mm; 0 disables.
    pub fwhm_blur: f64,
}

impl ScanGeometry {
    /// `views` angles equally spaced over [0, 2π).
    pub fn parallel(detectors: usize, views: usize, detector_pitch: f64, pixel_size: f64, fwhm_blur: f64) -> Self {
        let angles = (0..views).map(|k| 2.0 * std::f64::consts::PI * k as f64 / views as f64).collect();
        ScanGeometry { detectors, angles, detector_pitch, pixel_size, fwhm_blur }
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn rays(&self) -> usize {
        self.detectors * self.angles.len()
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        if !(self.detector_pitch.is_finite() && self.detector_pitch > 0.0) {
            return Err(Error::DegenerateGeometry(format!("detector pitch {}", self.detector_pitch)));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::DegenerateGeometry(format!("pixel size {}", self.pixel_size)));
        }
        if !(self.fwhm_blur.is_finite() && self.fwhm_blur >= 0.0) {
            return Err(Error::DegenerateGeometry(format!("blur FWHM {}", self.fwhm_blur)));
        }
        if self.detectors == 0 || self.angles.is_empty() {
            return Err(Error::DegenerateGeometry("no detectors or no views".into()));
        }
        if self.angles.windows(2).any(|w| !(w[1] > w[0])) || self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::DegenerateGeometry("angles must be finite and strictly increasing".into()));
        }
        if self.detectors < grid.width {
            return Err(Error::DegenerateGeometry(format!(
                "{} detectors cannot cover a {}-pixel-wide image",
                self.detectors, grid.width
            )));
        }
        Ok(())
    }

    /// Signed offset of detector bin `d` from the rotation axis, mm.
    pub fn detector_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.detectors as f64 - 1.0) / 2.0) * self.detector_pitch
    }

    /// Stable key for the on-disk matrix cache.
    pub fn cache_key(&self, grid: Grid) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            version: u32,
            geometry: &'a ScanGeometry,
            grid: Grid,
        }
        let text = serde_json::to_string(&Key { version: CACHE_FORMAT_VERSION, geometry: self, grid })
            .expect("geometry serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

/// Row-compressed I×J matrix of intersection lengths (mm), with its transpose
/// kept alongside so both products parallelize without write conflicts.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix {
    geometry: ScanGeometry,
    grid: Grid,
    rows: Csr,
    cols: Csr,
}

#[derive(Clone, Debug, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in rows {
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            offsets.push(indices.len());
        }
        Csr { offsets, indices, values }
    }

    fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0usize; n_cols + 1];
        for &j in &self.indices {
            counts[j as usize + 1] += 1;
        }
        for k in 0..n_cols {
            counts[k + 1] += counts[k];
        }
        let offsets = counts.clone();
        let mut next = counts;
        let mut indices = vec![0u32; self.indices.len()];
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                let slot = next[j as usize];
                indices[slot] = i as u32;
                values[slot] = v;
                next[j as usize] += 1;
            }
        }
        Csr { offsets, indices, values }
    }

    fn multiply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .into_par_iter()
            .with_min_len(64)
            .map(|i| {
                let (idx, val) = self.row(i);
                idx.iter().zip(val).map(|(&j, &v)| v * x[j as usize]).sum()
            })
            .collect()
    }
}

/// Exact chord lengths of one ray through the pixel grid, sorted by pixel index.
fn trace_ray(theta: f64, offset: f64, grid: Grid, pixel: f64) -> Vec<(u32, f64)> {
    let (s, c) = theta.sin_cos();
    let (px, py) = (offset * c, offset * s);
    let (ex, ey) = (-s, c);
    let x0 = -(grid.width as f64) * pixel / 2.0;
    let y_top = grid.height as f64 * pixel / 2.0;
    let x1 = x0 + grid.width as f64 * pixel;
    let y_bot = y_top - grid.height as f64 * pixel;
    // tolerance for direction components that are zero up to rounding of sin/cos
    let tiny = 1e-12;

    let mut enter = f64::NEG_INFINITY;
    let mut exit = f64::INFINITY;
    let mut crossings: Vec<f64> = Vec::with_capacity(grid.width + grid.height + 2);

    if ex.abs() > tiny {
        let (a, b) = ((x0 - px) / ex, (x1 - px) / ex);
        enter = enter.max(a.min(b));
        exit = exit.min(a.max(b));
        crossings.extend((0..=grid.width).map(|i| (x0 + i as f64 * pixel - px) / ex));
    } else if !(px >= x0 && px < x1) {
        return Vec::new();
    }
    if ey.abs() > tiny {
        let (a, b) = ((y_bot - py) / ey, (y_top - py) / ey);
        enter = enter.max(a.min(b));
        exit = exit.min(a.max(b));
        crossings.extend((0..=grid.height).map(|i| (y_top - i as f64 * pixel - py) / ey));
    } else if !(py > y_bot && py <= y_top) {
        return Vec::new();
    }
    if !(exit > enter) {
        return Vec::new();
    }

    crossings.retain(|l| *l > enter && *l < exit);
    crossings.push(enter);
    crossings.push(exit);
    crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));

    let min_len = 1e-12 * pixel;
    let mut hits: Vec<(u32, f64)> = Vec::with_capacity(crossings.len());
    for w in crossings.windows(2) {
        let len = w[1] - w[0];
        if len <= min_len {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let (mx, my) = (px + mid * ex, py + mid * ey);
        let col = ((mx - x0) / pixel).floor();
        let row = ((y_top - my) / pixel).floor();
        if col < 0.0 || row < 0.0 || col >= grid.width as f64 || row >= grid.height as f64 {
            continue;
        }
        hits.push((grid.index(row as usize, col as usize) as u32, len));
    }
    merge_sorted(hits)
}

fn merge_sorted(mut entries: Vec<(u32, f64)>) -> Vec<(u32, f64)> {
    entries.sort_by_key(|e| e.0);
    let mut out: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
    for (j, v) in entries {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += v,
            _ => out.push((j, v)),
        }
    }
    out
}

/// Column-normalized Gaussian spread across detector bins: `w[d][d']` is the
/// share of source bin d' landing in bin d, and every column sums to one.
fn blur_weights(geom: &ScanGeometry) -> Vec<Vec<(usize, f64)>> {
    let n = geom.detectors;
    let sigma = geom.fwhm_blur / FWHM_PER_SIGMA;
    let reach = (BLUR_TRUNCATION_SIGMAS * sigma / geom.detector_pitch).floor() as isize;
    let mut targets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for src in 0..n {
        let mut col: Vec<(usize, f64)> = Vec::new();
        for k in -reach..=reach {
            let d = src as isize + k;
            if d < 0 || d >= n as isize {
                continue;
            }
            let dist = k as f64 * geom.detector_pitch;
            col.push((d as usize, (-0.5 * (dist / sigma).powi(2)).exp()));
        }
        let total: f64 = col.iter().map(|c| c.1).sum();
        for (d, w) in col {
            targets[d].push((src, w / total));
        }
    }
    targets
}

impl SystemMatrix {
    pub fn build(geom: &ScanGeometry, grid: Grid) -> Result<Self> {
        geom.validate(grid)?;
        let blur = if geom.fwhm_blur > 0.0 { Some(blur_weights(geom)) } else { None };
        let per_view: Vec<Vec<Vec<(u32, f64)>>> = geom
            .angles
            .par_iter()
            .map(|&theta| {
                let raw: Vec<Vec<(u32, f64)>> = (0..geom.detectors)
                    .map(|d| trace_ray(theta, geom.detector_offset(d), grid, geom.pixel_size))
                    .collect();
                match &blur {
                    None => raw,
                    Some(w) => w
                        .iter()
                        .map(|sources| {
                            let mixed = sources
                                .iter()
                                .flat_map(|&(src, wt)| raw[src].iter().map(move |&(j, v)| (j, wt * v)))
                                .collect();
                            merge_sorted(mixed)
                        })
                        .collect(),
                }
            })
            .collect();
        let rows = Csr::from_rows(per_view.into_iter().flatten().collect());
        let cols = rows.transpose(grid.len());
        Ok(SystemMatrix { geometry: geom.clone(), grid, rows, cols })
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn n_rays(&self) -> usize {
        self.rows.n_rows()
    }

    pub fn n_pixels(&self) -> usize {
        self.grid.len()
    }

    pub fn nnz(&self) -> usize {
        self.rows.values.len()
    }

    /// Nonzero entries of ray `i` as (pixel index, length).
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (idx, val) = self.rows.row(i);
        idx.iter().zip(val).map(|(&j, &v)| (j as usize, v))
    }

    /// Ax for a flat image.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.grid.check(x)?;
        Ok(self.rows.multiply(x))
    }

    /// Aᵀs for a flat sinogram.
    pub fn back(&self, s: &[f64]) -> Result<Vec<f64>> {
        if s.len() != self.n_rays() {
            return Err(Error::LengthMismatch { expected: self.n_rays(), actual: s.len() });
        }
        Ok(self.cols.multiply(s))
    }

    pub fn forward_project(&self, x: &Image) -> Result<Sinogram> {
        if x.grid() != self.grid {
            return Err(Error::dims(format!("image grid {:?} vs matrix grid {:?}", x.grid(), self.grid)));
        }
        let values = self.forward(x.values())?;
        Sinogram::new(self.geometry.detectors, self.geometry.angles.clone(), SinogramKind::LineIntegrals, values)
    }

    pub fn back_project(&self, s: &Sinogram) -> Result<Vec<f64>> {
        if s.detectors() != self.geometry.detectors || s.views() != self.geometry.views() {
            return Err(Error::dims(format!(
                "sinogram {}x{} vs geometry {}x{}",
                s.detectors(),
                s.views(),
                self.geometry.detectors,
                self.geometry.views()
            )));
        }
        self.back(s.values())
    }

    /// Loads `<dir>/<key>.sysmat` when its descriptor matches, otherwise builds
    /// the matrix and writes the cache.
    pub fn load_or_build(dir: &Path, geom: &ScanGeometry, grid: Grid) -> Result<Self> {
        let key = geom.cache_key(grid);
        if let Ok(m) = Self::read_cache(dir, &key) {
            if m.geometry == *geom && m.grid == grid {
                return Ok(m);
            }
            log::warn!("system matrix cache {key} does not match the requested geometry; rebuilding");
        }
        let m = Self::build(geom, grid)?;
        m.write_cache(dir)?;
        Ok(m)
    }

    pub fn write_cache(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let key = self.geometry.cache_key(self.grid);
        let mut bytes = Vec::with_capacity(self.rows.offsets.len() * 8 + self.nnz() * 12);
        for &o in &self.rows.offsets {
            bytes.extend_from_slice(&(o as u64).to_le_bytes());
        }
        for &j in &self.rows.indices {
            bytes.extend_from_slice(&j.to_le_bytes());
        }
        for &v in &self.rows.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(format!("{key}.sysmat"));
        fs::write(&path, bytes)?;
        let desc = CacheDescriptor {
            version: CACHE_FORMAT_VERSION,
            key: key.clone(),
            rows: self.n_rays(),
            cols: self.n_pixels(),
            nnz: self.nnz(),
            offset_type: "u64le".into(),
            index_type: "u32le".into(),
            value_type: "f64le".into(),
            geometry: self.geometry.clone(),
            grid: self.grid,
        };
        fs::write(dir.join(format!("{key}.json")), serde_json::to_string_pretty(&desc)?)?;
        Ok(path)
    }

    fn read_cache(dir: &Path, key: &str) -> Result<Self> {
        let desc_path = dir.join(format!("{key}.json"));
        let desc: CacheDescriptor = serde_json::from_str(&fs::read_to_string(&desc_path)?)?;
        let malformed =
            |reason: &str| Error::Malformed { path: desc_path.display().to_string(), reason: reason.to_string() };
        if desc.version != CACHE_FORMAT_VERSION {
            return Err(malformed("unsupported cache version"));
        }
        let bytes = fs::read(dir.join(format!("{key}.sysmat")))?;
        let expected = (desc.rows + 1) * 8 + desc.nnz * 12;
        if bytes.len() != expected || desc.cols != desc.grid.len() {
            return Err(malformed("size does not match descriptor"));
        }
        let (off_b, rest) = bytes.split_at((desc.rows + 1) * 8);
        let (idx_b, val_b) = rest.split_at(desc.nnz * 4);
        let offsets: Vec<usize> =
            off_b.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        let indices: Vec<u32> = idx_b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let values: Vec<f64> = val_b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if offsets.last() != Some(&desc.nnz)
            || offsets.windows(2).any(|w| w[1] < w[0])
            || indices.iter().any(|&j| j as usize >= desc.cols)
        {
            return Err(malformed("inconsistent row offsets or column indices"));
        }
        let rows = Csr { offsets, indices, values };
        let cols = rows.transpose(desc.cols);
        Ok(SystemMatrix { geometry: desc.geometry, grid: desc.grid, rows, cols })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheDescriptor {
    version: u32,
    key: String,
    rows: usize,
    cols: usize,
    nnz: usize,
    offset_type: String,
    index_type: String,
    value_type: String,
    geometry: ScanGeometry,
    grid: Grid,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axial_ray_through_single_pixel() {
        let geom = ScanGeometry { detectors: 1, angles: vec![0.0], detector_pitch: 1.0, pixel_size: 2.5, fwhm_blur: 0.0 };
        let a = SystemMatrix::build(&geom, Grid::square(1)).unwrap();
        let row: Vec<_> = a.row(0).collect();
        assert_eq!(row.len(), 1);
        assert!((row[0].1 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn diagonal_ray_through_single_pixel() {
        let geom = ScanGeometry::parallel(1, 8, 1.0, 1.5, 0.0);
        let a = SystemMatrix::build(&geom, Grid::square(1)).unwrap();
        // view 1 is at 45°
        let row: Vec<_> = a.row(1).collect();
        assert!((row[0].1 - 1.5 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_pitch_is_degenerate() {
        let geom = ScanGeometry::parallel(4, 4, 0.0, 1.0, 0.0);
        assert!(matches!(SystemMatrix::build(&geom, Grid::square(4)), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn too_few_detectors_rejected() {
        let geom = ScanGeometry::parallel(3, 4, 1.0, 1.0, 0.0);
        assert!(SystemMatrix::build(&geom, Grid::square(4)).is_err());
    }

    #[test]
    fn non_increasing_angles_rejected() {
        let geom = ScanGeometry { detectors: 4, angles: vec![0.0, 1.0, 1.0], detector_pitch: 1.0, pixel_size: 1.0, fwhm_blur: 0.0 };
        assert!(SystemMatrix::build(&geom, Grid::square(4)).is_err());
    }

    #[test]
    fn chord_lengths_match_circle_geometry() {
        // Total length of any ray inside the square equals its chord through the square.
        let grid = Grid::square(10);
        let geom = ScanGeometry::parallel(15, 7, 0.7, 1.0, 0.0);
        let a = SystemMatrix::build(&geom, grid).unwrap();
        let ones = vec![1.0; grid.len()];
        let s = a.forward(&ones).unwrap();
        for (v, &theta) in geom.angles.iter().enumerate() {
            for d in 0..geom.detectors {
                let t = geom.detector_offset(d);
                // analytic chord of the line through the [-5,5]² square
                let (sn, cs) = theta.sin_cos();
                let (px, py, ex, ey) = (t * cs, t * sn, -sn, cs);
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (p, e) in [(px, ex), (py, ey)] {
                    if e.abs() > 1e-12 {
                        let (a1, b1) = ((-5.0 - p) / e, (5.0 - p) / e);
                        lo = lo.max(a1.min(b1));
                        hi = hi.min(a1.max(b1));
                    }
                }
                let chord = (hi - lo).max(0.0);
                assert!((s[v * geom.detectors + d] - chord).abs() < 1e-9, "view {v} det {d}");
            }
        }
    }

    #[test]
    fn blur_conserves_per_view_path_length() {
        let grid = Grid::square(12);
        let sharp = SystemMatrix::build(&ScanGeometry::parallel(16, 6, 1.0, 1.0, 0.0), grid).unwrap();
        let blurred = SystemMatrix::build(&ScanGeometry::parallel(16, 6, 1.0, 1.0, 2.0), grid).unwrap();
        let ones = vec![1.0; grid.len()];
        let (a, b) = (sharp.forward(&ones).unwrap(), blurred.forward(&ones).unwrap());
        for v in 0..6 {
            let sa: f64 = a[v * 16..(v + 1) * 16].iter().sum();
            let sb: f64 = b[v * 16..(v + 1) * 16].iter().sum();
            assert!((sa - sb).abs() <= 1e-9 * sa.max(1.0));
        }
        // each pixel's total weight per view is conserved as well
        let (ca, cb) = (sharp.back(&vec![1.0; 96]).unwrap(), blurred.back(&vec![1.0; 96]).unwrap());
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn cache_round_trip_and_mismatch_rebuild() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::square(6);
        let geom = ScanGeometry::parallel(8, 5, 1.0, 1.0, 1.5);
        let built = SystemMatrix::load_or_build(dir.path(), &geom, grid).unwrap();
        let key = geom.cache_key(grid);
        assert!(dir.path().join(format!("{key}.sysmat")).exists());
        let loaded = SystemMatrix::load_or_build(dir.path(), &geom, grid).unwrap();
        assert_eq!(built, loaded);

        // a corrupted descriptor forces a rebuild
        fs::write(dir.path().join(format!("{key}.json")), "{}").unwrap();
        let rebuilt = SystemMatrix::load_or_build(dir.path(), &geom, grid).unwrap();
        assert_eq!(rebuilt, built);

        let other = ScanGeometry::parallel(8, 6, 1.0, 1.0, 1.5);
        assert_ne!(other.cache_key(grid), key);
    }
}
