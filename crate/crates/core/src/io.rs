//! On-disk formats.
//!
//! Every array is a headerless little-endian `f64` buffer (`<name>.raw`)
//! with a JSON sidecar (`<name>.json`) carrying its shape and units. Filter
//! banks use `<name>.bank.raw` / `<name>.bank.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FilterBank, Image, Sinogram, SinogramKind};

pub const ATTENUATION_UNITS: &str = "mm^-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub width: usize,
    pub height: usize,
    /// mm
    pub pixel_size: f64,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramHeader {
    pub detectors: usize,
    /// Radians, one per view.
    pub angles: Vec<f64>,
    pub kind: SinogramKind,
    pub layout: String,
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kev: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankHeader {
    /// Taps per filter (P).
    pub taps: usize,
    /// Filters in the bank (K).
    pub count: usize,
    pub filter_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_kev: Option<f64>,
    /// Hash of the training inputs and configuration.
    pub provenance: String,
}

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64(bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::LengthMismatch { expected: expected * 8, actual: bytes.len() });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn image_from_raw(bytes: &[u8], header: &ImageHeader) -> Result<Image> {
    let values = decode_f64(bytes, header.width * header.height)?;
    Image::new(header.width, header.height, header.pixel_size, values)
}

pub fn image_to_raw(img: &Image) -> (Vec<u8>, ImageHeader) {
    let header = ImageHeader {
        width: img.width(),
        height: img.height(),
        pixel_size: img.pixel_size(),
        units: ATTENUATION_UNITS.to_string(),
        energy_kev: None,
    };
    (encode_f64(img.values()), header)
}

pub fn sinogram_from_raw(bytes: &[u8], header: &SinogramHeader) -> Result<Sinogram> {
    let values = decode_f64(bytes, header.detectors * header.angles.len())?;
    Sinogram::new(header.detectors, header.angles.clone(), header.kind, values)
}

pub fn sinogram_to_raw(s: &Sinogram) -> (Vec<u8>, SinogramHeader) {
    let units = match s.kind() {
        SinogramKind::Counts | SinogramKind::MeanCounts => "photons",
        SinogramKind::LineIntegrals => "dimensionless",
    };
    let header = SinogramHeader {
        detectors: s.detectors(),
        angles: s.angles().to_vec(),
        kind: s.kind(),
        layout: "angle-major".to_string(),
        units: units.to_string(),
        energy_kev: None,
    };
    (encode_f64(s.values()), header)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Malformed { path: path.display().to_string(), reason: e.to_string() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes `<stem>.raw` and `<stem>.json`.
pub fn write_image(stem: &Path, img: &Image, energy_kev: Option<f64>) -> Result<()> {
    let (bytes, mut header) = image_to_raw(img);
    header.energy_kev = energy_kev;
    fs::write(with_suffix(stem, ".raw"), bytes)?;
    write_json(&with_suffix(stem, ".json"), &header)
}

pub fn read_image(stem: &Path) -> Result<(Image, ImageHeader)> {
    let header: ImageHeader = read_json(&with_suffix(stem, ".json"))?;
    let bytes = fs::read(with_suffix(stem, ".raw"))?;
    Ok((image_from_raw(&bytes, &header)?, header))
}

pub fn write_sinogram(stem: &Path, s: &Sinogram, energy_kev: Option<f64>) -> Result<()> {
    let (bytes, mut header) = sinogram_to_raw(s);
    header.energy_kev = energy_kev;
    fs::write(with_suffix(stem, ".raw"), bytes)?;
    write_json(&with_suffix(stem, ".json"), &header)
}

pub fn read_sinogram(stem: &Path) -> Result<(Sinogram, SinogramHeader)> {
    let header: SinogramHeader = read_json(&with_suffix(stem, ".json"))?;
    let bytes = fs::read(with_suffix(stem, ".raw"))?;
    Ok((sinogram_from_raw(&bytes, &header)?, header))
}

/// Writes `<stem>.bank.raw` and `<stem>.bank.json`.
pub fn write_bank(stem: &Path, bank: &FilterBank, energy_kev: Option<f64>, provenance: &str) -> Result<()> {
    let header = BankHeader {
        taps: bank.taps(),
        count: bank.count(),
        filter_size: bank.filter_size(),
        energy_kev,
        provenance: provenance.to_string(),
    };
    fs::write(with_suffix(stem, ".bank.raw"), encode_f64(bank.coefficients()))?;
    write_json(&with_suffix(stem, ".bank.json"), &header)
}

pub fn read_bank(stem: &Path) -> Result<(FilterBank, BankHeader)> {
    let json = with_suffix(stem, ".bank.json");
    let header: BankHeader = read_json(&json)?;
    if header.filter_size * header.filter_size != header.taps {
        return Err(Error::Malformed {
            path: json.display().to_string(),
            reason: format!("taps {} is not filter_size² for filter_size {}", header.taps, header.filter_size),
        });
    }
    let bytes = fs::read(with_suffix(stem, ".bank.raw"))?;
    let coeffs = decode_f64(&bytes, header.taps * header.count)?;
    Ok((FilterBank::new(header.filter_size, header.count, coeffs)?, header))
}
