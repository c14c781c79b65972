//! Phantoms, noise-replicate sweeps and the bias/noise metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bank, write_bank};
use crate::learning::{caol_train, mcaol_train, TrainConfig};
use crate::optimizer::SolverConfig;
use crate::physics::{mean_counts, sample_poisson, SourceModel};
use crate::projector::{ScanGeometry, SystemMatrix};
use crate::recon::{
    caol_pwls_reconstruct, caol_reconstruct, jtv_reconstruct, mcaol_reconstruct, mle_reconstruct, tv_reconstruct, ChannelData,
    ReconConfig,
};
use crate::types::{ChannelPair, FilterBank, Image, Sinogram};

pub const ENERGIES_KEV: [f64; 2] = [60.0, 120.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// (x, y) in mm, x to the right and y up, origin at the grid centre.
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Counter-clockwise, degrees.
    pub rotation: f64,
    /// Attenuation added inside, mm⁻¹, per channel.
    pub attenuation: [f64; 2],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub side: usize,
    pub pixel_size: f64,
    pub ellipses: Vec<Ellipse>,
}

impl Phantom {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || !(self.pixel_size > 0.0) {
            return Err(Error::param("phantom grid must be nonempty with positive pixel size"));
        }
        for (i, e) in self.ellipses.iter().enumerate() {
            if e.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::param(format!("ellipse {i} has a non-positive semi-axis")));
            }
            if e.attenuation.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                return Err(Error::param(format!("ellipse {i} has a negative or non-finite attenuation")));
            }
        }
        Ok(())
    }
}

/// Pixel value = sum of the attenuations of every ellipse covering the pixel centre.
pub fn make_phantom(spec: &Phantom) -> Result<ChannelPair<Image>> {
    spec.validate()?;
    let n = spec.side;
    let half = (n as f64 - 1.0) / 2.0;
    let mut low = vec![0.0; n * n];
    let mut high = vec![0.0; n * n];
    for r in 0..n {
        let y = (half - r as f64) * spec.pixel_size;
        for c in 0..n {
            let x = (c as f64 - half) * spec.pixel_size;
            for e in spec.ellipses.iter().filter(|e| e.contains(x, y)) {
                low[r * n + c] += e.attenuation[0];
                high[r * n + c] += e.attenuation[1];
            }
        }
    }
    Ok(ChannelPair::new(
        Image::new(n, n, spec.pixel_size, low)?,
        Image::new(n, n, spec.pixel_size, high)?,
        ENERGIES_KEV,
    ))
}

fn ellipse(center: [f64; 2], semi_axes: [f64; 2], rotation: f64, attenuation: [f64; 2]) -> Ellipse {
    Ellipse { center, semi_axes, rotation, attenuation }
}

/// Torso cross-section in a 406 mm field of view, values at 60 / 120 keV.
///
/// Fat body outline with soft-tissue, organ, bone and iodinated-vessel
/// increments. Iodine and bone differ most between the channels.
pub fn torso_ellipses() -> Vec<Ellipse> {
    let mut v = vec![
        ellipse([0.0, 0.0], [175.0, 125.0], 0.0, [0.0185, 0.0149]),
        ellipse([0.0, -5.0], [150.0, 100.0], 0.0, [0.0025, 0.0018]),
        ellipse([-60.0, 20.0], [70.0, 55.0], 20.0, [0.0015, 0.0010]),
        ellipse([75.0, 30.0], [35.0, 25.0], -30.0, [0.0012, 0.0008]),
        ellipse([-55.0, -45.0], [22.0, 32.0], 15.0, [0.0030, 0.0016]),
        ellipse([55.0, -45.0], [22.0, 32.0], -15.0, [0.0030, 0.0016]),
        ellipse([0.0, -78.0], [24.0, 20.0], 0.0, [0.0250, 0.0120]),
        ellipse([14.0, -45.0], [13.0, 13.0], 0.0, [0.0100, 0.0040]),
        ellipse([-16.0, -45.0], [15.0, 11.0], 0.0, [0.0060, 0.0025]),
        ellipse([-72.0, 32.0], [11.0, 11.0], 0.0, [0.0030, 0.0012]),
        ellipse([-40.0, 5.0], [8.0, 8.0], 0.0, [0.0045, 0.0018]),
    ];
    for i in 0..8 {
        let t = (22.5 + 45.0 * i as f64).to_radians();
        v.push(ellipse([158.0 * t.cos(), 110.0 * t.sin()], [10.0, 6.0], t.to_degrees(), [0.0200, 0.0100]));
    }
    v
}

/// Randomly perturbed torso: organ shifts, scalings, rotations and value jitter, plus lesions.
pub fn perturbed_torso(side: usize, pixel_size: f64, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.random_range(0.88..1.04);
    let mut ellipses: Vec<Ellipse> = torso_ellipses()
        .into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            e.center = [e.center[0] * scale, e.center[1] * scale];
            e.semi_axes = [e.semi_axes[0] * scale, e.semi_axes[1] * scale];
            if i >= 2 {
                e.center[0] += rng.random_range(-8.0..8.0);
                e.center[1] += rng.random_range(-8.0..8.0);
                e.semi_axes[0] *= rng.random_range(0.85..1.15);
                e.semi_axes[1] *= rng.random_range(0.85..1.15);
                e.rotation += rng.random_range(-15.0..15.0);
            }
            let jitter = rng.random_range(0.85..1.15);
            e.attenuation = [e.attenuation[0] * jitter, e.attenuation[1] * jitter];
            e
        })
        .collect();
    for _ in 0..rng.random_range(1..4) {
        let r = rng.random_range(5.0..14.0);
        let iodine = rng.random_bool(0.5);
        let att = if iodine { [0.0060, 0.0024] } else { [0.0025, 0.0015] };
        ellipses.push(ellipse(
            [rng.random_range(-110.0..110.0) * scale, rng.random_range(-70.0..70.0) * scale],
            [r, r * rng.random_range(0.7..1.0)],
            rng.random_range(0.0..180.0),
            att,
        ));
    }
    Phantom { side, pixel_size, ellipses }
}

/// Acquisition and experiment settings bundled under a name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub side: usize,
    pub pixel_size: f64,
    pub detectors: usize,
    pub views: usize,
    pub fwhm: f64,
    pub intensity: f64,
    pub background: f64,
    pub replicates: usize,
}

impl Preset {
    /// 64×64 sparse-view torso: 60 views, 10⁵ photons, 10 background events.
    pub fn torso64() -> Self {
        let px = 406.0 / 64.0;
        Preset {
            name: "torso64".into(),
            side: 64,
            pixel_size: px,
            detectors: 64,
            views: 60,
            fwhm: 2.0 * px,
            intensity: 1e5,
            background: 10.0,
            replicates: 5,
        }
    }

    /// 64×64 low-dose torso: 120 views, 10³ photons.
    pub fn lowdose64() -> Self {
        Preset { name: "lowdose64".into(), views: 120, intensity: 1e3, ..Preset::torso64() }
    }

    /// Full-size torso: 406 detectors at 1 mm, 2 mm blur, 100 background events.
    pub fn torso406() -> Self {
        Preset {
            name: "torso406".into(),
            side: 406,
            pixel_size: 1.0,
            detectors: 406,
            views: 60,
            fwhm: 2.0,
            intensity: 1e5,
            background: 100.0,
            replicates: 20,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "torso64" => Ok(Preset::torso64()),
            "lowdose64" => Ok(Preset::lowdose64()),
            "torso406" => Ok(Preset::torso406()),
            other => Err(Error::param(format!("unknown preset '{other}' (expected torso64, lowdose64 or torso406)"))),
        }
    }

    pub fn geometry(&self) -> ScanGeometry {
        ScanGeometry::parallel(self.detectors, self.views, self.pixel_size, self.pixel_size, self.fwhm)
    }

    pub fn source(&self) -> Result<SourceModel> {
        SourceModel::new(self.intensity, self.background)
    }

    pub fn phantom(&self) -> Phantom {
        Phantom { side: self.side, pixel_size: self.pixel_size, ellipses: torso_ellipses() }
    }

    /// `count` perturbed torsos, none equal to the ground truth.
    pub fn training_pairs(&self, count: usize, seed: u64) -> Result<Vec<ChannelPair<Image>>> {
        (0..count as u64)
            .map(|l| make_phantom(&perturbed_torso(self.side, self.pixel_size, seed.wrapping_add(l))))
            .collect()
    }
}

/// Per-image unit-max normalization of each channel; also returns the mean channel maxima.
pub fn normalize_pairs(pairs: &[ChannelPair<Image>]) -> Result<(Vec<ChannelPair<Image>>, [f64; 2])> {
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut scale = [0.0; 2];
    for p in pairs {
        scale[0] += p.low.max() / pairs.len() as f64;
        scale[1] += p.high.max() / pairs.len() as f64;
    }
    let normalized = pairs.iter().map(|p| p.map_ref(Image::normalized_unit_max)).collect();
    Ok((normalized, scale))
}

/// Pixels with strictly positive ground truth.
pub fn support_region(gt: &Image) -> Vec<usize> {
    gt.values().iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(j, _)| j).collect()
}

fn check_replicates(recons: &[&Image], region: &[usize]) -> Result<()> {
    if recons.is_empty() {
        return Err(Error::Empty("replicates"));
    }
    if region.is_empty() {
        return Err(Error::Empty("region"));
    }
    let n = recons[0].values().len();
    for r in recons {
        if r.values().len() != n {
            return Err(Error::dims("replicates differ in size"));
        }
    }
    if let Some(j) = region.iter().find(|j| **j >= n) {
        return Err(Error::dims(format!("region pixel {j} outside a {n}-pixel image")));
    }
    Ok(())
}

/// Mean absolute deviation from the ground truth over replicates and region.
pub fn abs_bias(recons: &[&Image], gt: &Image, region: &[usize]) -> Result<f64> {
    check_replicates(recons, region)?;
    if gt.values().len() != recons[0].values().len() {
        return Err(Error::dims("ground truth and replicates differ in size"));
    }
    let mut total = 0.0;
    for &j in region {
        for r in recons {
            total += (r.values()[j] - gt.values()[j]).abs();
        }
    }
    Ok(total / (region.len() * recons.len()) as f64)
}

/// Region-averaged per-pixel replicate standard deviation (1/n normalization).
pub fn std_metric(recons: &[&Image], region: &[usize]) -> Result<f64> {
    check_replicates(recons, region)?;
    if recons.len() < 2 {
        return Err(Error::param("at least two replicates required"));
    }
    let n = recons.len() as f64;
    let mut total = 0.0;
    for &j in region {
        let mean = recons.iter().map(|r| r.values()[j]).sum::<f64>() / n;
        let var = recons.iter().map(|r| (r.values()[j] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    Ok(total / region.len() as f64)
}

/// `‖x − ref‖ / ‖ref‖`.
pub fn nrmse(x: &Image, reference: &Image) -> Result<f64> {
    if x.values().len() != reference.values().len() {
        return Err(Error::dims("images differ in size"));
    }
    let num: f64 = x.values().iter().zip(reference.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.values().iter().map(|b| b * b).sum();
    if den == 0.0 {
        return Err(Error::param("reference image is zero"));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mcaol,
    Caol,
    Tv,
    Jtv,
    None,
    CaolPwls,
}

impl Method {
    pub fn needs_banks(self) -> bool {
        matches!(self, Method::Mcaol | Method::Caol | Method::CaolPwls)
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Method::Mcaol | Method::Jtv)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mcaol => "mcaol",
            Method::Caol => "caol",
            Method::Tv => "tv",
            Method::Jtv => "jtv",
            Method::None => "none",
            Method::CaolPwls => "caol-pwls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mcaol" => Ok(Method::Mcaol),
            "caol" => Ok(Method::Caol),
            "tv" => Ok(Method::Tv),
            "jtv" => Ok(Method::Jtv),
            "none" => Ok(Method::None),
            "caol-pwls" => Ok(Method::CaolPwls),
            other => Err(Error::param(format!("unknown method '{other}'"))),
        }
    }
}

/// Trained banks in the form the reconstructions consume.
#[derive(Clone, Debug)]
pub struct LearnedPriors {
    /// Jointly trained pair.
    pub joint: Option<ChannelPair<FilterBank>>,
    /// Separately trained single-channel banks.
    pub single: Option<ChannelPair<FilterBank>>,
    /// Channel scales the banks were normalized by.
    pub scale: [f64; 2],
    pub train: TrainConfig,
}

/// Which prior kinds to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PriorKinds {
    pub joint: bool,
    pub single: bool,
}

#[derive(Serialize, Deserialize)]
struct PriorsRecord {
    scale: [f64; 2],
    train: TrainConfig,
    joint: bool,
    single: bool,
    provenance: String,
}

impl LearnedPriors {
    /// Trains the requested prior kinds on unit-max-normalized pairs.
    pub fn train(pairs: &[ChannelPair<Image>], cfg: &TrainConfig, kinds: PriorKinds) -> Result<Self> {
        let (normalized, scale) = normalize_pairs(pairs)?;
        let joint = if kinds.joint { Some(mcaol_train(&normalized, cfg)?.0) } else { None };
        let single = if kinds.single {
            let low: Vec<Image> = normalized.iter().map(|p| p.low.clone()).collect();
            let high: Vec<Image> = normalized.iter().map(|p| p.high.clone()).collect();
            Some(ChannelPair::new(caol_train(&low, cfg)?.banks.remove(0), caol_train(&high, cfg)?.banks.remove(0), ENERGIES_KEV))
        } else {
            None
        };
        Ok(LearnedPriors { joint, single, scale, train: cfg.clone() })
    }

    /// Writes `priors.json` and one `<kind>_<keV>kev` bank per channel and kind.
    pub fn save(&self, dir: &Path, provenance: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (kind, banks) in [("joint", &self.joint), ("single", &self.single)] {
            if let Some(b) = banks {
                for (bank, kev) in b.as_array().into_iter().zip(b.labels) {
                    let stem = dir.join(format!("{kind}_{kev}kev"));
                    write_bank(&stem, bank, Some(kev), provenance)?;
                    written.push(stem.with_extension("bank.json"));
                }
            }
        }
        let record = PriorsRecord {
            scale: self.scale,
            train: self.train.clone(),
            joint: self.joint.is_some(),
            single: self.single.is_some(),
            provenance: provenance.to_string(),
        };
        let path = dir.join("priors.json");
        std::fs::write(&path, serde_json::to_string_pretty(&record)?)?;
        written.push(path);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("priors.json");
        let text = std::fs::read_to_string(&path)?;
        let record: PriorsRecord = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed { path: path.display().to_string(), reason: e.to_string() })?;
        let load_kind = |kind: &str| -> Result<ChannelPair<FilterBank>> {
            let low = read_bank(&dir.join(format!("{kind}_{}kev", ENERGIES_KEV[0])))?.0;
            let high = read_bank(&dir.join(format!("{kind}_{}kev", ENERGIES_KEV[1])))?.0;
            Ok(ChannelPair::new(low, high, ENERGIES_KEV))
        };
        Ok(LearnedPriors {
            joint: if record.joint { Some(load_kind("joint")?) } else { None },
            single: if record.single { Some(load_kind("single")?) } else { None },
            scale: record.scale,
            train: record.train,
        })
    }

    /// Joint weights in attenuation units: γ_e / m_e².
    pub fn joint_gammas(&self) -> [f64; 2] {
        [self.train.gammas[0] / self.scale[0].powi(2), self.train.gammas[1] / self.scale[1].powi(2)]
    }

    /// Single-channel ℓ₀ weight in attenuation units: α · m_e².
    pub fn alpha(&self, channel: usize) -> f64 {
        self.train.alpha * self.scale[channel].powi(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodGrid {
    pub method: Method,
    /// Data weights ρ (learned and prior-free) or TV weights β.
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub preset: String,
    pub methods: Vec<MethodGrid>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub intensity: Option<f64>,
    #[serde(default)]
    pub background: Option<f64>,
    #[serde(default)]
    pub views: Option<usize>,
    #[serde(default = "default_outer")]
    pub n_outer: usize,
    #[serde(default = "default_inner")]
    pub inner_iters: usize,
    #[serde(default = "default_init")]
    pub init_iters: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub training: Option<TrainingSpec>,
}

fn default_outer() -> usize {
    12
}
fn default_inner() -> usize {
    25
}
fn default_init() -> usize {
    100
}
fn default_epsilon() -> f64 {
    1e-8
}

/// How a sweep obtains its filter banks when none are supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub pairs: usize,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec { pairs: 10, seed: 1000, config: TrainConfig { max_outer: 30, ..TrainConfig::default() } }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::param("replicate count must be at least 1"));
        }
        if self.methods.is_empty() || self.methods.iter().any(|m| m.params.is_empty()) {
            return Err(Error::param("every method needs a nonempty parameter grid"));
        }
        for m in &self.methods {
            if m.params.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::param(format!("{} grid has a negative or non-finite value", m.method)));
            }
            if m.method != Method::Tv && m.method != Method::Jtv && m.params.iter().any(|p| *p == 0.0) {
                return Err(Error::param(format!("{} data weights must be positive", m.method)));
            }
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        let mut p = Preset::by_name(&self.preset)?;
        if let Some(s) = self.intensity {
            p.intensity = s;
        }
        if let Some(b) = self.background {
            p.background = b;
        }
        if let Some(v) = self.views {
            p.views = v;
        }
        p.replicates = self.replicates;
        Ok(p)
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            n_outer: self.n_outer,
            init_iters: self.init_iters,
            epsilon: self.epsilon,
            inner: SolverConfig::default().with_max_iter(self.inner_iters),
            ..ReconConfig::default()
        }
    }

    pub fn needs_banks(&self) -> bool {
        self.methods.iter().any(|m| m.method.needs_banks())
    }

    /// Prior kinds required by the method list.
    pub fn prior_kinds(&self) -> PriorKinds {
        PriorKinds {
            joint: self.methods.iter().any(|m| m.method == Method::Mcaol),
            single: self.methods.iter().any(|m| matches!(m.method, Method::Caol | Method::CaolPwls)),
        }
    }

    /// Trains the banks the sweep needs from perturbed torsos of its preset.
    pub fn train_priors(&self) -> Result<Option<LearnedPriors>> {
        if !self.needs_banks() {
            return Ok(None);
        }
        let training = self.training.clone().unwrap_or_default();
        let pairs = self.preset()?.training_pairs(training.pairs, training.seed)?;
        LearnedPriors::train(&pairs, &training.config, self.prior_kinds()).map(Some)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub method: Method,
    pub param: f64,
    /// NaN with a single replicate.
    pub std: f64,
    pub absbias: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub channels: ChannelPair<Vec<CurveRow>>,
}

impl Curves {
    /// Smallest AbsBias over the grid of `method` in `channel` (0 = low energy).
    pub fn min_abs_bias(&self, method: Method, channel: usize) -> Option<f64> {
        self.channels.as_array()[channel].iter().filter(|r| r.method == method).map(|r| r.absbias).reduce(f64::min)
    }

    /// Writes `curve_<keV>kev.csv` per channel; returns the paths.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (rows, kev) in self.channels.as_array().into_iter().zip(self.channels.labels) {
            let path = dir.join(format!("curve_{kev}kev.csv"));
            let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
            writeln!(out, "method,param,std,absbias")?;
            for r in rows {
                writeln!(out, "{},{},{},{}", r.method, r.param, r.std, r.absbias)?;
            }
            out.flush()?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Seed of replicate `r` in channel `e`.
pub fn replicate_seed(base: u64, replicate: usize, channel: usize) -> u64 {
    base.wrapping_add(replicate as u64).wrapping_mul(2).wrapping_add(channel as u64)
}

/// Simulated measurements of one replicate.
pub fn simulate_pair(a: &SystemMatrix, gt: &ChannelPair<Image>, src: &SourceModel, seed_base: u64, replicate: usize) -> Result<ChannelPair<Sinogram>> {
    let low = sample_poisson(&mean_counts(a, &gt.low, src)?, replicate_seed(seed_base, replicate, 0))?;
    let high = sample_poisson(&mean_counts(a, &gt.high, src)?, replicate_seed(seed_base, replicate, 1))?;
    Ok(ChannelPair::new(low, high, gt.labels))
}

/// Reconstructs one replicate with one method at one grid value.
pub fn reconstruct_with(
    method: Method,
    param: f64,
    data: &ChannelPair<ChannelData>,
    priors: Option<&LearnedPriors>,
    base: &ReconConfig,
) -> Result<ChannelPair<Image>> {
    let labels = ENERGIES_KEV;
    let missing = || Error::MissingBank(format!("{method} requires trained filter banks"));
    match method {
        Method::Mcaol => {
            let p = priors.ok_or_else(missing)?;
            let banks = p.joint.as_ref().ok_or_else(missing)?;
            let cfg = ReconConfig { rhos: [param, param], gammas: p.joint_gammas(), ..base.clone() };
            mcaol_reconstruct(data, banks, &cfg)?.into_pair(labels)
        }
        Method::Jtv => {
            let cfg = ReconConfig { beta: param, ..base.clone() };
            jtv_reconstruct(data, &cfg)?.into_pair(labels)
        }
        _ => {
            let single = |e: usize, d: &ChannelData| -> Result<Image> {
                let r = match method {
                    Method::Tv => tv_reconstruct(d, 1.0, &ReconConfig { beta: param, ..base.clone() })?,
                    Method::None => mle_reconstruct(d, param, base)?,
                    Method::Caol | Method::CaolPwls => {
                        let p = priors.ok_or_else(missing)?;
                        let banks = p.single.as_ref().ok_or_else(missing)?;
                        let cfg = ReconConfig { alpha: p.alpha(e), ..base.clone() };
                        let bank = banks.as_array()[e];
                        if method == Method::Caol {
                            caol_reconstruct(d, param, bank, &cfg)?
                        } else {
                            caol_pwls_reconstruct(d, param, bank, &cfg)?
                        }
                    }
                    Method::Mcaol | Method::Jtv => unreachable!("joint methods handled above"),
                };
                Ok(r.into_image())
            };
            Ok(ChannelPair::new(single(0, &data.low)?, single(1, &data.high)?, labels))
        }
    }
}

/// Runs every (method, grid value) over the replicates and tabulates AbsBias/STD per channel.
pub fn run_sweep(spec: &SweepSpec, gt: &ChannelPair<Image>, priors: Option<&LearnedPriors>) -> Result<Curves> {
    spec.validate()?;
    if spec.needs_banks() && priors.is_none() {
        return Err(Error::MissingBank("sweep includes learned methods but no banks were supplied".into()));
    }
    gt.validate()?;
    let preset = spec.preset()?;
    let a = SystemMatrix::build(&preset.geometry(), gt.low.grid())?;
    let src = preset.source()?;
    let base = spec.recon_config();
    let data: Vec<ChannelPair<Sinogram>> =
        (0..spec.replicates).map(|r| simulate_pair(&a, gt, &src, spec.seed, r)).collect::<Result<_>>()?;

    let jobs: Vec<(Method, f64, usize)> = spec
        .methods
        .iter()
        .flat_map(|m| m.params.iter().flat_map(move |&p| (0..spec.replicates).map(move |r| (m.method, p, r))))
        .collect();
    let results: Vec<Result<ChannelPair<Image>>> = jobs
        .par_iter()
        .map(|&(method, param, r)| {
            let y = &data[r];
            let pair = ChannelPair::new(ChannelData::new(&a, &y.low, &src), ChannelData::new(&a, &y.high, &src), gt.labels);
            log::info!("{method} param={param} replicate={r}");
            reconstruct_with(method, param, &pair, priors, &base)
        })
        .collect();

    let region = support_region(&gt.low);
    let mut grouped: BTreeMap<usize, Vec<ChannelPair<Image>>> = BTreeMap::new();
    for (i, res) in results.into_iter().enumerate() {
        grouped.entry(i / spec.replicates).or_default().push(res?);
    }
    let mut low = Vec::new();
    let mut high = Vec::new();
    for (g, recons) in grouped {
        let (method, param, _) = jobs[g * spec.replicates];
        for (e, (rows, truth)) in [(&mut low, &gt.low), (&mut high, &gt.high)].into_iter().enumerate() {
            let imgs: Vec<&Image> = recons.iter().map(|p| p.as_array()[e]).collect();
            let std = if imgs.len() < 2 { f64::NAN } else { std_metric(&imgs, &region)? };
            rows.push(CurveRow { method, param, std, absbias: abs_bias(&imgs, truth, &region)? });
        }
    }
    Ok(Curves { channels: ChannelPair::new(low, high, gt.labels) })
}

/// Record written next to every CLI output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub git_describe: Option<String>,
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub parameters: serde_json::Value,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, preset: Option<&str>, parameters: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_describe: git_describe(),
            seed,
            preset: preset.map(str::to_string),
            parameters,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `git describe --always --dirty` of the working directory, if available.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git").args(["describe", "--always", "--dirty"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}
