#![allow(dead_code)]

use mcaol::harness::{make_phantom, normalize_pairs, Preset};
use mcaol::learning::random_tight_frame;
use mcaol::physics::{mean_counts, sample_poisson, SourceModel};
use mcaol::projector::SystemMatrix;
use mcaol::{ChannelPair, FilterBank, Image, Sinogram};

/// Torso phantom scanned at 32×32: 48 views, one-pixel blur.
pub fn torso32(intensity: f64, background: f64) -> Preset {
    let px = 406.0 / 32.0;
    Preset {
        name: "torso32".into(),
        side: 32,
        pixel_size: px,
        detectors: 32,
        views: 48,
        fwhm: px,
        intensity,
        background,
        replicates: 3,
    }
}

pub struct Scan {
    pub preset: Preset,
    pub a: SystemMatrix,
    pub src: SourceModel,
    pub gt: ChannelPair<Image>,
}

impl Scan {
    pub fn new(preset: Preset) -> Scan {
        let a = SystemMatrix::build(&preset.geometry(), mcaol::Grid::square(preset.side)).unwrap();
        let src = preset.source().unwrap();
        let gt = make_phantom(&preset.phantom()).unwrap();
        Scan { preset, a, src, gt }
    }

    pub fn noiseless(&self) -> [Sinogram; 2] {
        let [lo, hi] = self.gt.as_array();
        [mean_counts(&self.a, lo, &self.src).unwrap(), mean_counts(&self.a, hi, &self.src).unwrap()]
    }

    pub fn noisy(&self, seed: u64) -> [Sinogram; 2] {
        let [lo, hi] = self.noiseless();
        [sample_poisson(&lo, 2 * seed).unwrap(), sample_poisson(&hi, 2 * seed + 1).unwrap()]
    }

    /// Mean channel maxima of a small training set, used to map unit-max weights into mm⁻¹.
    pub fn scale(&self) -> [f64; 2] {
        normalize_pairs(&self.preset.training_pairs(4, 77).unwrap()).unwrap().1
    }
}

pub fn random_banks(filter_size: usize, seed: u64) -> ChannelPair<FilterBank> {
    let k = filter_size * filter_size;
    ChannelPair::new(
        random_tight_frame(filter_size, k, seed).unwrap(),
        random_tight_frame(filter_size, k, seed + 1).unwrap(),
        [60.0, 120.0],
    )
}
