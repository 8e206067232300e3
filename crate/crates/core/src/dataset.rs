//! Synthetic spectral scenes for desk-scale training and evaluation.
//!
//! A scene is a sum of a few rank-one terms, each a smooth spectral signature
//! times a smooth abundance map (blurred white noise), scaled to `[0, 1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cube::{normalize, SpectralCube};
use crate::error::{argument, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub min_terms: usize,
    pub max_terms: usize,
    /// Range of the Gaussian blur applied to abundance noise, in pixels.
    pub blur_sigma: (f64, f64),
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Self { height, width, bands, min_terms: 3, max_terms: 5, blur_sigma: (2.0, 5.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(argument("scene dimensions must be positive"));
        }
        if self.min_terms == 0 || self.min_terms > self.max_terms {
            return Err(argument("scene term range must be non-empty and positive"));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(argument("blur sigma range must be positive and ordered"));
        }
        Ok(())
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable blur with clamped borders.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * plane[i * w + clamp(j as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(t, g)| g * tmp[clamp(i as isize + t as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

fn abundance<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
    let smooth = blur(&noise, h, w, sigma);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    smooth.into_iter().map(|v| (v - lo) / span).collect()
}

/// Positive signature built from one or two Gaussian bumps over the band axis.
fn signature<R: Rng + ?Sized>(bands: usize, rng: &mut R) -> Vec<f64> {
    let c = bands as f64;
    let bumps = rng.random_range(1..=2);
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let center = rng.random_range(-0.2 * c..1.2 * c);
            let width = rng.random_range(0.2 * c..0.7 * c).max(0.5);
            let height = rng.random_range(0.3..1.0);
            (center, width, height)
        })
        .collect();
    let floor = rng.random_range(0.0..0.2);
    (0..bands)
        .map(|k| {
            floor
                + params
                    .iter()
                    .map(|(m, s, a)| a * (-(k as f64 - m).powi(2) / (2.0 * s * s)).exp())
                    .sum::<f64>()
        })
        .collect()
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<SpectralCube> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.bands);
    let plane = h * w;
    let mut data = vec![0.0; plane * c];
    let terms = rng.random_range(cfg.min_terms..=cfg.max_terms);
    for _ in 0..terms {
        let map = abundance(cfg, rng);
        let sig = signature(c, rng);
        for (k, s) in sig.iter().enumerate() {
            for (d, m) in data[k * plane..(k + 1) * plane].iter_mut().zip(&map) {
                *d += s * m;
            }
        }
    }
    normalize(&SpectralCube::new(h, w, c, data)?)
}

/// Scene `index` of the dataset seeded by `seed`; independent of the others.
pub fn scene(cfg: &SceneConfig, seed: u64, index: usize) -> Result<SpectralCube> {
    generate_scene(cfg, &mut seeds::rng(seed, &[0x5CE_E, index as u64]))
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SpectralCube>,
    pub validation: Vec<SpectralCube>,
}

/// Every tenth scene goes to validation, i.e. one held out per nine trained.
pub fn is_validation_index(index: usize) -> bool {
    index % 10 == 9
}

pub fn split(scenes: Vec<SpectralCube>) -> Dataset {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, s) in scenes.into_iter().enumerate() {
        if is_validation_index(i) {
            validation.push(s);
        } else {
            train.push(s);
        }
    }
    Dataset { train, validation }
}

pub fn generate(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Dataset> {
    let scenes = (0..count).map(|i| scene(cfg, seed, i)).collect::<Result<Vec<_>>>()?;
    Ok(split(scenes))
}
