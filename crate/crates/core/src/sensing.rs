//! DD-CASSI sensing: coded apertures, the forward operator, its adjoint and
//! acquisition noise.
//!
//! The operator is never materialized. With 0-based indices a measurement is
//!
//! ```text
//! y(i, j) = sum_k T(i + C - 1 - k, j) * x(i, j, k)
//! ```
//!
//! and the aperture is stored pre-extended to `H + C - 1` rows so that every
//! band reads a valid row without clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cube::{Measurement, SpectralCube};
use crate::error::{argument, Error, Result};

/// Transmittance pattern on an `(H + C - 1) x W` grid, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedAperture {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CodedAperture {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(argument(format!("aperture dimensions must be positive, got {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(argument(format!(
                "aperture of {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("aperture transmittance {v} outside [0, 1]")));
        }
        Ok(Self { rows, cols, values })
    }

    /// Independent Bernoulli(`transmittance`) entries, deterministic in `seed`.
    pub fn random(height: usize, width: usize, bands: usize, transmittance: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(height, width, bands, transmittance, &mut rng)
    }

    pub fn random_with<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        bands: usize,
        transmittance: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(argument(format!(
                "aperture geometry must be positive, got H={height} W={width} C={bands}"
            )));
        }
        if !(transmittance > 0.0 && transmittance < 1.0) {
            return Err(argument(format!("transmittance {transmittance} must lie in (0, 1)")));
        }
        let rows = height + bands - 1;
        let values = (0..rows * width)
            .map(|_| if rng.random::<f64>() < transmittance { 1.0 } else { 0.0 })
            .collect();
        Ok(Self { rows, cols: width, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, j: usize) -> f64 {
        self.values[r * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn fill_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Apertures are stored as a one-band cube of `R x W`.
    pub fn to_cube(&self) -> SpectralCube {
        SpectralCube::from_raw(self.rows, self.cols, 1, self.values.clone())
    }

    pub fn from_cube(cube: &SpectralCube) -> Result<Self> {
        if cube.bands() != 1 {
            return Err(argument(format!("aperture file must have one band, found {}", cube.bands())));
        }
        Self::new(cube.height(), cube.width(), cube.as_slice().to_vec())
    }
}

/// Generates a Bernoulli coded aperture for an `H x W x C` geometry.
pub fn generate_aperture(height: usize, width: usize, bands: usize, transmittance: f64, seed: u64) -> Result<CodedAperture> {
    CodedAperture::random(height, width, bands, transmittance, seed)
}

/// The operator `Phi` bound to one aperture and one cube geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingOperator {
    aperture: CodedAperture,
    height: usize,
    width: usize,
    bands: usize,
}

impl SensingOperator {
    pub fn new(aperture: CodedAperture, height: usize, width: usize, bands: usize) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(argument("sensing geometry must be positive"));
        }
        if aperture.rows != height + bands - 1 || aperture.cols != width {
            return Err(argument(format!(
                "aperture is {}x{}, geometry H={height} W={width} C={bands} needs {}x{width}",
                aperture.rows,
                aperture.cols,
                height + bands - 1
            )));
        }
        Ok(Self { aperture, height, width, bands })
    }

    /// Infers `H = R - C + 1` from the aperture.
    pub fn for_bands(aperture: CodedAperture, bands: usize) -> Result<Self> {
        if bands == 0 || aperture.rows < bands {
            return Err(argument(format!("aperture with {} rows cannot serve {bands} bands", aperture.rows)));
        }
        let (h, w) = (aperture.rows - bands + 1, aperture.cols);
        Self::new(aperture, h, w, bands)
    }

    pub fn aperture(&self) -> &CodedAperture {
        &self.aperture
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub(crate) fn check_cube(&self, dims: (usize, usize, usize)) -> Result<()> {
        if dims != self.dims() {
            return Err(argument(format!(
                "cube is {}x{}x{}, operator expects {}x{}x{}",
                dims.0, dims.1, dims.2, self.height, self.width, self.bands
            )));
        }
        Ok(())
    }

    pub(crate) fn check_measurement(&self, y: &Measurement) -> Result<()> {
        if (y.height(), y.width()) != (self.height, self.width) {
            return Err(argument(format!(
                "measurement is {}x{}, operator expects {}x{}",
                y.height(),
                y.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    /// Aperture row window seen by band `k`: rows `C-1-k .. C-1-k+H`.
    #[inline]
    fn band_mask(&self, k: usize) -> &[f64] {
        let start = (self.bands - 1 - k) * self.width;
        &self.aperture.values[start..start + self.height * self.width]
    }

    /// `y = Phi x` on raw band-sequential buffers.
    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        let plane = self.height * self.width;
        debug_assert_eq!(x.len(), plane * self.bands);
        debug_assert_eq!(y.len(), plane);
        y.fill(0.0);
        for k in 0..self.bands {
            let mask = self.band_mask(k);
            let band = &x[k * plane..(k + 1) * plane];
            for ((out, &t), &v) in y.iter_mut().zip(mask).zip(band) {
                *out += t * v;
            }
        }
    }

    /// `x = Phi^T y` on raw buffers.
    pub fn adjoint_into(&self, y: &[f64], x: &mut [f64]) {
        let plane = self.height * self.width;
        debug_assert_eq!(y.len(), plane);
        debug_assert_eq!(x.len(), plane * self.bands);
        for k in 0..self.bands {
            let mask = self.band_mask(k);
            for ((out, &t), &v) in x[k * plane..(k + 1) * plane].iter_mut().zip(mask).zip(y) {
                *out = t * v;
            }
        }
    }

    /// `out = Phi^T Phi x`.
    pub fn gram_into(&self, x: &[f64], out: &mut [f64]) {
        let mut y = vec![0.0; self.height * self.width];
        self.forward_into(x, &mut y);
        self.adjoint_into(&y, out);
    }

    pub fn forward(&self, x: &SpectralCube) -> Result<Measurement> {
        self.check_cube(x.dims())?;
        let mut y = vec![0.0; self.height * self.width];
        self.forward_into(x.as_slice(), &mut y);
        Ok(Measurement::from_raw(self.height, self.width, y))
    }

    pub fn adjoint(&self, y: &Measurement) -> Result<SpectralCube> {
        self.check_measurement(y)?;
        let mut x = vec![0.0; self.height * self.width * self.bands];
        self.adjoint_into(y.as_slice(), &mut x);
        Ok(SpectralCube::from_raw(self.height, self.width, self.bands, x))
    }
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Noise standard deviation for a target SNR relative to the clean signal's rms.
pub fn noise_sigma(y: &Measurement, snr_db: f64) -> f64 {
    rms(y.as_slice()) / 10f64.powf(snr_db / 20.0)
}

/// Adds white Gaussian noise at `snr_db`. `f64::INFINITY` leaves `y` unchanged.
pub fn add_noise(y: &Measurement, snr_db: f64, seed: u64) -> Result<Measurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with(y, snr_db, &mut rng)
}

pub fn add_noise_with<R: Rng + ?Sized>(y: &Measurement, snr_db: f64, rng: &mut R) -> Result<Measurement> {
    if snr_db.is_nan() {
        return Err(argument("snr_db is NaN"));
    }
    if snr_db == f64::INFINITY {
        return Ok(y.clone());
    }
    if y.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("cannot set an SNR on a zero-energy measurement".into()));
    }
    let sigma = noise_sigma(y, snr_db);
    let normal = Normal::new(0.0, sigma).map_err(|e| argument(e.to_string()))?;
    let data = y.as_slice().iter().map(|&v| v + normal.sample(rng)).collect();
    Ok(Measurement::from_raw(y.height(), y.width(), data))
}

/// Empirical SNR in dB of `noisy` against `clean`.
pub fn empirical_snr_db(clean: &Measurement, noisy: &Measurement) -> f64 {
    let resid: Vec<f64> = clean.as_slice().iter().zip(noisy.as_slice()).map(|(a, b)| b - a).collect();
    20.0 * (rms(clean.as_slice()) / rms(&resid)).log10()
}
