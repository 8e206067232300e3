//! PSNR, SSIM and SAM for spectral cubes with a unit dynamic range.

use crate::cube::SpectralCube;
use crate::error::{argument, Error, Result};

/// Reported when the two cubes are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Pixels whose spectral vector norm falls below this are skipped by SAM.
pub const SAM_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    /// PSNR computed per band and averaged, for comparison with per-band reporting.
    pub psnr_band_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(argument(format!("SSIM window {} must be odd", self.window)));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(argument("SSIM sigma, K1, K2 and L must be positive"));
        }
        Ok(())
    }

    /// Normalized 1D Gaussian taps; the 2D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|n| {
                let d = n as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn same_dims(x: &SpectralCube, reference: &SpectralCube) -> Result<()> {
    if x.dims() != reference.dims() {
        return Err(argument(format!("cube dims {:?} differ from reference {:?}", x.dims(), reference.dims())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(1 / MSE)` over the whole cube, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &SpectralCube, reference: &SpectralCube) -> Result<f64> {
    same_dims(x, reference)?;
    Ok(psnr_from_mse(mse(x.as_slice(), reference.as_slice())))
}

/// Mean of per-band PSNRs.
pub fn psnr_band_mean(x: &SpectralCube, reference: &SpectralCube) -> Result<f64> {
    same_dims(x, reference)?;
    let c = x.bands();
    Ok((0..c).map(|k| psnr_from_mse(mse(x.band(k), reference.band(k)))).sum::<f64>() / c as f64)
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, &g)| g * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean over bands of the mean local SSIM map.
pub fn ssim(x: &SpectralCube, reference: &SpectralCube, cfg: &SsimConfig) -> Result<f64> {
    same_dims(x, reference)?;
    cfg.validate()?;
    let (h, w, c) = x.dims();
    if h < cfg.window || w < cfg.window {
        return Err(argument(format!("SSIM needs at least {0}x{0} pixels, got {h}x{w}", cfg.window)));
    }
    let taps = cfg.taps();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for k in 0..c {
        let (a, b) = (x.band(k), reference.band(k));
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
        let mu_a = filter_valid(a, h, w, &taps);
        let mu_b = filter_valid(b, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        let mut band_sum = 0.0;
        for p in 0..mu_a.len() {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let var_a = e_aa[p] - ma * ma;
            let var_b = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            band_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += band_sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Angle between two vectors via the half-angle form, which is exact for
/// identical inputs and well conditioned near 0 and pi.
fn spectral_angle(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Mean per-pixel spectral angle in radians; near-zero spectra are skipped.
pub fn sam(x: &SpectralCube, reference: &SpectralCube) -> Result<f64> {
    same_dims(x, reference)?;
    let (h, w, c) = x.dims();
    let mut a = vec![0.0; c];
    let mut b = vec![0.0; c];
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                a[k] = x.get(i, j, k);
                b[k] = reference.get(i, j, k);
            }
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < SAM_NORM_FLOOR || nb < SAM_NORM_FLOOR {
                continue;
            }
            total += spectral_angle(&a, &b, na, nb);
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Degenerate("every pixel has a zero spectrum".into()));
    }
    Ok(total / counted as f64)
}

/// PSNR, SSIM (default window) and SAM in one report. SSIM is NaN for cubes
/// smaller than the SSIM window.
pub fn evaluate(x: &SpectralCube, reference: &SpectralCube) -> Result<QualityReport> {
    let cfg = SsimConfig::default();
    let ssim = if x.height() >= cfg.window && x.width() >= cfg.window {
        ssim(x, reference, &cfg)?
    } else {
        f64::NAN
    };
    Ok(QualityReport {
        psnr: psnr(x, reference)?,
        ssim,
        sam: sam(x, reference)?,
        psnr_band_mean: psnr_band_mean(x, reference)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralCube::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn identity_hits_the_caps() {
        let x = random_cube(16, 14, 3, 1);
        let r = evaluate(&x, &x).unwrap();
        assert_eq!(r.psnr, 100.0);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.sam, 0.0);
    }

    #[test]
    fn uniform_error_psnr_is_closed_form() {
        let x = SpectralCube::from_fn(4, 4, 2, |_, _, _| 0.5).unwrap();
        let y = SpectralCube::from_fn(4, 4, 2, |_, _, _| 0.5 + 0.1).unwrap();
        let p = psnr(&y, &x).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "{p}");
    }

    #[test]
    fn psnr_matches_one_line_reference() {
        let (x, y) = (random_cube(5, 6, 4, 2), random_cube(5, 6, 4, 3));
        let mse = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 120.0;
        assert!((psnr(&x, &y).unwrap() - (-10.0 * mse.log10())).abs() < 1e-9);
    }

    #[test]
    fn sam_matches_arccos_loop() {
        let (x, y) = (random_cube(5, 6, 4, 4), random_cube(5, 6, 4, 5));
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..6 {
                let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    dot += x.get(i, j, k) * y.get(i, j, k);
                    nx += x.get(i, j, k).powi(2);
                    ny += y.get(i, j, k).powi(2);
                }
                total += (dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0).acos();
            }
        }
        assert!((sam(&x, &y).unwrap() - total / 30.0).abs() < 1e-9);
    }

    #[test]
    fn sam_special_cases() {
        let x = random_cube(3, 3, 5, 6);
        let scaled = SpectralCube::from_fn(3, 3, 5, |i, j, k| 3.5 * x.get(i, j, k)).unwrap();
        assert!(sam(&scaled, &x).unwrap() < 1e-7);
        let a = SpectralCube::from_fn(2, 2, 2, |_, _, k| if k == 0 { 1.0 } else { 0.0 }).unwrap();
        let b = SpectralCube::from_fn(2, 2, 2, |_, _, k| if k == 1 { 2.0 } else { 0.0 }).unwrap();
        assert!((sam(&a, &b).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let z = SpectralCube::zeros(2, 2, 2);
        assert!(matches!(sam(&z, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ssim_drops_under_strong_noise_and_is_symmetric() {
        let flat = SpectralCube::from_fn(24, 24, 2, |_, _, _| 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noisy = SpectralCube::from_fn(24, 24, 2, |_, _, _| 0.5 + rng.random_range(-0.5..0.5)).unwrap();
        let cfg = SsimConfig::default();
        let s = ssim(&noisy, &flat, &cfg).unwrap();
        assert!(s < 0.5, "{s}");
        assert_eq!(s, ssim(&flat, &noisy, &cfg).unwrap());
        assert!(ssim(&SpectralCube::zeros(10, 20, 1), &SpectralCube::zeros(10, 20, 1), &cfg).is_err());
    }

    #[test]
    fn window_is_normalized() {
        let taps = SsimConfig::default().taps();
        let total: f64 = taps.iter().flat_map(|a| taps.iter().map(move |b| a * b)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dims_mismatch_is_rejected() {
        let (x, y) = (SpectralCube::zeros(2, 2, 2), SpectralCube::zeros(2, 2, 3));
        assert!(psnr(&x, &y).is_err());
        assert!(sam(&x, &y).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let x = random_cube(12, 12, 3, 9);
        let mut last = f64::INFINITY;
        for sigma in [0.001, 0.01, 0.05, 0.1, 0.3] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let noisy = SpectralCube::from_fn(12, 12, 3, |i, j, k| x.get(i, j, k) + sigma * (rng.random::<f64>() - 0.5)).unwrap();
            let p = psnr(&noisy, &x).unwrap();
            assert!(p < last);
            last = p;
        }
    }
}
