//! End-to-end training: random patches, a fresh Bernoulli aperture per patch
//! and step, reconstruction MSE plus the autoencoder term
//! `||x - D(G(x))||^2`, and Adam over every parameter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::cube::SpectralCube;
use crate::dataset::Dataset;
use crate::error::{argument, Error, Result};
use crate::metrics::{self, QualityReport};
use crate::seeds;
use crate::sensing::{add_noise_with, CodedAperture, SensingOperator};
use crate::substrate::checkpoint::write_checkpoint;
use crate::substrate::{Adam, OptimizerConfig, Parameters, Tensor4};
use crate::unrolled::UnrolledModel;

const PATCH_STREAM: u64 = 0x9A7C;
const STEP_STREAM: u64 = 0x57E9;
const VALIDATION_STREAM: u64 = 0x7A11;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub transmittance: f64,
    pub learning_rate: f64,
    pub lambda_ae: f64,
    /// Measurement noise during training and validation; `None` is noiseless.
    pub noise_snr_db: Option<f64>,
    pub seed: u64,
    /// Run validation every this many epochs (and after the last one).
    pub validate_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Published full-scale protocol.
    pub fn full_scale() -> Self {
        Self {
            epochs: 3000,
            batch_size: 104,
            patch_size: 96,
            patches_per_image: 24,
            ..Self::desk()
        }
    }

    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            patch_size: 48,
            patches_per_image: 24,
            transmittance: 1.0 / 3.0,
            learning_rate: 1e-3,
            lambda_ae: 1.0,
            noise_snr_db: None,
            seed: 0,
            validate_every: 10,
            checkpoint_every: 25,
            checkpoint_dir: None,
        }
    }

    /// Collects every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.patch_size == 0 {
            out.push("patch_size must be >= 1".into());
        }
        if self.patches_per_image == 0 {
            out.push("patches_per_image must be >= 1".into());
        }
        if !(self.transmittance > 0.0 && self.transmittance < 1.0) {
            out.push(format!("transmittance {} must lie in (0, 1)", self.transmittance));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_ae >= 0.0 && self.lambda_ae.is_finite()) {
            out.push(format!("lambda_ae {} must be >= 0", self.lambda_ae));
        }
        if let Some(snr) = self.noise_snr_db {
            if snr.is_nan() {
                out.push("noise_snr_db is NaN".into());
            }
        }
        if self.validate_every == 0 {
            out.push("validate_every must be >= 1".into());
        }
        if self.checkpoint_every == 0 {
            out.push("checkpoint_every must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(argument(v.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub l_ae: f64,
}

/// One row of the loss history; `val_psnr` is NaN where validation did not run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossReport,
    pub val_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best_val_psnr: f64,
    pub final_validation: Option<QualityReport>,
}

/// `patches_per_image` uniform crops from every cube, shuffled; deterministic
/// in `(seed, epoch)`.
pub fn sample_patches(cubes: &[SpectralCube], cfg: &TrainConfig, seed: u64, epoch: usize) -> Result<Vec<SpectralCube>> {
    let p = cfg.patch_size;
    for (n, c) in cubes.iter().enumerate() {
        if c.height() < p || c.width() < p {
            return Err(argument(format!(
                "cube {n} is {}x{}, smaller than the {p}x{p} patch",
                c.height(),
                c.width()
            )));
        }
    }
    let mut rng = seeds::rng(seed, &[PATCH_STREAM, epoch as u64]);
    let mut out = Vec::with_capacity(cubes.len() * cfg.patches_per_image);
    for c in cubes {
        for _ in 0..cfg.patches_per_image {
            let top = rng.random_range(0..=c.height() - p);
            let left = rng.random_range(0..=c.width() - p);
            out.push(c.crop(top, left, p, p)?);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Loss and parameter gradients for one patch under one simulated acquisition.
pub fn patch_gradients<R: Rng + ?Sized>(
    model: &UnrolledModel,
    x: &SpectralCube,
    cfg: &TrainConfig,
    rng: &mut R,
    scale: f64,
) -> Result<(LossReport, UnrolledModel)> {
    let (h, w, c) = x.dims();
    let aperture = CodedAperture::random_with(h, w, c, cfg.transmittance, rng)?;
    let op = SensingOperator::new(aperture, h, w, c)?;
    let mut y = op.forward(x)?;
    if let Some(snr) = cfg.noise_snr_db {
        y = add_noise_with(&y, snr, rng)?;
    }
    let patch_loss = |pred: &[f64]| -> (f64, Vec<f64>) {
        let n = pred.len() as f64;
        let mut sq = 0.0;
        let grad = pred
            .iter()
            .zip(x.as_slice())
            .map(|(p, t)| {
                let d = p - t;
                sq += d * d;
                2.0 * d / n
            })
            .collect();
        (sq / n, grad)
    };

    let rec = model
        .forward(std::slice::from_ref(&y), std::slice::from_ref(&op), true, false)
        .map_err(|e| Error::Training(format!("forward pass failed: {e}")))?;
    let (mse, mut dx) = patch_loss(rec.xhat.as_slice());
    dx.iter_mut().for_each(|g| *g *= scale);
    let mut grads = model.zeros_like();
    model.backward(&rec, &SpectralCube::from_raw(h, w, c, dx), &mut grads)?;

    let mut l_ae = 0.0;
    if let Some(rep) = model.representation() {
        let (z, enc_tape) = rep.gradnet.stack.forward_recorded(Tensor4::from_raw([1, c, h, w], x.as_slice().to_vec()))?;
        let (recon, dec_tape) = rep.decoder.stack.forward_recorded(z)?;
        let (loss, mut g) = patch_loss(recon.as_slice());
        l_ae = loss;
        if cfg.lambda_ae > 0.0 {
            g.iter_mut().for_each(|v| *v *= scale * cfg.lambda_ae);
            let grad_rep = grads.representation_mut().expect("same mode as model");
            let dz = rep
                .decoder
                .stack
                .backward(&dec_tape, Tensor4::from_raw([1, c, h, w], g), &mut grad_rep.decoder.stack, true)?
                .expect("input gradient requested");
            rep.gradnet.stack.backward(&enc_tape, dz, &mut grad_rep.gradnet.stack, false)?;
        }
    }
    let report = LossReport { total: mse + cfg.lambda_ae * l_ae, mse, l_ae };
    if !report.total.is_finite() {
        let trace = model.reconstruct(&y, &op, true).ok().and_then(|(_, t)| t);
        let norms: Vec<String> = trace
            .map(|t| t.stages.iter().map(|s| format!("|grad|={:.3e} |D-h|={:.3e}", s.grad_norm, s.primal_residual)).collect())
            .unwrap_or_default();
        return Err(Error::Training(format!("non-finite loss {report:?}; stage norms: [{}]", norms.join(", "))));
    }
    Ok((report, grads))
}

fn batch_gradients(
    model: &UnrolledModel,
    batch: &[SpectralCube],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossReport, UnrolledModel)> {
    if batch.is_empty() {
        return Err(argument("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = seeds::rng(seed, &[i as u64]);
            patch_gradients(model, x, cfg, &mut rng, scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossReport::default();
    let mut grads = model.zeros_like();
    let mut acc = grads.flatten();
    for (report, g) in &parts {
        total.total += report.total * scale;
        total.mse += report.mse * scale;
        total.l_ae += report.l_ae * scale;
        for (a, v) in acc.iter_mut().zip(g.flatten()) {
            *a += v;
        }
    }
    grads.assign_flat(&acc);
    Ok((total, grads))
}

/// Batch loss under the apertures that [`training_step`] would draw for `seed`.
pub fn batch_loss(model: &UnrolledModel, batch: &[SpectralCube], cfg: &TrainConfig, seed: u64) -> Result<LossReport> {
    Ok(batch_gradients(model, batch, cfg, seed)?.0)
}

/// Forward + backward over the batch and one Adam step on all parameters.
pub fn training_step(
    model: &mut UnrolledModel,
    optimizer: &mut Adam,
    batch: &[SpectralCube],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossReport> {
    let (report, grads) = batch_gradients(model, batch, cfg, seed)?;
    optimizer.step(model, &grads)?;
    Ok(report)
}

/// The fixed operator used for validation cube `index`.
pub fn validation_operator(cfg: &TrainConfig, index: usize, height: usize, width: usize, bands: usize) -> Result<SensingOperator> {
    let mut rng = seeds::rng(cfg.seed, &[VALIDATION_STREAM, index as u64]);
    let aperture = CodedAperture::random_with(height, width, bands, cfg.transmittance, &mut rng)?;
    SensingOperator::new(aperture, height, width, bands)
}

/// Mean quality over the validation cubes, each with a fixed aperture.
pub fn validate(model: &UnrolledModel, cubes: &[SpectralCube], cfg: &TrainConfig) -> Result<QualityReport> {
    validate_at(model, cubes, cfg, cfg.noise_snr_db)
}

/// As [`validate`] with an explicit measurement SNR (`None` is noiseless).
pub fn validate_at(model: &UnrolledModel, cubes: &[SpectralCube], cfg: &TrainConfig, snr_db: Option<f64>) -> Result<QualityReport> {
    if cubes.is_empty() {
        return Err(argument("no validation cubes"));
    }
    let mut sum = QualityReport { psnr: 0.0, ssim: 0.0, sam: 0.0, psnr_band_mean: 0.0 };
    for (v, x) in cubes.iter().enumerate() {
        let (h, w, c) = x.dims();
        let op = validation_operator(cfg, v, h, w, c)?;
        let mut y = op.forward(x)?;
        if let Some(snr) = snr_db {
            y = add_noise_with(&y, snr, &mut seeds::rng(cfg.seed, &[VALIDATION_STREAM, v as u64, 1]))?;
        }
        let (xhat, _) = model.reconstruct(&y, &op, false)?;
        let r = metrics::evaluate(&xhat, x)?;
        sum.psnr += r.psnr;
        sum.ssim += r.ssim;
        sum.sam += r.sam;
        sum.psnr_band_mean += r.psnr_band_mean;
    }
    let n = cubes.len() as f64;
    Ok(QualityReport {
        psnr: sum.psnr / n,
        ssim: sum.ssim / n,
        sam: sum.sam / n,
        psnr_band_mean: sum.psnr_band_mean / n,
    })
}

pub fn train(model: &mut UnrolledModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, dataset, cfg, 0)
}

/// Runs epochs `start_epoch..cfg.epochs` with a fresh optimizer. Every epoch's
/// patches and apertures depend only on `(cfg.seed, epoch, step)`, so resuming
/// from a checkpoint replays the same data.
pub fn train_from(model: &mut UnrolledModel, dataset: &Dataset, cfg: &TrainConfig, start_epoch: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(argument("training set is empty"));
    }
    let mut optimizer = Adam::new(OptimizerConfig::with_learning_rate(cfg.learning_rate))?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut final_validation = None;
    for epoch in start_epoch..cfg.epochs {
        let patches = sample_patches(&dataset.train, cfg, cfg.seed, epoch)?;
        for (step, batch) in patches.chunks(cfg.batch_size).enumerate() {
            let seed = seeds::derive(cfg.seed, &[STEP_STREAM, epoch as u64, step as u64]);
            let loss = training_step(model, &mut optimizer, batch, cfg, seed)?;
            history.push(HistoryRow { epoch, step, loss, val_psnr: f64::NAN });
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        if !dataset.validation.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || last_epoch) {
            let report = validate(model, &dataset.validation, cfg)?;
            if let Some(row) = history.last_mut() {
                row.val_psnr = report.psnr;
            }
            log::info!("epoch {epoch}: val psnr {:.2} dB ssim {:.4} sam {:.4}", report.psnr, report.ssim, report.sam);
            if report.psnr > best {
                best = report.psnr;
                if let Some(dir) = &cfg.checkpoint_dir {
                    write_checkpoint(model, dir.join("best.jr2w"))?;
                }
            }
            final_validation = Some(report);
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 || last_epoch {
                write_checkpoint(model, dir.join(format!("epoch_{:05}.jr2w", epoch + 1)))?;
                write_checkpoint(model, dir.join("last.jr2w"))?;
            }
        }
    }
    Ok(TrainOutcome { history, best_val_psnr: best, final_validation })
}

/// Moving average of the total loss with the given window.
pub fn smoothed_loss(history: &[HistoryRow], window: usize) -> Vec<f64> {
    let totals: Vec<f64> = history.iter().map(|r| r.loss.total).collect();
    if window == 0 || totals.len() < window {
        return Vec::new();
    }
    totals.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

pub fn write_history_csv(history: &[HistoryRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,step,total,mse,l_ae,val_psnr")?;
    for r in history {
        let val = if r.val_psnr.is_nan() { String::new() } else { format!("{:.6}", r.val_psnr) };
        writeln!(f, "{},{},{:.9e},{:.9e},{:.9e},{}", r.epoch, r.step, r.loss.total, r.loss.mse, r.loss.l_ae, val)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SceneConfig};
    use crate::unrolled::ModelConfig;

    fn small_model(admmnet: bool) -> UnrolledModel {
        UnrolledModel::new(
            ModelConfig {
                bands: 4,
                features: if admmnet { 4 } else { 2 },
                stages: 2,
                hidden_layers: 2,
                width: 4,
                prior_width: 4,
                admmnet,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 3, patch_size: 8, patches_per_image: 2, validate_every: 1, ..TrainConfig::desk() }
    }

    #[test]
    fn exact_patch_size_gives_identical_crops() {
        let d = generate(&SceneConfig::new(8, 8, 4), 1, 1).unwrap();
        let patches = sample_patches(&d.train, &small_cfg(), 4, 0).unwrap();
        assert_eq!(patches.len(), 2);
        assert!(patches.iter().all(|p| p == &d.train[0]));
    }

    #[test]
    fn patch_counts_and_undersized_cubes() {
        let d = generate(&SceneConfig::new(12, 10, 4), 2, 1).unwrap();
        let cfg = TrainConfig { patches_per_image: 24, ..small_cfg() };
        assert_eq!(sample_patches(&d.train, &cfg, 0, 0).unwrap().len(), 48);
        let cfg = TrainConfig { patch_size: 11, ..cfg };
        let err = sample_patches(&d.train, &cfg, 0, 0).unwrap_err().to_string();
        assert!(err.contains("cube 0"), "{err}");
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let d = generate(&SceneConfig::new(8, 8, 4), 3, 2).unwrap();
        let model = small_model(false);
        for lambda in [0.0, 0.5, 1.0] {
            let cfg = TrainConfig { lambda_ae: lambda, ..small_cfg() };
            let r = batch_loss(&model, &d.train, &cfg, 9).unwrap();
            assert!((r.total - (r.mse + lambda * r.l_ae)).abs() <= 1e-6 * r.total.abs());
            if lambda == 0.0 {
                assert_eq!(r.total, r.mse);
            }
        }
    }

    #[test]
    fn epochs_zero_leaves_model_untouched() {
        let d = generate(&SceneConfig::new(8, 8, 4), 2, 2).unwrap();
        let mut model = small_model(false);
        let before = model.clone();
        let out = train(&mut model, &d, &TrainConfig { epochs: 0, ..small_cfg() }).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn validation_collects_every_violation() {
        let cfg = TrainConfig { batch_size: 0, transmittance: 1.5, lambda_ae: -1.0, ..small_cfg() };
        assert_eq!(cfg.violations().len(), 3);
    }

    #[test]
    fn admmnet_has_no_autoencoder_term() {
        let d = generate(&SceneConfig::new(8, 8, 4), 2, 2).unwrap();
        let r = batch_loss(&small_model(true), &d.train, &small_cfg(), 1).unwrap();
        assert_eq!(r.l_ae, 0.0);
    }
}
