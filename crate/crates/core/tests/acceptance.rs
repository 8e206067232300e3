//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::time::{Duration, Instant};

use jr2net::dataset::{generate, Dataset, SceneConfig};
use jr2net::gradcheck::{self, Preset};
use jr2net::metrics::evaluate;
use jr2net::oracles::{algorithm1_reference, build_dense, ista_solve};
use jr2net::substrate::Parameters;
use jr2net::training::{smoothed_loss, train, validate_at, validation_operator, TrainConfig, TrainOutcome};
use jr2net::{CodedAperture, Measurement, ModelConfig, SensingOperator, SpectralCube, UnrolledModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const ADJOINT_TOL: f64 = 1e-6;
const DENSE_TOL: f64 = 1e-12;
const GRADCHECK_TOL: f64 = 1e-3;
const TOY_MIN_PSNR: f64 = 25.0;
const LAMBDA_GAIN_DB: f64 = 0.3;
const STAGE_GAIN_DB: f64 = 0.5;
const REPRESENTATION_GAIN_DB: f64 = 0.3;
const ISTA_GAIN_DB: f64 = 1.0;
const INFERENCE_LIMIT: Duration = Duration::from_secs(30);

const TOY_SCENES: usize = 20;
const TOY_SIZE: usize = 64;
const TOY_BANDS: usize = 8;
const TOY_SEED: u64 = 2024;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        bands: TOY_BANDS,
        features: 4,
        stages: 5,
        hidden_layers: 1,
        width: 8,
        prior_width: 8,
        ..ModelConfig::default()
    }
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 2,
        patch_size: 16,
        patches_per_image: 2,
        learning_rate: 3e-3,
        validate_every: 20,
        seed: TOY_SEED,
        ..TrainConfig::desk()
    }
}

struct ToyRun {
    model: UnrolledModel,
    outcome: TrainOutcome,
    psnr: f64,
    elapsed: Duration,
}

fn toy_run(data: &Dataset, model_cfg: ModelConfig, train_cfg: &TrainConfig) -> ToyRun {
    let start = Instant::now();
    let mut model = UnrolledModel::new(model_cfg, TOY_SEED).expect("toy model config is valid");
    let outcome = train(&mut model, data, train_cfg).expect("toy training runs");
    let psnr = outcome.final_validation.map(|r| r.psnr).unwrap_or(f64::NAN);
    ToyRun { model, outcome, psnr, elapsed: start.elapsed() }
}

fn random_cube(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> SpectralCube {
    SpectralCube::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fractional_operator(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> SensingOperator {
    let rows = h + c - 1;
    let t = CodedAperture::new(rows, w, (0..rows * w).map(|_| rng.random::<f64>()).collect()).unwrap();
    SensingOperator::new(t, h, w, c).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn criterion_adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(1..32), rng.random_range(1..32), rng.random_range(1..16));
        let op = fractional_operator(h, w, c, &mut rng);
        let x = random_cube(h, w, c, &mut rng);
        let y = Measurement::new(h, w, (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fx = op.forward(&x).unwrap();
        let aty = op.adjoint(&y).unwrap();
        let lhs = dot(fx.as_slice(), y.as_slice());
        let rhs = dot(x.as_slice(), aty.as_slice());
        let scale = dot(fx.as_slice(), fx.as_slice()).sqrt() * dot(y.as_slice(), y.as_slice()).sqrt() + 1e-30;
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    outcome(worst < ADJOINT_TOL, format!("max relative gap {worst:.2e} over 100 instances (tol {ADJOINT_TOL:.0e})"))
}

fn criterion_dense() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let op = fractional_operator(4, 4, 3, &mut rng);
        let dense = build_dense(&op).unwrap();
        let x = random_cube(4, 4, 3, &mut rng);
        let y = Measurement::new(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pairs = [
            (op.forward(&x).unwrap().into_vec(), dense.apply(x.as_slice())),
            (op.adjoint(&y).unwrap().into_vec(), dense.apply_transpose(y.as_slice())),
        ];
        for (fast, slow) in pairs {
            let norm = dot(&slow, &slow).sqrt().max(1e-300);
            let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / norm;
            worst = worst.max(err);
        }
    }
    outcome(worst < DENSE_TOL, format!("max relative error {worst:.2e} on 50 instances of 4x4x3 (tol {DENSE_TOL:.0e})"))
}

fn criterion_gradcheck() -> Outcome {
    let report = gradcheck::run(Preset::Tiny, 3).expect("gradcheck runs");
    let worst = report.results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let passed = failed.is_empty() && worst < GRADCHECK_TOL;
    outcome(
        passed,
        format!("{} suites, worst error {worst:.2e} (tol {GRADCHECK_TOL:.0e}); failed: {failed:?}", report.results.len()),
    )
}

fn criterion_dual_implementation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for admmnet in [false, true] {
        for _ in 0..25 {
            let (h, w, c) = (rng.random_range(4..10), rng.random_range(4..10), rng.random_range(2..6));
            let cfg = ModelConfig {
                bands: c,
                features: if admmnet { c } else { 2 },
                stages: 3,
                hidden_layers: 2,
                width: 6,
                prior_width: 6,
                admmnet,
                ..ModelConfig::default()
            };
            let mut model = UnrolledModel::new(cfg, rng.random()).unwrap();
            model.visit_mut("", &mut |_, _, v| {
                for x in v.iter_mut() {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *x += 0.05 * n;
                }
            });
            let x = SpectralCube::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap();
            let op = SensingOperator::new(CodedAperture::random_with(h, w, c, 1.0 / 3.0, &mut rng).unwrap(), h, w, c).unwrap();
            let y = op.forward(&x).unwrap();
            let fast = model.reconstruct(&y, &op, false).unwrap().0;
            let slow = algorithm1_reference(&model, &y, &op).unwrap();
            if fast.as_slice() != slow.as_slice() {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 50 instances differ (both modes, bit-for-bit)"))
}

fn criterion_training(base: &ToyRun) -> Outcome {
    let smooth = smoothed_loss(&base.outcome.history, 20);
    let (first, last) = (smooth.first().copied().unwrap_or(f64::NAN), smooth.last().copied().unwrap_or(f64::NAN));
    let passed = last < first && base.psnr >= TOY_MIN_PSNR;
    outcome(
        passed,
        format!(
            "smoothed loss {first:.4} -> {last:.4}, validation PSNR {:.2} dB (min {TOY_MIN_PSNR}), {:.0} s",
            base.psnr,
            base.elapsed.as_secs_f64()
        ),
    )
}

fn trend(name: &str, better: &ToyRun, worse: &ToyRun, margin: f64) -> Outcome {
    let gain = better.psnr - worse.psnr;
    outcome(
        gain >= margin,
        format!(
            "{name}: {:.2} dB vs {:.2} dB, gain {gain:.2} dB (min {margin}), {:.0} s",
            better.psnr,
            worse.psnr,
            worse.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_noise(base: &ToyRun, data: &Dataset, cfg: &TrainConfig) -> Outcome {
    let reports: Vec<_> = [40.0, 30.0, 25.0]
        .iter()
        .map(|&snr| validate_at(&base.model, &data.validation, cfg, Some(snr)).unwrap())
        .collect();
    let psnr_ok = reports.windows(2).all(|w| w[1].psnr <= w[0].psnr);
    let sam_ok = reports.windows(2).all(|w| w[1].sam >= w[0].sam);
    let listing: Vec<String> = reports.iter().map(|r| format!("{:.2} dB / {:.4} rad", r.psnr, r.sam)).collect();
    outcome(psnr_ok && sam_ok, format!("PSNR / SAM at 40, 30, 25 dB SNR: {}", listing.join(", ")))
}

fn criterion_inference() -> Outcome {
    let (h, w, c) = (256, 256, 31);
    let cfg = ModelConfig { bands: c, features: 8, stages: 7, hidden_layers: 5, width: 16, prior_width: 16, ..ModelConfig::default() };
    let model = UnrolledModel::new(cfg, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = SpectralCube::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap();
    let op = SensingOperator::new(CodedAperture::random(h, w, c, 1.0 / 3.0, 10).unwrap(), h, w, c).unwrap();
    let y = op.forward(&x).unwrap();
    let start = Instant::now();
    let result = model.reconstruct(&y, &op, false);
    let elapsed = start.elapsed();
    let ok = result.map(|(xhat, _)| xhat.dims() == (h, w, c)).unwrap_or(false);
    outcome(
        ok && elapsed < INFERENCE_LIMIT,
        format!("256x256x31, K=7, F=8 in one pass: {:.2} s (limit {} s)", elapsed.as_secs_f64(), INFERENCE_LIMIT.as_secs()),
    )
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = SpectralCube::new(16, 16, 4, (0..1024).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap();
    let same = evaluate(&x, &x).unwrap();
    let shifted = SpectralCube::new(16, 16, 4, x.as_slice().iter().map(|v| v + 0.1).collect()).unwrap();
    let psnr20 = evaluate(&shifted, &x).unwrap().psnr;
    let passed = same.psnr == 100.0 && same.ssim == 1.0 && same.sam == 0.0 && (psnr20 - 20.0).abs() < 1e-9;
    outcome(
        passed,
        format!("identity: PSNR {} SSIM {} SAM {}; uniform 0.1 error: PSNR {psnr20:.12} dB", same.psnr, same.ssim, same.sam),
    )
}

/// Best mean PSNR of identity-basis ISTA over a small grid of weights, each
/// validation scene under the aperture used for the learned model.
fn ista_floor(data: &Dataset, cfg: &TrainConfig) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for tau in [1e-4, 1e-3, 1e-2] {
        let mut total = 0.0;
        for (v, x) in data.validation.iter().enumerate() {
            let (h, w, c) = x.dims();
            let op = validation_operator(cfg, v, h, w, c).unwrap();
            let y = op.forward(x).unwrap();
            let xhat = ista_solve(&y, &op, tau, 300).unwrap();
            total += evaluate(&xhat, x).unwrap().psnr;
        }
        best = best.max(total / data.validation.len() as f64);
    }
    best
}

fn criterion_classical(base: &ToyRun, data: &Dataset, cfg: &TrainConfig) -> Outcome {
    let start = Instant::now();
    let ista = ista_floor(data, cfg);
    let gain = base.psnr - ista;
    outcome(
        gain >= ISTA_GAIN_DB,
        format!(
            "JR2net {:.2} dB vs best ISTA {ista:.2} dB, gain {gain:.2} dB (min {ISTA_GAIN_DB}), ISTA {:.1} s",
            base.psnr,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn report(n: usize, name: &str, start: Instant, result: Outcome, failures: &mut usize) {
    let verdict = if result.passed { "PASS" } else { "FAIL" };
    if !result.passed {
        *failures += 1;
    }
    println!("criterion {n:>2} {verdict} {name}: {} [{:.1} s]", result.detail, start.elapsed().as_secs_f64());
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "adjoint identity", t, criterion_adjoint(), &mut failures);
    let t = Instant::now();
    report(2, "dense-oracle equivalence", t, criterion_dense(), &mut failures);
    let t = Instant::now();
    report(3, "gradient correctness", t, criterion_gradcheck(), &mut failures);
    let t = Instant::now();
    report(4, "dual-implementation equivalence", t, criterion_dual_implementation(), &mut failures);

    let data = generate(&SceneConfig::new(TOY_SIZE, TOY_SIZE, TOY_BANDS), TOY_SCENES, TOY_SEED).expect("toy scenes");
    let cfg = toy_train_config();
    let t = Instant::now();
    let base = toy_run(&data, toy_model_config(), &cfg);
    report(5, "training sanity", t, criterion_training(&base), &mut failures);

    let t = Instant::now();
    let no_ae = toy_run(&data, toy_model_config(), &TrainConfig { lambda_ae: 0.0, ..cfg.clone() });
    report(6, "autoencoder-loss trend", t, trend("lambda_ae 1 vs 0", &base, &no_ae, LAMBDA_GAIN_DB), &mut failures);

    let t = Instant::now();
    let one_stage = toy_run(&data, ModelConfig { stages: 1, ..toy_model_config() }, &cfg);
    report(7, "stage-count trend", t, trend("K=5 vs K=1", &base, &one_stage, STAGE_GAIN_DB), &mut failures);

    let t = Instant::now();
    let admm = toy_run(&data, ModelConfig { admmnet: true, features: TOY_BANDS, ..toy_model_config() }, &cfg);
    report(8, "representation-learning gain", t, trend("JR2net vs ADMMnet", &base, &admm, REPRESENTATION_GAIN_DB), &mut failures);

    let t = Instant::now();
    report(9, "noise robustness ordering", t, criterion_noise(&base, &data, &cfg), &mut failures);
    let t = Instant::now();
    report(10, "single-pass inference", t, criterion_inference(), &mut failures);
    let t = Instant::now();
    report(11, "metric unit identities", t, criterion_metrics(), &mut failures);
    let t = Instant::now();
    report(12, "classical floor", t, criterion_classical(&base, &data, &cfg), &mut failures);

    println!("acceptance: {} of 12 criteria passed", 12 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
