//! Finite-difference checks of every hand-written backward pass.
//!
//! Elementwise ops (convolution, ReLU) are checked entry by entry with
//! central differences. Networks and the unrolled model are checked along a
//! random unit direction per parameter block, which exercises every weight
//! at the cost of two loss evaluations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cube::SpectralCube;
use crate::dataset::{scene, SceneConfig};
use crate::error::{argument, Result};
use crate::networks::{PriorNet, RepresentationConfig, DecoderNet, GradientNet};
use crate::seeds;
use crate::sensing::{CodedAperture, SensingOperator};
use crate::substrate::{conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvParams, Parameters, Tensor4};
use crate::training::{patch_gradients, TrainConfig};
use crate::unrolled::{ModelConfig, UnrolledModel};

pub const ELEMENT_STEP: f64 = 1e-5;
pub const ELEMENT_TOLERANCE: f64 = 1e-4;
pub const DIRECTION_STEP: f64 = 1e-6;
pub const DIRECTION_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Standard,
}

impl std::str::FromStr for Preset {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "standard" => Ok(Preset::Standard),
            other => Err(argument(format!("unknown gradcheck preset '{other}' (expected tiny or standard)"))),
        }
    }
}

struct Geometry {
    height: usize,
    width: usize,
    bands: usize,
    features: usize,
    stages: usize,
    hidden_layers: usize,
    width_ch: usize,
    instances: usize,
}

impl Preset {
    fn geometry(self) -> Geometry {
        match self {
            Preset::Tiny => Geometry {
                height: 6,
                width: 6,
                bands: 3,
                features: 2,
                stages: 2,
                hidden_layers: 2,
                width_ch: 4,
                instances: 3,
            },
            Preset::Standard => Geometry {
                height: 8,
                width: 7,
                bands: 4,
                features: 3,
                stages: 3,
                hidden_layers: 2,
                width_ch: 6,
                instances: 20,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checks: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

fn normal_vec<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn random_tensor<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
    Tensor4::from_raw(shape, normal_vec(shape.iter().product(), 1.0, rng))
}

/// Max absolute error between central differences of `loss` and `analytic`
/// over `count` randomly chosen entries of `values`.
fn element_check<R: Rng + ?Sized>(
    values: &[f64],
    analytic: &[f64],
    count: usize,
    rng: &mut R,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut work = values.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let i = rng.random_range(0..values.len());
        work[i] = values[i] + ELEMENT_STEP;
        let up = loss(&work);
        work[i] = values[i] - ELEMENT_STEP;
        let down = loss(&work);
        work[i] = values[i];
        let fd = (up - down) / (2.0 * ELEMENT_STEP);
        let e = (fd - analytic[i]).abs();
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    worst
}

fn relative(fd: f64, an: f64) -> f64 {
    let e = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Directional check per parameter block; returns the worst relative error.
/// A failing direction is retried with a ten times smaller step, since a
/// ReLU kink inside the stencil spoils the difference but not the gradient.
pub fn directional_check<P, R>(
    params: &P,
    grad: &P,
    rng: &mut R,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<(usize, f64)>
where
    P: Parameters + Clone,
    R: Rng + ?Sized,
{
    let base = params.flatten();
    let g = grad.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for (_, offset, len) in params.layout() {
        let mut dir = normal_vec(len, 1.0, rng);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        dir.iter_mut().for_each(|v| *v /= norm);
        let an: f64 = dir.iter().zip(&g[offset..offset + len]).map(|(d, g)| d * g).sum();
        let mut err = f64::INFINITY;
        for step in [DIRECTION_STEP, DIRECTION_STEP / 10.0] {
            let mut eval = |sign: f64| -> Result<f64> {
                let mut flat = base.clone();
                for (v, d) in flat[offset..offset + len].iter_mut().zip(&dir) {
                    *v += sign * step * d;
                }
                probe.assign_flat(&flat);
                loss(&probe)
            };
            let fd = (eval(1.0)? - eval(-1.0)?) / (2.0 * step);
            err = err.min(relative(fd, an));
            if err < DIRECTION_TOLERANCE {
                break;
            }
        }
        worst = worst.max(err);
        checks += 1;
    }
    Ok((checks, worst))
}

fn jitter<P: Parameters, R: Rng + ?Sized>(params: &mut P, scale: f64, rng: &mut R) {
    params.visit_mut("", &mut |_, _, v| {
        for x in v.iter_mut() {
            *x += scale * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    });
}

fn check_conv<R: Rng + ?Sized>(geo: &Geometry, rng: &mut R) -> Result<[CheckResult; 2]> {
    let (mut input_err, mut param_err): (f64, f64) = (0.0, 0.0);
    let per = 20;
    for _ in 0..geo.instances {
        let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let shape = [rng.random_range(1..=2), cin, geo.height, geo.width];
        let x = random_tensor(shape, rng);
        let mut params = ConvParams::he_normal(cout, cin, (3, 3), rng)?;
        params.bias = normal_vec(cout, 0.1, rng);
        let y = conv2d_forward(&x, &params)?;
        let w = random_tensor(y.shape(), rng);
        let (dx, dp) = conv2d_backward(&x, &params, &w)?;
        input_err = input_err.max(element_check(x.as_slice(), dx.as_slice(), per, rng, |v| {
            conv2d_forward(&Tensor4::from_raw(shape, v.to_vec()), &params).map(|o| o.dot(&w)).unwrap_or(f64::NAN)
        }));
        let flat = params.flatten();
        let mut probe = params.clone();
        param_err = param_err.max(element_check(&flat, &dp.flatten(), per, rng, |v| {
            probe.assign_flat(v);
            conv2d_forward(&x, &probe).map(|o| o.dot(&w)).unwrap_or(f64::NAN)
        }));
    }
    let n = geo.instances * per;
    Ok([
        CheckResult { name: "conv2d input".into(), checks: n, max_error: input_err, tolerance: ELEMENT_TOLERANCE },
        CheckResult { name: "conv2d params".into(), checks: n, max_error: param_err, tolerance: ELEMENT_TOLERANCE },
    ])
}

fn check_relu<R: Rng + ?Sized>(geo: &Geometry, rng: &mut R) -> Result<CheckResult> {
    let mut err: f64 = 0.0;
    let per = 20;
    for _ in 0..geo.instances {
        let shape = [1, 2, geo.height, geo.width];
        // Keep entries off the kink so the stencil never straddles zero.
        let x = Tensor4::from_raw(
            shape,
            normal_vec(shape.iter().product(), 1.0, rng)
                .into_iter()
                .map(|v| if v.abs() < 10.0 * ELEMENT_STEP { v + 1e-3 } else { v })
                .collect(),
        );
        let w = random_tensor(shape, rng);
        let dx = relu_backward(&x, &w)?;
        err = err.max(element_check(x.as_slice(), dx.as_slice(), per, rng, |v| {
            relu_forward(&Tensor4::from_raw(shape, v.to_vec())).dot(&w)
        }));
    }
    Ok(CheckResult { name: "relu".into(), checks: geo.instances * per, max_error: err, tolerance: ELEMENT_TOLERANCE })
}

fn check_networks<R: Rng + ?Sized>(geo: &Geometry, rng: &mut R) -> Result<Vec<CheckResult>> {
    let rep = RepresentationConfig {
        bands: geo.bands,
        features: geo.features,
        hidden_layers: geo.hidden_layers,
        width: geo.width_ch,
    };
    let mut out = Vec::new();
    let mut worst = [0.0f64; 3];
    let mut checks = [0usize; 3];
    for _ in 0..geo.instances {
        let decoder = DecoderNet::random(&rep, rng)?;
        let gradnet = GradientNet::random(&rep, rng)?;
        let mut prior = PriorNet::random(geo.bands, geo.width_ch, rng)?;
        jitter(&mut prior, 0.2, rng);
        let stacks = [
            (decoder.stack.clone(), geo.features),
            (gradnet.stack.clone(), geo.bands),
        ];
        for (slot, (stack, cin)) in stacks.into_iter().enumerate() {
            let x = random_tensor([1, cin, geo.height, geo.width], rng);
            let (y, tape) = stack.forward_recorded(x.clone())?;
            let w = random_tensor(y.shape(), rng);
            let mut grads = stack.zeros_like();
            stack.backward(&tape, w.clone(), &mut grads, false)?;
            let (n, e) = directional_check(&stack, &grads, rng, |p| Ok(p.forward(&x)?.dot(&w)))?;
            worst[slot] = worst[slot].max(e);
            checks[slot] += n;
        }
        let v = random_tensor([1, geo.bands, geo.height, geo.width], rng);
        let (y, tape) = prior.forward_recorded(v.clone())?;
        let w = random_tensor(y.shape(), rng);
        let mut grads = prior.zeros_like();
        let dv = prior.backward(&tape, w.clone(), &mut grads)?;
        let (n, e) = directional_check(&prior, &grads, rng, |p| Ok(p.forward(&v)?.dot(&w)))?;
        // The input gradient of H feeds every earlier stage; check it too.
        let mut dir = random_tensor(v.shape(), rng);
        let norm = dir.norm();
        dir.as_mut_slice().iter_mut().for_each(|d| *d /= norm);
        let an = dir.dot(&dv);
        let mut err = f64::INFINITY;
        for step in [DIRECTION_STEP, DIRECTION_STEP / 10.0] {
            let mut up = v.clone();
            up.axpy(step, &dir);
            let mut down = v.clone();
            down.axpy(-step, &dir);
            let fd = (prior.forward(&up)?.dot(&w) - prior.forward(&down)?.dot(&w)) / (2.0 * step);
            err = err.min(relative(fd, an));
        }
        worst[2] = worst[2].max(e).max(err);
        checks[2] += n + 1;
    }
    for (i, name) in ["decoder D", "gradient network G", "prior H"].iter().enumerate() {
        out.push(CheckResult { name: name.to_string(), checks: checks[i], max_error: worst[i], tolerance: DIRECTION_TOLERANCE });
    }
    Ok(out)
}

fn tiny_model<R: Rng + ?Sized>(geo: &Geometry, admmnet: bool, rng: &mut R) -> Result<UnrolledModel> {
    let config = ModelConfig {
        bands: geo.bands,
        features: if admmnet { geo.bands } else { geo.features },
        stages: geo.stages,
        hidden_layers: geo.hidden_layers,
        width: geo.width_ch,
        prior_width: geo.width_ch,
        admmnet,
        ..ModelConfig::default()
    };
    let mut model = UnrolledModel::new(config, rng.random())?;
    // Fresh priors have a zeroed last layer; move off that point so every
    // weight influences the output.
    jitter(&mut model, 0.05, rng);
    Ok(model)
}

fn check_model<R: Rng + ?Sized>(geo: &Geometry, admmnet: bool, rng: &mut R) -> Result<[CheckResult; 2]> {
    let (mut worst_out, mut worst_loss): (f64, f64) = (0.0, 0.0);
    let (mut n_out, mut n_loss) = (0, 0);
    let scene_cfg = SceneConfig::new(geo.height, geo.width, geo.bands);
    let train_cfg = TrainConfig { lambda_ae: 0.7, patch_size: geo.height, ..TrainConfig::desk() };
    for inst in 0..geo.instances {
        let model = tiny_model(geo, admmnet, rng)?;
        let x = scene(&scene_cfg, rng.random(), inst)?;
        let op = SensingOperator::new(
            CodedAperture::random_with(geo.height, geo.width, geo.bands, 0.5, rng)?,
            geo.height,
            geo.width,
            geo.bands,
        )?;
        let y = op.forward(&x)?;
        let w = SpectralCube::new(geo.height, geo.width, geo.bands, normal_vec(x.as_slice().len(), 1.0, rng))?;
        let rec = model.forward(std::slice::from_ref(&y), std::slice::from_ref(&op), true, false)?;
        let grads = model.gradients(&rec, &w)?;
        let proj = |m: &UnrolledModel| -> Result<f64> {
            let (xhat, _) = m.reconstruct(&y, &op, false)?;
            Ok(xhat.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum())
        };
        let (n, e) = directional_check(&model, &grads, rng, proj)?;
        worst_out = worst_out.max(e);
        n_out += n;

        let stream: u64 = rng.random();
        let (_, grads) = patch_gradients(&model, &x, &train_cfg, &mut seeds::rng(stream, &[]), 1.0)?;
        let loss = |m: &UnrolledModel| -> Result<f64> {
            Ok(patch_gradients(m, &x, &train_cfg, &mut seeds::rng(stream, &[]), 1.0)?.0.total)
        };
        let (n, e) = directional_check(&model, &grads, rng, loss)?;
        worst_loss = worst_loss.max(e);
        n_loss += n;
    }
    let tag = if admmnet { "ADMMnet" } else { "JR2net" };
    Ok([
        CheckResult { name: format!("{tag} output"), checks: n_out, max_error: worst_out, tolerance: DIRECTION_TOLERANCE },
        CheckResult { name: format!("{tag} training loss"), checks: n_loss, max_error: worst_loss, tolerance: DIRECTION_TOLERANCE },
    ])
}

/// Runs every check of `preset`, deterministic in `seed`.
pub fn run(preset: Preset, seed: u64) -> Result<GradcheckReport> {
    let geo = preset.geometry();
    let mut rng: ChaCha8Rng = seeds::rng(seed, &[0x6C]);
    let mut results = Vec::new();
    results.extend(check_conv(&geo, &mut rng)?);
    results.push(check_relu(&geo, &mut rng)?);
    results.extend(check_networks(&geo, &mut rng)?);
    results.extend(check_model(&geo, false, &mut rng)?);
    results.extend(check_model(&geo, true, &mut rng)?);
    Ok(GradcheckReport { results })
}
