//! K-stage unrolled ADMM reconstruction with a learned representation.
//!
//! Every stage performs, with `A = Phi^T Phi` and `b = Phi^T y`:
//!
//! ```text
//! grad   = G(A D(alpha) - b) + rho * G(D(alpha) - h + u)
//! alpha' = alpha - mu * grad
//! h'     = H_k(D(alpha') + u)
//! u'     = u + D(alpha') - h'
//! ```
//!
//! starting from `alpha = G(b)`, `h = D(alpha)`, `u = 0`, and the output is
//! `D(alpha)` after the last stage. `D` and `G` are shared by all stages;
//! `mu`, `rho` and `H` are per stage. In ADMMnet mode `D` and `G` are identity
//! maps and `alpha` lives in image space.
//!
//! The reverse pass is written out by hand against this fixed graph.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cube::{LatentCube, Measurement, SpectralCube};
use crate::error::{argument, Error, Result};
use crate::networks::{ConvStack, DecoderNet, GradientNet, PriorNet, RepresentationConfig, StackTape};
use crate::sensing::SensingOperator;
use crate::substrate::checkpoint::ParamBlock;
use crate::substrate::conv::ConvParams;
use crate::substrate::{join, Parameters, Tensor4};

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus range is positive");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub features: usize,
    pub stages: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub prior_width: usize,
    pub admmnet: bool,
    pub mu_init: f64,
    pub rho_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 31,
            features: 8,
            stages: 7,
            hidden_layers: 5,
            width: 48,
            prior_width: 16,
            admmnet: false,
            mu_init: 0.01,
            rho_init: 0.1,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults for an 8-band problem.
    pub fn desk(bands: usize) -> Self {
        Self { bands, features: 4, stages: 5, width: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.bands == 0 {
            problems.push("bands must be >= 1".to_string());
        }
        if self.stages == 0 {
            problems.push("stages must be >= 1".to_string());
        }
        if self.prior_width == 0 {
            problems.push("prior_width must be >= 1".to_string());
        }
        if self.admmnet {
            if self.features != self.bands {
                problems.push(format!(
                    "ADMMnet mode needs features == bands, got F={} C={}",
                    self.features, self.bands
                ));
            }
        } else if self.features == 0 || self.hidden_layers == 0 || self.width == 0 {
            problems.push("features, hidden_layers and width must be >= 1".to_string());
        }
        if !(self.mu_init > 0.0 && self.rho_init > 0.0) {
            problems.push("mu_init and rho_init must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(argument(problems.join("; ")))
        }
    }

    fn representation(&self) -> RepresentationConfig {
        RepresentationConfig {
            bands: self.bands,
            features: self.features,
            hidden_layers: self.hidden_layers,
            width: self.width,
        }
    }
}

/// Shared decoder and gradient network.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation {
    pub decoder: DecoderNet,
    pub gradnet: GradientNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub mu_raw: f64,
    pub rho_raw: f64,
    pub prior: PriorNet,
}

impl StageParams {
    pub fn mu(&self) -> f64 {
        softplus(self.mu_raw)
    }

    pub fn rho(&self) -> f64 {
        softplus(self.rho_raw)
    }
}

/// One stage of a traced reconstruction.
#[derive(Clone, Debug)]
pub struct StageSnapshot {
    /// `D(alpha)` after this stage's update.
    pub reconstruction: SpectralCube,
    pub alpha: LatentCube,
    pub h: SpectralCube,
    pub u: SpectralCube,
    pub grad_norm: f64,
    pub primal_residual: f64,
}

#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stages: Vec<StageSnapshot>,
}

impl StageTrace {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

struct StageRecord {
    fidelity: Vec<Option<StackTape>>,
    penalty: Option<StackTape>,
    g2: Tensor4,
    grad: Tensor4,
    decoder: Option<StackTape>,
    prior: StackTape,
}

/// Activations retained by a recorded forward pass.
pub struct ForwardTape {
    ops: Vec<SensingOperator>,
    init_encoder: Option<StackTape>,
    init_decoder: Option<StackTape>,
    stages: Vec<StageRecord>,
}

/// Output of [`UnrolledModel::forward`].
pub struct Reconstruction {
    pub xhat: SpectralCube,
    pub trace: Option<StageTrace>,
    tape: Option<ForwardTape>,
}

impl Reconstruction {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnrolledModel {
    config: ModelConfig,
    representation: Option<Representation>,
    stages: Vec<StageParams>,
}

fn elementwise(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor4::from_raw(a.shape(), a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect())
}

fn ensure_finite(t: &Tensor4, stage: usize, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage, detail: format!("{what} became non-finite") })
    }
}

impl UnrolledModel {
    /// Fresh model: He-initialized `D`, `G`, prior branches whose last conv is
    /// zero, and softplus-parameterized `mu`, `rho` at their initial values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let representation = if config.admmnet {
            None
        } else {
            let rep = config.representation();
            let decoder = DecoderNet::random(&rep, &mut rng)?;
            let gradnet = GradientNet::random(&rep, &mut rng)?;
            Some(Representation { decoder, gradnet })
        };
        let stages = (0..config.stages)
            .map(|_| {
                Ok(StageParams {
                    mu_raw: inverse_softplus(config.mu_init),
                    rho_raw: inverse_softplus(config.rho_init),
                    prior: PriorNet::random(config.bands, config.prior_width, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, representation, stages })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn admmnet_mode(&self) -> bool {
        self.representation.is_none()
    }

    pub fn representation(&self) -> Option<&Representation> {
        self.representation.as_ref()
    }

    pub fn representation_mut(&mut self) -> Option<&mut Representation> {
        self.representation.as_mut()
    }

    pub fn stages(&self) -> &[StageParams] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [StageParams] {
        &mut self.stages
    }

    pub fn bands(&self) -> usize {
        self.config.bands
    }

    pub fn features(&self) -> usize {
        self.config.features
    }

    /// Same structure with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.set_zero();
        z
    }

    /// `D(alpha)` on a `1 x F x H x W` tensor (identity in ADMMnet mode).
    pub fn decode_tensor(&self, alpha: &Tensor4) -> Result<Tensor4> {
        match &self.representation {
            Some(r) => r.decoder.stack.forward(alpha),
            None => Ok(alpha.clone()),
        }
    }

    /// `G(r)` on a `1 x C x H x W` tensor (identity in ADMMnet mode).
    pub fn encode_tensor(&self, r: &Tensor4) -> Result<Tensor4> {
        match &self.representation {
            Some(rep) => rep.gradnet.stack.forward(r),
            None => Ok(r.clone()),
        }
    }

    fn decode_rec(&self, alpha: Tensor4, record: bool) -> Result<(Tensor4, Option<StackTape>)> {
        match (&self.representation, record) {
            (Some(r), true) => r.decoder.stack.forward_recorded(alpha).map(|(o, t)| (o, Some(t))),
            (Some(r), false) => Ok((r.decoder.stack.forward(&alpha)?, None)),
            (None, _) => Ok((alpha, None)),
        }
    }

    fn encode_rec(&self, r: Tensor4, record: bool) -> Result<(Tensor4, Option<StackTape>)> {
        match (&self.representation, record) {
            (Some(rep), true) => rep.gradnet.stack.forward_recorded(r).map(|(o, t)| (o, Some(t))),
            (Some(rep), false) => Ok((rep.gradnet.stack.forward(&r)?, None)),
            (None, _) => Ok((r, None)),
        }
    }

    fn decode_back(&self, tape: &Option<StackTape>, up: Tensor4, grads: &mut UnrolledModel) -> Result<Tensor4> {
        match (&self.representation, tape) {
            (Some(r), Some(t)) => {
                let g = &mut grads.representation.as_mut().expect("gradient buffer matches model").decoder.stack;
                Ok(r.decoder.stack.backward(t, up, g, true)?.expect("input gradient requested"))
            }
            (None, _) => Ok(up),
            (Some(_), None) => Err(Error::Usage("decoder activations were not retained".into())),
        }
    }

    fn encode_back(
        &self,
        tape: &Option<StackTape>,
        up: Tensor4,
        grads: &mut UnrolledModel,
        want_input: bool,
    ) -> Result<Option<Tensor4>> {
        match (&self.representation, tape) {
            (Some(r), Some(t)) => {
                let g = &mut grads.representation.as_mut().expect("gradient buffer matches model").gradnet.stack;
                r.gradnet.stack.backward(t, up, g, want_input)
            }
            (None, _) => Ok(want_input.then_some(up)),
            (Some(_), None) => Err(Error::Usage("gradient-network activations were not retained".into())),
        }
    }

    fn check_inputs(&self, ys: &[Measurement], ops: &[SensingOperator]) -> Result<(usize, usize)> {
        if ys.is_empty() || ys.len() != ops.len() {
            return Err(argument(format!(
                "need matching non-empty measurement and operator lists, got {} and {}",
                ys.len(),
                ops.len()
            )));
        }
        let dims = ops[0].dims();
        if dims.2 != self.config.bands {
            return Err(argument(format!(
                "operator has {} bands, model expects {}",
                dims.2, self.config.bands
            )));
        }
        for (y, op) in ys.iter().zip(ops) {
            if op.dims() != dims {
                return Err(argument("snapshot operators must share one geometry"));
            }
            op.check_measurement(y)?;
        }
        Ok((dims.0, dims.1))
    }

    /// Algorithm-level forward pass. `record` keeps activations for
    /// [`UnrolledModel::backward`]; `trace` collects per-stage states.
    pub fn forward(&self, ys: &[Measurement], ops: &[SensingOperator], record: bool, trace: bool) -> Result<Reconstruction> {
        let (height, width) = self.check_inputs(ys, ops)?;
        let bands = self.config.bands;
        let shape = [1, bands, height, width];
        let n = bands * height * width;
        let snapshots = ops.len();

        let backprojections: Vec<Tensor4> = ys
            .iter()
            .zip(ops)
            .map(|(y, op)| {
                let mut b = vec![0.0; n];
                op.adjoint_into(y.as_slice(), &mut b);
                Tensor4::from_raw(shape, b)
            })
            .collect();
        let init = if snapshots == 1 {
            backprojections[0].clone()
        } else {
            let mut acc = backprojections[0].clone();
            for b in &backprojections[1..] {
                acc.add_assign(b);
            }
            let s = snapshots as f64;
            Tensor4::from_raw(shape, acc.as_slice().iter().map(|v| v / s).collect())
        };

        let (mut alpha, init_encoder) = self.encode_rec(init, record)?;
        ensure_finite(&alpha, 0, "initial alpha")?;
        let (mut d, init_decoder) = self.decode_rec(alpha.clone(), record)?;
        let mut h = d.clone();
        let mut u = Tensor4::zeros(shape);
        let mut records = Vec::with_capacity(if record { self.stages.len() } else { 0 });
        let mut snaps = Vec::new();

        for (k, stage) in self.stages.iter().enumerate() {
            let (mu, rho) = (stage.mu(), stage.rho());

            let mut fidelity = Vec::with_capacity(snapshots);
            let mut g1: Option<Tensor4> = None;
            for (op, b) in ops.iter().zip(&backprojections) {
                let mut gram = vec![0.0; n];
                op.gram_into(d.as_slice(), &mut gram);
                let r = elementwise(&Tensor4::from_raw(shape, gram), b, |a, b| a - b);
                let (g, tape) = self.encode_rec(r, record)?;
                fidelity.push(tape);
                match &mut g1 {
                    None => g1 = Some(g),
                    Some(acc) => acc.add_assign(&g),
                }
            }
            let g1 = g1.expect("at least one snapshot");

            let p = Tensor4::from_raw(
                shape,
                d.as_slice().iter().zip(h.as_slice()).zip(u.as_slice()).map(|((&d, &h), &u)| d - h + u).collect(),
            );
            let (g2, penalty) = self.encode_rec(p, record)?;
            let grad = elementwise(&g1, &g2, |a, b| a + rho * b);
            let next_alpha = elementwise(&alpha, &grad, |a, g| a - mu * g);
            ensure_finite(&next_alpha, k, "alpha")?;

            let (next_d, decoder_tape) = self.decode_rec(next_alpha.clone(), record)?;
            let q = elementwise(&next_d, &u, |d, u| d + u);
            let (next_h, prior_tape) = if record {
                let (o, t) = stage.prior.forward_recorded(q)?;
                (o, Some(t))
            } else {
                (stage.prior.forward(&q)?, None)
            };
            let next_u = Tensor4::from_raw(
                shape,
                u.as_slice().iter().zip(next_d.as_slice()).zip(next_h.as_slice()).map(|((&u, &d), &h)| u + d - h).collect(),
            );
            ensure_finite(&next_d, k, "D(alpha)")?;
            ensure_finite(&next_h, k, "h")?;
            ensure_finite(&next_u, k, "u")?;

            if trace {
                let primal = elementwise(&next_d, &next_h, |a, b| a - b).norm();
                snaps.push(StageSnapshot {
                    reconstruction: SpectralCube::from_raw(height, width, bands, next_d.as_slice().to_vec()),
                    alpha: LatentCube::from_raw(height, width, next_alpha.channels(), next_alpha.as_slice().to_vec()),
                    h: SpectralCube::from_raw(height, width, bands, next_h.as_slice().to_vec()),
                    u: SpectralCube::from_raw(height, width, bands, next_u.as_slice().to_vec()),
                    grad_norm: grad.norm(),
                    primal_residual: primal,
                });
            }
            if record {
                records.push(StageRecord {
                    fidelity,
                    penalty,
                    g2,
                    grad,
                    decoder: decoder_tape,
                    prior: prior_tape.expect("recorded"),
                });
            }
            alpha = next_alpha;
            d = next_d;
            h = next_h;
            u = next_u;
        }

        let tape = record.then(|| ForwardTape {
            ops: ops.to_vec(),
            init_encoder,
            init_decoder,
            stages: records,
        });
        Ok(Reconstruction {
            xhat: SpectralCube::from_raw(height, width, bands, d.into_vec()),
            trace: trace.then_some(StageTrace { stages: snaps }),
            tape,
        })
    }

    /// Single-snapshot reconstruction, optionally with the per-stage trace.
    pub fn reconstruct(
        &self,
        y: &Measurement,
        op: &SensingOperator,
        trace: bool,
    ) -> Result<(SpectralCube, Option<StageTrace>)> {
        let rec = self.forward(std::slice::from_ref(y), std::slice::from_ref(op), false, trace)?;
        Ok((rec.xhat, rec.trace))
    }

    /// Multi-snapshot reconstruction: fidelity terms are summed over snapshots
    /// and the initialization uses the mean back-projection.
    pub fn reconstruct_multi(&self, ys: &[Measurement], ops: &[SensingOperator]) -> Result<SpectralCube> {
        Ok(self.forward(ys, ops, false, false)?.xhat)
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d xhat`.
    pub fn backward(&self, rec: &Reconstruction, xhat_grad: &SpectralCube, grads: &mut UnrolledModel) -> Result<()> {
        let tape = rec
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage("backward needs a forward pass run with record = true".into()))?;
        if tape.stages.len() != self.stages.len() || grads.stages.len() != self.stages.len() {
            return Err(Error::Usage("tape or gradient buffer does not belong to this model".into()));
        }
        if xhat_grad.dims() != rec.xhat.dims() {
            return Err(argument("loss gradient shape differs from the reconstruction"));
        }
        if grads.representation.is_some() != self.representation.is_some() {
            return Err(Error::Usage("gradient buffer has a different mode".into()));
        }
        let (height, width, bands) = rec.xhat.dims();
        let shape = [1, bands, height, width];
        let latent_shape = [1, self.config.features, height, width];
        let n = bands * height * width;

        let mut a_bar = Tensor4::zeros(latent_shape);
        let mut d_bar = Tensor4::from_raw(shape, xhat_grad.as_slice().to_vec());
        let mut h_bar = Tensor4::zeros(shape);
        let mut u_bar = Tensor4::zeros(shape);

        for k in (0..self.stages.len()).rev() {
            let stage = &self.stages[k];
            let record = &tape.stages[k];
            let (mu, rho) = (stage.mu(), stage.rho());

            // u' = u + d' - h'
            let mut u_prev_bar = u_bar.clone();
            d_bar.add_assign(&u_bar);
            h_bar.axpy(-1.0, &u_bar);
            // h' = H(d' + u)
            let q_bar = stage.prior.backward(&record.prior, h_bar, &mut grads.stages[k].prior)?;
            d_bar.add_assign(&q_bar);
            u_prev_bar.add_assign(&q_bar);
            // d' = D(alpha')
            a_bar.add_assign(&self.decode_back(&record.decoder, d_bar, grads)?);
            // alpha' = alpha - mu * grad
            let a_prev_bar = a_bar.clone();
            let grad_bar = Tensor4::from_raw(a_bar.shape(), a_bar.as_slice().iter().map(|v| -mu * v).collect());
            let mu_bar = -record.grad.dot(&a_bar);
            grads.stages[k].mu_raw += mu_bar * sigmoid(stage.mu_raw);
            // grad = g1 + rho * g2
            let rho_bar = record.g2.dot(&grad_bar);
            grads.stages[k].rho_raw += rho_bar * sigmoid(stage.rho_raw);
            let g2_bar = Tensor4::from_raw(grad_bar.shape(), grad_bar.as_slice().iter().map(|v| rho * v).collect());
            let p_bar = self.encode_back(&record.penalty, g2_bar, grads, true)?.expect("input gradient requested");
            // p = d - h + u
            let mut d_prev_bar = p_bar.clone();
            let h_prev_bar = Tensor4::from_raw(shape, p_bar.as_slice().iter().map(|v| -v).collect());
            u_prev_bar.add_assign(&p_bar);
            // r_s = Phi_s^T Phi_s d - b_s
            for (op, fid) in tape.ops.iter().zip(&record.fidelity) {
                let r_bar = self.encode_back(fid, grad_bar.clone(), grads, true)?.expect("input gradient requested");
                let mut back = vec![0.0; n];
                op.gram_into(r_bar.as_slice(), &mut back);
                d_prev_bar.add_assign(&Tensor4::from_raw(shape, back));
            }

            a_bar = a_prev_bar;
            d_bar = d_prev_bar;
            h_bar = h_prev_bar;
            u_bar = u_prev_bar;
        }

        // h0 = D(alpha0), alpha0 = G(mean b)
        d_bar.add_assign(&h_bar);
        a_bar.add_assign(&self.decode_back(&tape.init_decoder, d_bar, grads)?);
        self.encode_back(&tape.init_encoder, a_bar, grads, false)?;
        Ok(())
    }

    /// Convenience: fresh gradient buffer filled by [`UnrolledModel::backward`].
    pub fn gradients(&self, rec: &Reconstruction, xhat_grad: &SpectralCube) -> Result<UnrolledModel> {
        let mut grads = self.zeros_like();
        self.backward(rec, xhat_grad, &mut grads)?;
        Ok(grads)
    }

    /// Rebuilds a model from checkpoint blocks, inferring its geometry.
    pub fn from_blocks(blocks: &[ParamBlock]) -> Result<Self> {
        let by_name: HashMap<&str, &ParamBlock> = blocks.iter().map(|b| (b.name.as_str(), b)).collect();
        let stack = |prefix: &str| -> Result<Option<ConvStack>> {
            let mut layers = Vec::new();
            loop {
                let l = layers.len();
                let (Some(w), Some(b)) = (
                    by_name.get(format!("{prefix}.{l}.weight").as_str()),
                    by_name.get(format!("{prefix}.{l}.bias").as_str()),
                ) else {
                    break;
                };
                layers.push(ConvParams::from_blocks(&w.shape, w.values.clone(), b.values.clone())?);
            }
            if layers.is_empty() {
                Ok(None)
            } else {
                ConvStack::new(layers).map(Some)
            }
        };
        let scalar = |name: String| -> Result<f64> {
            match by_name.get(name.as_str()) {
                Some(b) if b.values.len() == 1 => Ok(b.values[0]),
                _ => Err(Error::Format(format!("checkpoint lacks scalar {name}"))),
            }
        };

        let representation = match (stack("D")?, stack("G")?) {
            (Some(d), Some(g)) => Some(Representation { decoder: DecoderNet { stack: d }, gradnet: GradientNet { stack: g } }),
            (None, None) => None,
            _ => return Err(Error::Format("checkpoint has only one of D and G".into())),
        };
        let mut stages = Vec::new();
        while let Some(residual) = stack(&format!("H.{}", stages.len()))? {
            let k = stages.len();
            stages.push(StageParams {
                mu_raw: scalar(format!("S.{k}.mu_raw"))?,
                rho_raw: scalar(format!("S.{k}.rho_raw"))?,
                prior: PriorNet::new(residual)?,
            });
        }
        if stages.is_empty() {
            return Err(Error::Format("checkpoint has no stages".into()));
        }
        let bands = stages[0].prior.bands();
        let prior_width = stages[0].prior.residual.layers()[0].out_channels();
        let config = match &representation {
            Some(r) => ModelConfig {
                bands,
                features: r.decoder.features(),
                stages: stages.len(),
                hidden_layers: r.decoder.stack.layers().len() - 1,
                width: r.decoder.stack.layers()[0].out_channels(),
                prior_width,
                admmnet: false,
                ..ModelConfig::default()
            },
            None => ModelConfig {
                bands,
                features: bands,
                stages: stages.len(),
                prior_width,
                admmnet: true,
                ..ModelConfig::default()
            },
        };
        if let Some(r) = &representation {
            if r.decoder.bands() != bands || r.gradnet.bands() != bands || r.gradnet.features() != r.decoder.features() {
                return Err(Error::Format("D, G and H disagree on channel counts".into()));
            }
        }
        if stages.iter().any(|s| s.prior.bands() != bands) {
            return Err(Error::Format("stage priors disagree on band count".into()));
        }
        let model = Self { config, representation, stages };
        if model.parameter_count() != blocks.iter().map(|b| b.values.len()).sum::<usize>() {
            return Err(Error::Format("checkpoint holds blocks the model does not use".into()));
        }
        Ok(model)
    }
}

impl Parameters for UnrolledModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(r) = &self.representation {
            r.decoder.stack.visit(&join(prefix, "D"), f);
            r.gradnet.stack.visit(&join(prefix, "G"), f);
        }
        for (k, s) in self.stages.iter().enumerate() {
            s.prior.visit(&join(prefix, &format!("H.{k}")), f);
            f(&join(prefix, &format!("S.{k}.mu_raw")), &[1], std::slice::from_ref(&s.mu_raw));
            f(&join(prefix, &format!("S.{k}.rho_raw")), &[1], std::slice::from_ref(&s.rho_raw));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        if let Some(r) = &mut self.representation {
            r.decoder.stack.visit_mut(&join(prefix, "D"), f);
            r.gradnet.stack.visit_mut(&join(prefix, "G"), f);
        }
        for (k, s) in self.stages.iter_mut().enumerate() {
            s.prior.visit_mut(&join(prefix, &format!("H.{k}")), f);
            f(&join(prefix, &format!("S.{k}.mu_raw")), &[1], std::slice::from_mut(&mut s.mu_raw));
            f(&join(prefix, &format!("S.{k}.rho_raw")), &[1], std::slice::from_mut(&mut s.rho_raw));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::CodedAperture;
    use crate::substrate::checkpoint::{assign_blocks, decode_checkpoint, encode_checkpoint};

    fn tiny(admmnet: bool) -> ModelConfig {
        ModelConfig {
            bands: 3,
            features: if admmnet { 3 } else { 2 },
            stages: 2,
            hidden_layers: 2,
            width: 4,
            prior_width: 4,
            admmnet,
            ..ModelConfig::default()
        }
    }

    fn problem(h: usize, w: usize, c: usize, seed: u64) -> (Measurement, SensingOperator) {
        let op = SensingOperator::new(CodedAperture::random(h, w, c, 0.5, seed).unwrap(), h, w, c).unwrap();
        let x = SpectralCube::from_fn(h, w, c, |i, j, k| 0.5 + 0.4 * ((i * 3 + j * 5 + k * 7 + seed as usize) as f64).sin()).unwrap();
        (op.forward(&x).unwrap(), op)
    }

    #[test]
    fn softplus_round_trip() {
        for y in [0.01, 0.1, 1.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        let m = UnrolledModel::new(tiny(false), 1).unwrap();
        assert!((m.stages()[0].mu() - 0.01).abs() < 1e-12);
        assert!((m.stages()[0].rho() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn trace_has_one_entry_per_stage() {
        let m = UnrolledModel::new(tiny(false), 2).unwrap();
        let (y, op) = problem(5, 4, 3, 1);
        let (x, trace) = m.reconstruct(&y, &op, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace.stages[1].reconstruction, x);
    }

    #[test]
    fn admmnet_requires_square_representation() {
        let mut cfg = tiny(true);
        cfg.features = 2;
        assert!(UnrolledModel::new(cfg, 0).is_err());
        let m = UnrolledModel::new(tiny(true), 0).unwrap();
        assert!(m.admmnet_mode());
        let mut names = Vec::new();
        m.visit("", &mut |n, _, _| names.push(n.to_string()));
        assert!(names.iter().all(|n| !n.starts_with('D') && !n.starts_with('G')));
    }

    #[test]
    fn geometry_mismatch_is_an_argument_error() {
        let m = UnrolledModel::new(tiny(false), 3).unwrap();
        let (y, op) = problem(4, 4, 4, 0);
        assert!(matches!(m.reconstruct(&y, &op, false), Err(Error::Argument(_))));
        assert!(matches!(m.reconstruct_multi(&[], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_without_tape_is_usage_error() {
        let m = UnrolledModel::new(tiny(false), 4).unwrap();
        let (y, op) = problem(4, 4, 3, 0);
        let rec = m.forward(&[y], &[op], false, false).unwrap();
        let g = SpectralCube::zeros(4, 4, 3);
        assert!(matches!(m.gradients(&rec, &g), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        for admm in [false, true] {
            let m = UnrolledModel::new(tiny(admm), 5).unwrap();
            let (y, op) = problem(5, 5, 3, 2);
            let rec = m.forward(&[y], &[op], true, false).unwrap();
            let g = m.gradients(&rec, &SpectralCube::zeros(5, 5, 3)).unwrap();
            assert!(g.flatten().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn non_finite_weights_report_stage() {
        let mut m = UnrolledModel::new(tiny(false), 6).unwrap();
        m.stages_mut()[1].mu_raw = 1e308;
        m.representation_mut().unwrap().gradnet.stack.layers_mut()[0].bias[0] = 1e300;
        let (y, op) = problem(4, 4, 3, 1);
        match m.reconstruct(&y, &op, false) {
            Err(Error::Numeric { .. }) => {}
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn checkpoint_blocks_rebuild_the_model() {
        for admm in [false, true] {
            let m = UnrolledModel::new(tiny(admm), 7).unwrap();
            let blocks = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
            let rebuilt = UnrolledModel::from_blocks(&blocks).unwrap();
            assert_eq!(rebuilt.config().stages, 2);
            assert_eq!(rebuilt.admmnet_mode(), admm);
            let mut again = m.zeros_like();
            assign_blocks(&mut again, &blocks).unwrap();
            assert_eq!(again.flatten(), rebuilt.flatten());
        }
    }
}
