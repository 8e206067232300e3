//! The decoder `D`, the learned gradient network `G` and the spectral prior `H`.
//!
//! All three are stacks of same-padded convolutions with ReLU between layers
//! and a linear last layer, so they accept any spatial size.

use rand::Rng;

use crate::cube::{LatentCube, SpectralCube};
use crate::error::{argument, Result};
use crate::substrate::activation::{relu_backward_in_place, relu_in_place};
use crate::substrate::conv::conv2d_backward_into;
use crate::substrate::{conv2d_forward, join, ConvParams, Parameters, Tensor4};

pub const DEFAULT_KERNEL: (usize, usize) = (3, 3);

/// Sequence of convolutions; ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    layers: Vec<ConvParams>,
}

/// Inputs seen by each layer during a recorded forward pass.
#[derive(Clone, Debug)]
pub struct StackTape {
    inputs: Vec<Tensor4>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(argument("a conv stack needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(argument(format!(
                    "layer emits {} channels but next layer takes {}",
                    pair[0].out_channels(),
                    pair[1].in_channels()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized stack through the given channel progression.
    pub fn random<R: Rng + ?Sized>(channels: &[usize], kernel: (usize, usize), rng: &mut R) -> Result<Self> {
        if channels.len() < 2 {
            return Err(argument("channel progression needs input and output widths"));
        }
        let layers = channels
            .windows(2)
            .map(|w| ConvParams::he_normal(w[1], w[0], kernel, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        &mut self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(ConvParams::zeros_like).collect() }
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut h = conv2d_forward(x, &self.layers[0])?;
        for layer in &self.layers[1..] {
            relu_in_place(&mut h);
            h = conv2d_forward(&h, layer)?;
        }
        Ok(h)
    }

    /// Forward pass that keeps every layer input for [`ConvStack::backward`].
    pub fn forward_recorded(&self, x: Tensor4) -> Result<(Tensor4, StackTape)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = conv2d_forward(&x, &self.layers[0])?;
        inputs.push(x);
        for layer in &self.layers[1..] {
            relu_in_place(&mut h);
            let next = conv2d_forward(&h, layer)?;
            inputs.push(h);
            h = next;
        }
        Ok((h, StackTape { inputs }))
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient
    /// when `want_input` is set.
    pub fn backward(
        &self,
        tape: &StackTape,
        upstream: Tensor4,
        grads: &mut ConvStack,
        want_input: bool,
    ) -> Result<Option<Tensor4>> {
        let mut g = upstream;
        for l in (0..self.layers.len()).rev() {
            let need = l > 0 || want_input;
            let dx = conv2d_backward_into(&tape.inputs[l], &self.layers[l], &g, &mut grads.layers[l], need)?;
            match dx {
                Some(mut dx) if l > 0 => {
                    relu_backward_in_place(&tape.inputs[l], &mut dx);
                    g = dx;
                }
                other => return Ok(other),
            }
        }
        unreachable!("loop returns at layer 0")
    }
}

impl Parameters for ConvStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &l.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &l.to_string()), f);
        }
    }
}

/// Hyperparameters shared by `D` and `G`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepresentationConfig {
    pub bands: usize,
    pub features: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl RepresentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.features == 0 || self.hidden_layers == 0 || self.width == 0 {
            return Err(argument(format!("representation sizes must be positive: {self:?}")));
        }
        if self.features >= self.bands {
            log::warn!(
                "latent features F={} not below bands C={}; representation is not low-dimensional",
                self.features,
                self.bands
            );
        }
        Ok(())
    }

    fn progression(&self, from: usize, to: usize) -> Vec<usize> {
        let mut ch = vec![from];
        ch.extend(std::iter::repeat(self.width).take(self.hidden_layers));
        ch.push(to);
        ch
    }
}

fn volume_tensor(channels: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor4 {
    Tensor4::from_raw([1, channels, h, w], data)
}

fn channel_check(expected: usize, found: usize, what: &str) -> Result<()> {
    if expected != found {
        return Err(argument(format!("{what} expects {expected} channels, got {found}")));
    }
    Ok(())
}

/// `D`: latent features `F` to spectral bands `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet {
    pub stack: ConvStack,
}

impl DecoderNet {
    pub fn random<R: Rng + ?Sized>(cfg: &RepresentationConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { stack: ConvStack::random(&cfg.progression(cfg.features, cfg.bands), DEFAULT_KERNEL, rng)? })
    }

    pub fn features(&self) -> usize {
        self.stack.in_channels()
    }

    pub fn bands(&self) -> usize {
        self.stack.out_channels()
    }
}

/// `G`: spectral bands `C` to latent features `F`, mirroring the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientNet {
    pub stack: ConvStack,
}

impl GradientNet {
    pub fn random<R: Rng + ?Sized>(cfg: &RepresentationConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { stack: ConvStack::random(&cfg.progression(cfg.bands, cfg.features), DEFAULT_KERNEL, rng)? })
    }

    pub fn features(&self) -> usize {
        self.stack.out_channels()
    }

    pub fn bands(&self) -> usize {
        self.stack.in_channels()
    }
}

/// `H`: `v + R(v)` where `R` is three conv blocks. The last conv of `R` starts
/// at zero so a fresh prior is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorNet {
    pub residual: ConvStack,
}

impl PriorNet {
    pub fn new(residual: ConvStack) -> Result<Self> {
        if residual.in_channels() != residual.out_channels() {
            return Err(argument("prior residual branch must preserve the channel count"));
        }
        Ok(Self { residual })
    }

    pub fn random<R: Rng + ?Sized>(bands: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut residual = ConvStack::random(&[bands, hidden, hidden, bands], DEFAULT_KERNEL, rng)?;
        let last = residual.layers.len() - 1;
        residual.layers[last] = residual.layers[last].zeros_like();
        Self::new(residual)
    }

    pub fn bands(&self) -> usize {
        self.residual.in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self { residual: self.residual.zeros_like() }
    }

    pub fn forward(&self, v: &Tensor4) -> Result<Tensor4> {
        let mut out = self.residual.forward(v)?;
        for (o, x) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *o = x + *o;
        }
        Ok(out)
    }

    pub fn forward_recorded(&self, v: Tensor4) -> Result<(Tensor4, StackTape)> {
        let skip = v.clone();
        let (mut out, tape) = self.residual.forward_recorded(v)?;
        for (o, x) in out.as_mut_slice().iter_mut().zip(skip.as_slice()) {
            *o = x + *o;
        }
        Ok((out, tape))
    }

    /// Always returns the input gradient (skip path plus residual path).
    pub fn backward(&self, tape: &StackTape, upstream: Tensor4, grads: &mut PriorNet) -> Result<Tensor4> {
        let mut dx = self
            .residual
            .backward(tape, upstream.clone(), &mut grads.residual, true)?
            .expect("input gradient requested");
        dx.add_assign(&upstream);
        Ok(dx)
    }
}

impl Parameters for PriorNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.residual.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.residual.visit_mut(prefix, f);
    }
}

/// `x = D(alpha)`.
pub fn decode(net: &DecoderNet, alpha: &LatentCube) -> Result<SpectralCube> {
    channel_check(net.features(), alpha.features(), "decoder")?;
    let (h, w, f) = alpha.dims();
    let out = net.stack.forward(&volume_tensor(f, h, w, alpha.as_slice().to_vec()))?;
    Ok(SpectralCube::from_raw(h, w, net.bands(), out.into_vec()))
}

/// `alpha = G(r)`.
pub fn encode_grad(net: &GradientNet, r: &SpectralCube) -> Result<LatentCube> {
    channel_check(net.bands(), r.bands(), "gradient network")?;
    let (h, w, c) = r.dims();
    let out = net.stack.forward(&volume_tensor(c, h, w, r.as_slice().to_vec()))?;
    Ok(LatentCube::from_raw(h, w, net.features(), out.into_vec()))
}

/// `h = H(v)`.
pub fn prior_apply(net: &PriorNet, v: &SpectralCube) -> Result<SpectralCube> {
    channel_check(net.bands(), v.bands(), "prior network")?;
    let (h, w, c) = v.dims();
    let out = net.forward(&volume_tensor(c, h, w, v.as_slice().to_vec()))?;
    Ok(SpectralCube::from_raw(h, w, c, out.into_vec()))
}
