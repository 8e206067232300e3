//! Stride-1 cross-correlation with symmetric zero padding ("same" output size),
//! lowered to GEMM through an im2col buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::gemm;
use super::tensor::Tensor4;
use super::{join, Parameters};
use crate::error::{argument, Result};

/// Weights `[out][in][kh][kw]` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    out_channels: usize,
    in_channels: usize,
    kernel: (usize, usize),
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: (usize, usize)) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(argument("conv channel counts must be positive"));
        }
        if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
            return Err(argument(format!("kernel {}x{} must have odd sides", kernel.0, kernel.1)));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel.0 * kernel.1],
            bias: vec![0.0; out_channels],
        })
    }

    /// He initialization: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn he_normal<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        kernel: (usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(out_channels, in_channels, kernel)?;
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in &mut p.weight {
            *w = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_channels, self.in_channels, self.kernel).expect("shape already validated")
    }

    pub(crate) fn from_blocks(weight_shape: &[usize], weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight_shape.len() != 4 {
            return Err(argument(format!("conv weight must be rank 4, got {weight_shape:?}")));
        }
        let mut p = Self::zeros(weight_shape[0], weight_shape[1], (weight_shape[2], weight_shape[3]))?;
        if weight.len() != p.weight.len() || bias.len() != p.bias.len() {
            return Err(argument("conv block payload does not match its shape"));
        }
        p.weight = weight;
        p.bias = bias;
        Ok(p)
    }
}

impl Parameters for ConvParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1];
        f(&join(prefix, "weight"), &shape, &self.weight);
        f(&join(prefix, "bias"), &[self.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1];
        f(&join(prefix, "weight"), &shape, &mut self.weight);
        f(&join(prefix, "bias"), &[self.out_channels], &mut self.bias);
    }
}

fn im2col(x: &[f64], channels: usize, h: usize, w: usize, kernel: (usize, usize), cols: &mut [f64]) {
    let (kh, kw) = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    for c in 0..channels {
        let src = &x[c * plane..(c + 1) * plane];
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut cols[((c * kh + a) * kw + b) * plane..][..plane];
                for i in 0..h {
                    let dst = &mut row[i * w..(i + 1) * w];
                    let si = i as isize + a as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &src[si as usize * w..(si as usize + 1) * w];
                    // valid destination columns: 0 <= j + b - pw < w
                    let lo = pw.saturating_sub(b);
                    let hi = (w + pw).saturating_sub(b).min(w);
                    dst[..lo].fill(0.0);
                    if hi > lo {
                        dst[lo..hi].copy_from_slice(&src_row[lo + b - pw..hi + b - pw]);
                    }
                    dst[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, h: usize, w: usize, kernel: (usize, usize), x: &mut [f64]) {
    let (kh, kw) = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = h * w;
    for c in 0..channels {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for a in 0..kh {
            for b in 0..kw {
                let row = &cols[((c * kh + a) * kw + b) * plane..][..plane];
                for i in 0..h {
                    let si = i as isize + a as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let lo = pw.saturating_sub(b);
                    let hi = (w + pw).saturating_sub(b).min(w);
                    if hi <= lo {
                        continue;
                    }
                    let src = &row[i * w + lo..i * w + hi];
                    let out = &mut dst[si as usize * w + lo + b - pw..si as usize * w + hi + b - pw];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
    }
}

fn check_input(input: &Tensor4, params: &ConvParams) -> Result<()> {
    if input.channels() != params.in_channels {
        return Err(argument(format!(
            "conv expects {} input channels, got {}",
            params.in_channels,
            input.channels()
        )));
    }
    Ok(())
}

pub fn conv2d_forward(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    check_input(input, params)?;
    let [n, _, h, w] = input.shape();
    let plane = h * w;
    let r = params.patch_len();
    let co = params.out_channels;
    let mut out = vec![0.0; n * co * plane];
    let mut cols = vec![0.0; r * plane];
    for s in 0..n {
        im2col(input.sample(s), params.in_channels, h, w, params.kernel, &mut cols);
        let dst = &mut out[s * co * plane..(s + 1) * co * plane];
        for (c, chunk) in dst.chunks_exact_mut(plane).enumerate() {
            chunk.fill(params.bias[c]);
        }
        gemm(co, r, plane, (&params.weight, r as isize, 1), (&cols, plane as isize, 1), 1.0, dst);
    }
    Ok(Tensor4::from_raw([n, co, h, w], out))
}

/// Accumulates weight and bias gradients into `grads` and returns the input
/// gradient when `want_input` is set.
pub fn conv2d_backward_into(
    input: &Tensor4,
    params: &ConvParams,
    upstream: &Tensor4,
    grads: &mut ConvParams,
    want_input: bool,
) -> Result<Option<Tensor4>> {
    check_input(input, params)?;
    let [n, ci, h, w] = input.shape();
    if upstream.shape() != [n, params.out_channels, h, w] {
        return Err(argument(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            upstream.shape(),
            [n, params.out_channels, h, w]
        )));
    }
    if grads.weight.len() != params.weight.len() || grads.bias.len() != params.bias.len() {
        return Err(argument("gradient buffer shape differs from parameters"));
    }
    let plane = h * w;
    let r = params.patch_len();
    let co = params.out_channels;
    let mut cols = vec![0.0; r * plane];
    let mut dcols = if want_input { vec![0.0; r * plane] } else { Vec::new() };
    let mut dx = if want_input { vec![0.0; n * ci * plane] } else { Vec::new() };
    for s in 0..n {
        let dy = upstream.sample(s);
        im2col(input.sample(s), ci, h, w, params.kernel, &mut cols);
        // dW += dy * cols^T
        gemm(co, plane, r, (dy, plane as isize, 1), (&cols, 1, plane as isize), 1.0, &mut grads.weight);
        for (c, chunk) in dy.chunks_exact(plane).enumerate() {
            grads.bias[c] += chunk.iter().sum::<f64>();
        }
        if want_input {
            // dcols = W^T * dy
            gemm(r, co, plane, (&params.weight, 1, r as isize), (dy, plane as isize, 1), 0.0, &mut dcols);
            col2im_add(&dcols, ci, h, w, params.kernel, &mut dx[s * ci * plane..(s + 1) * ci * plane]);
        }
    }
    Ok(want_input.then(|| Tensor4::from_raw([n, ci, h, w], dx)))
}

/// Exact gradients of [`conv2d_forward`]: `(input_grad, param_grads)`.
pub fn conv2d_backward(input: &Tensor4, params: &ConvParams, upstream: &Tensor4) -> Result<(Tensor4, ConvParams)> {
    let mut grads = params.zeros_like();
    let dx = conv2d_backward_into(input, params, upstream, &mut grads, true)?.expect("input gradient requested");
    Ok((dx, grads))
}
