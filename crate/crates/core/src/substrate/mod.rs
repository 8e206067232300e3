//! Minimal differentiable layer for the reconstruction networks: 4D tensors,
//! same-padded 3x3 convolution, ReLU, Adam and the weight checkpoint format.
//!
//! There is no tape. Each op has an explicit backward function and callers
//! compose them in reverse order.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
mod gemm;
pub mod tensor;

pub use activation::{relu_backward, relu_forward};
pub use adam::{Adam, OptimizerConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, ParamBlock};
pub use conv::{conv2d_backward, conv2d_forward, ConvParams};
pub use tensor::Tensor4;

/// Anything that owns named learnable arrays.
///
/// Visiting order is fixed and identical between `visit` and `visit_mut`;
/// optimizers and checkpoints rely on it.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    /// Flattens all parameters in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites all parameters from a flat vector in visiting order.
    fn assign_flat(&mut self, values: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, _, v| {
            v.copy_from_slice(&values[at..at + v.len()]);
            at += v.len();
        });
        assert_eq!(at, values.len(), "flat parameter vector has the wrong length");
    }

    /// `(name, offset, len)` of every block in the flattened vector.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut at = 0;
        self.visit("", &mut |name, _, v| {
            out.push((name.to_string(), at, v.len()));
            at += v.len();
        });
        out
    }

    fn set_zero(&mut self) {
        self.visit_mut("", &mut |_, _, v| v.fill(0.0));
    }
}

/// A single learnable scalar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scalar(pub f64);

impl Parameters for Scalar {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(prefix, &[1], std::slice::from_ref(&self.0));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        f(prefix, &[1], std::slice::from_mut(&mut self.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
