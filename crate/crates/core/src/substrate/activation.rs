use super::tensor::Tensor4;
use crate::error::{argument, Result};

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    Tensor4::from_raw(x.shape(), x.as_slice().iter().map(|&v| v.max(0.0)).collect())
}

pub(crate) fn relu_in_place(x: &mut Tensor4) {
    for v in x.as_mut_slice() {
        *v = v.max(0.0);
    }
}

/// Masks `upstream` by `x > 0`. `x` may be either the pre- or post-activation
/// value since both are positive at the same positions.
pub fn relu_backward(x: &Tensor4, upstream: &Tensor4) -> Result<Tensor4> {
    if x.shape() != upstream.shape() {
        return Err(argument(format!("relu grad shape {:?} vs input {:?}", upstream.shape(), x.shape())));
    }
    let data = x.as_slice().iter().zip(upstream.as_slice()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    Ok(Tensor4::from_raw(x.shape(), data))
}

pub(crate) fn relu_backward_in_place(activated: &Tensor4, grad: &mut Tensor4) {
    for (g, &v) in grad.as_mut_slice().iter_mut().zip(activated.as_slice()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_backward_definitions() {
        let x = Tensor4::new([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).as_slice(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor4::new([1, 1, 1, 3], vec![1.0; 3]).unwrap()).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn finite_differences_away_from_kink() {
        let xs: Vec<f64> = (0..40).map(|n| -2.0 + 0.1 * n as f64 + 0.0137).collect();
        let x = Tensor4::new([1, 1, 1, xs.len()], xs.clone()).unwrap();
        let ones = Tensor4::new([1, 1, 1, xs.len()], vec![1.0; xs.len()]).unwrap();
        let g = relu_backward(&x, &ones).unwrap();
        let h = 1e-6;
        for (n, &v) in xs.iter().enumerate() {
            assert!(v.abs() > 1e-3);
            let fd = ((v + h).max(0.0) - (v - h).max(0.0)) / (2.0 * h);
            assert!((fd - g.as_slice()[n]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
