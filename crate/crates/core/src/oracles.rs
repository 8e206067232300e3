//! Brute-force references: an explicit sensing matrix, a plain ISTA solver and
//! a literal, loop-by-loop transcription of the unrolled ADMM iteration.
//!
//! These exist to cross-check the fast paths and to give a classical floor.

use crate::cube::{Measurement, SpectralCube};
use crate::error::{argument, Error, Result};
use crate::sensing::SensingOperator;
use crate::substrate::Tensor4;
use crate::unrolled::UnrolledModel;

/// Refuse to materialize matrices with more entries than this.
pub const DENSE_ENTRY_LIMIT: usize = 1_000_000;

/// Explicit `HW x HWC` sensing matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseOperator {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.entries[r * self.cols..(r + 1) * self.cols].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.entries[r * self.cols..(r + 1) * self.cols]) {
                *o += a * yr;
            }
        }
        out
    }
}

/// Writes out `Phi` entry by entry from the aperture.
pub fn build_dense(op: &SensingOperator) -> Result<DenseOperator> {
    let (h, w, c) = op.dims();
    let (rows, cols) = (h * w, h * w * c);
    if rows.saturating_mul(cols) > DENSE_ENTRY_LIMIT {
        return Err(Error::Refused(format!("dense operator would hold {} entries", rows * cols)));
    }
    let mut entries = vec![0.0; rows * cols];
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for k in 0..c {
                entries[row * cols + k * h * w + i * w + j] = op.aperture().get(i + c - 1 - k, j);
            }
        }
    }
    Ok(DenseOperator { rows, cols, entries })
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest eigenvalue of `Phi^T Phi` by power iteration.
pub fn gram_norm(op: &SensingOperator, iterations: usize) -> f64 {
    let (h, w, c) = op.dims();
    let n = h * w * c;
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let mut out = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        op.gram_into(&v, &mut out);
        lambda = v.iter().zip(&out).map(|(a, b)| a * b).sum();
        std::mem::swap(&mut v, &mut out);
    }
    lambda
}

#[derive(Clone, Debug)]
pub struct IstaOutcome {
    pub solution: SpectralCube,
    /// `0.5 ||Phi x - y||^2 + tau ||x||_1` after each iteration.
    pub objective: Vec<f64>,
    pub step: f64,
}

fn ista_objective(op: &SensingOperator, x: &[f64], y: &[f64], tau: f64) -> f64 {
    let mut px = vec![0.0; y.len()];
    op.forward_into(x, &mut px);
    0.5 * px.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + tau * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// Identity-basis ISTA: `x <- soft(x - eta Phi^T (Phi x - y), eta tau)`.
pub fn ista_solve(y: &Measurement, op: &SensingOperator, tau: f64, iterations: usize) -> Result<SpectralCube> {
    Ok(ista_run(y, op, tau, iterations)?.solution)
}

pub fn ista_run(y: &Measurement, op: &SensingOperator, tau: f64, iterations: usize) -> Result<IstaOutcome> {
    op.check_measurement(y)?;
    if !(tau > 0.0) {
        return Err(argument(format!("ISTA weight tau = {tau} must be positive")));
    }
    let (h, w, c) = op.dims();
    let n = h * w * c;
    let lipschitz = gram_norm(op, 100);
    if lipschitz <= 0.0 {
        return Err(Error::Degenerate("sensing operator is zero".into()));
    }
    // Power iteration approaches the top eigenvalue from below.
    let step = 0.95 / lipschitz;
    let yv = y.as_slice();
    let mut x = vec![0.0; n];
    let mut residual = vec![0.0; h * w];
    let mut grad = vec![0.0; n];
    let mut objective = Vec::with_capacity(iterations);
    let mut rising = 0;
    let mut last = ista_objective(op, &x, yv, tau);
    for it in 0..iterations {
        op.forward_into(&x, &mut residual);
        residual.iter_mut().zip(yv).for_each(|(r, b)| *r -= b);
        op.adjoint_into(&residual, &mut grad);
        for (xv, g) in x.iter_mut().zip(&grad) {
            *xv = soft(*xv - step * g, step * tau);
        }
        let obj = ista_objective(op, &x, yv, tau);
        if !obj.is_finite() {
            return Err(Error::Numeric { stage: it, detail: "ISTA objective is not finite".into() });
        }
        rising = if obj > last { rising + 1 } else { 0 };
        if rising >= 10 {
            return Err(Error::Numeric { stage: it, detail: "ISTA objective rose for 10 iterations".into() });
        }
        last = obj;
        objective.push(obj);
    }
    Ok(IstaOutcome { solution: SpectralCube::from_raw(h, w, c, x), objective, step })
}

/// `(alpha, h, u)` after one iteration of the reference loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceState {
    pub alpha: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
}

/// Runs the unrolled iteration exactly as listed, with `stages` iterations
/// (at most the model's stage count).
pub fn algorithm1_reference_states(
    model: &UnrolledModel,
    y: &Measurement,
    op: &SensingOperator,
    stages: usize,
) -> Result<(SpectralCube, Vec<ReferenceState>)> {
    if stages > model.stages().len() {
        return Err(argument(format!("model has only {} stages", model.stages().len())));
    }
    let (hh, ww, cc) = op.dims();
    if cc != model.bands() {
        return Err(argument("operator band count differs from the model"));
    }
    op.check_measurement(y)?;
    let shape = [1, cc, hh, ww];
    let n = hh * ww * cc;
    let tensor = |v: Vec<f64>| Tensor4::from_raw(shape, v);
    let decode = |a: &Vec<f64>| -> Result<Vec<f64>> {
        let f = a.len() / (hh * ww);
        Ok(model.decode_tensor(&Tensor4::from_raw([1, f, hh, ww], a.clone()))?.into_vec())
    };
    let encode = |r: Vec<f64>| -> Result<Vec<f64>> { Ok(model.encode_tensor(&tensor(r))?.into_vec()) };

    // line 1: alpha = G(Phi^T y)
    let mut phi_t_y = vec![0.0; n];
    op.adjoint_into(y.as_slice(), &mut phi_t_y);
    let mut alpha = encode(phi_t_y.clone())?;
    // line 2: u = 0; h starts at D(alpha)
    let mut u = vec![0.0; n];
    let mut h = decode(&alpha)?;
    let mut states = Vec::with_capacity(stages);

    for k in 0..stages {
        let mu = model.stages()[k].mu();
        let rho = model.stages()[k].rho();
        // line 4
        let d_alpha = decode(&alpha)?;
        let mut meas = vec![0.0; hh * ww];
        op.forward_into(&d_alpha, &mut meas);
        let mut back = vec![0.0; n];
        op.adjoint_into(&meas, &mut back);
        let mut fidelity = vec![0.0; n];
        for i in 0..n {
            fidelity[i] = back[i] - phi_t_y[i];
        }
        let g1 = encode(fidelity)?;
        let mut penalty = vec![0.0; n];
        for i in 0..n {
            penalty[i] = d_alpha[i] - h[i] + u[i];
        }
        let g2 = encode(penalty)?;
        let mut grad = vec![0.0; g1.len()];
        for i in 0..grad.len() {
            grad[i] = g1[i] + rho * g2[i];
        }
        // line 5
        for i in 0..alpha.len() {
            alpha[i] = alpha[i] - mu * grad[i];
        }
        // line 6
        let d_next = decode(&alpha)?;
        let mut arg = vec![0.0; n];
        for i in 0..n {
            arg[i] = d_next[i] + u[i];
        }
        h = model.stages()[k].prior.forward(&tensor(arg))?.into_vec();
        // line 7
        let d_again = decode(&alpha)?;
        for i in 0..n {
            u[i] = u[i] + d_again[i] - h[i];
        }
        states.push(ReferenceState { alpha: alpha.clone(), h: h.clone(), u: u.clone() });
    }
    // line 9
    let x = decode(&alpha)?;
    Ok((SpectralCube::from_raw(hh, ww, cc, x), states))
}

/// The reference loop over all of the model's stages.
pub fn algorithm1_reference(model: &UnrolledModel, y: &Measurement, op: &SensingOperator) -> Result<SpectralCube> {
    Ok(algorithm1_reference_states(model, y, op, model.stages().len())?.0)
}
