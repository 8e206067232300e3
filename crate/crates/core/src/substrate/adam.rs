use super::Parameters;
use crate::error::{argument, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(argument(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(argument("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Moments are allocated lazily on the first step and
/// indexed by the parameter visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, first: Vec::new(), second: Vec::new() })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort before any parameter changes.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut flat_grads: Vec<(String, Vec<f64>)> = Vec::new();
        grads.visit("", &mut |name, _, g| flat_grads.push((name.to_string(), g.to_vec())));
        for (name, g) in &flat_grads {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in {name} at index {pos}: {}", g[pos])));
            }
        }
        if self.first.is_empty() {
            self.first = flat_grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != flat_grads.len() {
            return Err(argument("parameter layout changed between Adam steps"));
        }
        self.step += 1;
        let OptimizerConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut slot = 0;
        let mut mismatch = false;
        params.visit_mut("", &mut |_, _, p| {
            let g = &flat_grads[slot].1;
            if g.len() != p.len() {
                mismatch = true;
                return;
            }
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            for n in 0..p.len() {
                m[n] = beta1 * m[n] + (1.0 - beta1) * g[n];
                v[n] = beta2 * v[n] + (1.0 - beta2) * g[n] * g[n];
                let m_hat = m[n] / c1;
                let v_hat = v[n] / c2;
                p[n] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
            slot += 1;
        });
        if mismatch {
            return Err(argument("gradient shapes differ from parameters"));
        }
        Ok(())
    }
}
