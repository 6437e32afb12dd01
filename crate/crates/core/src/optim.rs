//! Stochastic gradient descent with momentum, Nesterov lookahead and
//! inverse-time learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    /// Inverse-time decay: the step size is `lr / (1 + decay * t)`.
    pub decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.001,
            decay: 1e-6,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::config(format!(
                "decay must be >= 0, got {}",
                self.decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Step size after `t` completed updates.
    pub fn effective_lr(&self, t: u64) -> f64 {
        self.lr / (1.0 + self.decay * t as f64)
    }
}

/// SGD optimizer together with its velocity buffers and update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
    iteration: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: Vec::new(),
            iteration: 0,
        })
    }

    /// Restores an optimizer from saved velocity buffers and counter.
    pub fn from_state(config: SgdConfig, velocity: Vec<Tensor>, iteration: u64) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity,
            iteration,
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Number of updates applied so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn current_lr(&self) -> f64 {
        self.config.effective_lr(self.iteration)
    }

    /// Applies one update to every parameter tensor:
    ///
    /// `v ← μ·v − η·g`, then `w ← w + μ·v − η·g` (Nesterov) or `w ← w + v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::shape(
                "optimizer state does not match parameter count",
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?}, gradient {:?}, velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                )));
            }
        }
        let lr = self.current_lr();
        let mu = self.config.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v - lr * g;
                if self.config.nesterov {
                    *w += mu * *v - lr * g;
                } else {
                    *w += *v;
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }
}
