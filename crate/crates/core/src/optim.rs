//! Adaptive moment estimation and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// First/second moment buffers and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(dim: usize) -> Self {
        Self::with_hyper(dim, Self::BETA1, Self::BETA2, Self::EPS)
    }

    pub fn with_hyper(dim: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Applies one update `θ += -η · m̂ / (ε + √n̂)` in place.
    ///
    /// A non-finite gradient leaves both `params` and the state untouched.
    pub fn step(&mut self, grad: &[f64], params: &mut [f64], eta: f64) -> Result<()> {
        if grad.len() != self.dim() || params.len() != self.dim() {
            return Err(Error::Dimension {
                expected: format!("{} parameters", self.dim()),
                found: format!("gradient {} / params {}", grad.len(), params.len()),
            });
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { index });
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);

        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += -eta * m_hat / (eps + v_hat.sqrt());
        }
        Ok(())
    }
}

/// Geometric decay from `eta_start` at the first epoch to `eta_end` at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub eta_start: f64,
    pub eta_end: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            eta_start: 0.01,
            eta_end: 0.001,
            total_epochs: 30,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_start >= self.eta_end && self.eta_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy start >= end > 0, got {} -> {}",
                self.eta_start, self.eta_end
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Config(format!(
                "epoch {epoch} out of range 0..{}",
                self.total_epochs
            )));
        }
        if epoch == 0 {
            return Ok(self.eta_start);
        }
        if epoch == self.total_epochs - 1 {
            return Ok(self.eta_end);
        }
        Ok(self.lr_at_progress(epoch as f64 / (self.total_epochs - 1) as f64))
    }

    /// Learning rate at a fraction `progress ∈ [0, 1]` of the schedule.
    pub fn lr_at_progress(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.eta_start * (self.eta_end / self.eta_start).powf(p)
    }
}
