//! Adam and a reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_params(params: &[Tensor], lr: f64) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.numel(), lr)).collect()
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the
/// gradients. Every parameter must carry a gradient.
pub fn adam_step(params: &mut [Tensor], states: &mut [AdamState]) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for (k, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        match &p.grad {
            None => {
                return Err(Error::Contract(format!("parameter {k} has no gradient")));
            }
            Some(g) if g.len() != s.m.len() || g.len() != p.numel() => {
                return Err(Error::Contract(format!(
                    "optimizer state for parameter {k} does not match its shape {:?}",
                    p.shape()
                )));
            }
            Some(_) => {}
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        s.t += 1;
        let bc1 = 1.0 - s.beta1.powi(s.t as i32);
        let bc2 = 1.0 - s.beta2.powi(s.t as i32);
        let grad = p.grad.take().expect("checked above");
        let data = p.data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
            s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            data[i] -= s.lr * m_hat / (v_hat.sqrt() + s.eps);
        }
        p.grad = Some(vec![0.0; grad.len()]);
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` each time the monitored loss
/// fails to improve on the best seen value by more than `min_delta` for
/// `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau factor must lie in (0, 1), got {factor}"
            )));
        }
        if lr.is_nan() || lr <= 0.0 || patience == 0 {
            return Err(Error::Config(
                "learning rate must be positive and patience at least 1".into(),
            ));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Sets the reference loss (typically the loss before any update).
    pub fn with_baseline(mut self, loss: f64) -> Self {
        self.best = loss;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
