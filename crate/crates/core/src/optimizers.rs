//! SGD and Adam with one-shot moment modulation after a teleport.
//!
//! After a teleport moves the parameters by `Δθ`, the Adam moments describe a
//! trajectory that may no longer apply. Arming the optimizer with
//! `σ = clamp(cos(Δθ, g′), 0, 1)` makes the next step decay history by `σβ`
//! instead of `β`; every later step is ordinary Adam again.

use crate::conflict::cos_sim;
use crate::error::{Error, Result};

/// Plain gradient descent `θ ← θ − η g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    /// `η = 1 / (Λ √(T − 1))` for smoothness estimate `Λ` and horizon `T`.
    pub fn horizon_step_size(smoothness: f64, total_steps: usize) -> Result<f64> {
        if !(smoothness > 0.0) {
            return Err(Error::Precondition(format!(
                "smoothness estimate must be positive, got {smoothness}"
            )));
        }
        if total_steps < 2 {
            return Err(Error::Precondition("step-size rule needs at least two steps".into()));
        }
        Ok(1.0 / (smoothness * ((total_steps - 1) as f64).sqrt()))
    }

    pub fn step(&self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::shape("sgd gradient", params.len(), grad.len()));
        }
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

/// Modulation factor from a teleport displacement and the gradient the
/// optimizer would have followed, clamped to `[0, 1]`.
pub fn htr_sigma(delta_theta: &[f64], g_prev: &[f64]) -> f64 {
    cos_sim(delta_theta, g_prev).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HtrAdamState {
    pub v: Vec<f64>,
    pub s: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    sigma: f64,
    pending: bool,
}

impl HtrAdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Precondition(format!(
                "Adam betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        if !(lr > 0.0) || !(eps > 0.0) {
            return Err(Error::Precondition("Adam lr and eps must be positive".into()));
        }
        Ok(Self {
            v: vec![0.0; len],
            s: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
            lr,
            sigma: 1.0,
            pending: false,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_pending(&self) -> bool {
        self.pending
    }

    /// Schedules modulation `sigma` for the next step only.
    pub fn arm_htr(&mut self, sigma: f64) -> Result<()> {
        if self.pending {
            return Err(Error::Usage("a trajectory modulation is already pending".into()));
        }
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Precondition(format!("sigma must lie in [0, 1], got {sigma}")));
        }
        self.sigma = sigma;
        self.pending = true;
        Ok(())
    }

    pub fn adam_step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.v.len() || grad.len() != self.v.len() {
            return Err(Error::shape("adam state", self.v.len(), params.len().max(grad.len())));
        }
        let b1 = self.sigma * self.beta1;
        let b2 = self.sigma * self.beta2;
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.v[i] = b1 * self.v[i] + (1.0 - b1) * g;
            self.s[i] = b2 * self.s[i] + (1.0 - b2) * g * g;
            let v_hat = self.v[i] / c1;
            let s_hat = self.s[i] / c2;
            params[i] -= self.lr * v_hat / (s_hat.sqrt() + self.eps);
        }
        self.sigma = 1.0;
        self.pending = false;
        Ok(())
    }
}
