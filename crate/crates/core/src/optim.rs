//! Adam optimizer over named parameter sets and the
//! reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamTensors;
use crate::tensor::Tensor;

/// Adam hyperparameters. The reference setting runs with betas
/// (0, 0.999): no first-moment smoothing, standard second-moment
/// accumulation. Bias correction handles beta1 = 0 naturally.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub slots: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps }
    }

    pub fn init_state(params: &impl ParamTensors) -> AdamState {
        let mut slots = Vec::new();
        params.for_each_tensor("", &mut |name, t| {
            slots.push((
                name.to_string(),
                Tensor::zeros(t.shape()),
                Tensor::zeros(t.shape()),
            ));
        });
        AdamState { t: 0, slots }
    }

    /// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    /// `grads` must align with the parameter traversal order.
    pub fn step(
        &self,
        state: &mut AdamState,
        lr: f64,
        params: &mut dyn ParamTensors,
        grads: &[(String, Tensor)],
    ) -> Result<()> {
        state.t += 1;
        let t = state.t;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let mut idx = 0;
        let mut status = Ok(());
        params.for_each_tensor_mut("", &mut |name, theta| {
            if status.is_err() {
                return;
            }
            if idx >= grads.len() || idx >= state.slots.len() {
                status = Err(Error::Numeric("gradient/slot count mismatch".into()));
                return;
            }
            let (gname, grad) = (&grads[idx].0, &grads[idx].1);
            let (sname, m, v) = &mut state.slots[idx];
            if gname != name || sname != name {
                status = Err(Error::Numeric(format!(
                    "parameter order mismatch at {} (grad {}, slot {})",
                    name, gname, sname
                )));
                return;
            }
            let td = theta.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..td.len() {
                let g = grad.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                td[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            idx += 1;
        });
        status?;
        if idx != grads.len() {
            return Err(Error::Numeric(format!(
                "{} gradients but {} parameters",
                grads.len(),
                idx
            )));
        }
        Ok(())
    }
}

/// Scale all gradients so the global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. No-op when `max_norm <= 0`.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Reduce-on-plateau: after `patience` consecutive epochs without the
/// validation metric improving below `best - tol`, multiply the rate by
/// `factor`. The baseline is established by the pre-training validation
/// pass (or the first observation).
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: u32,
    pub tol: f64,
    pub best: Option<f64>,
    pub since_improve: u32,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, factor: f64, patience: u32, tol: f64) -> Self {
        PlateauSchedule {
            lr: lr0,
            factor,
            patience,
            tol,
            best: None,
            since_improve: 0,
        }
    }

    /// Record the pre-training metric without counting it as an epoch.
    pub fn set_baseline(&mut self, value: f64) {
        self.best = Some(value);
        self.since_improve = 0;
    }

    /// Feed one per-epoch validation value; returns true when the rate
    /// was just reduced.
    pub fn observe(&mut self, value: f64) -> bool {
        let Some(best) = self.best else {
            self.set_baseline(value);
            return false;
        };
        if value < best - self.tol {
            self.best = Some(value);
            self.since_improve = 0;
            return false;
        }
        self.since_improve += 1;
        if self.since_improve >= self.patience {
            self.lr *= self.factor;
            self.since_improve = 0;
            return true;
        }
        false
    }
}
