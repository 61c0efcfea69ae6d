use super::Tensor;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
        }
    }

    /// One bias-corrected Adam update. `grads[i] == None` means a zero
    /// gradient for `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[Option<Tensor>],
        learning_rate: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "adam: parameter {:?} vs moment {:?}",
                    p.shape(),
                    m.shape()
                )));
            }
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "adam: gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let gd = g.as_ref().map(|g| g.data());
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = gd.map_or(0.0, |g| g[i]);
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then decay proportional to
/// the inverse square root of the update number. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSqrtSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl InverseSqrtSchedule {
    pub fn new(peak: f64, warmup_steps: u64) -> Self {
        InverseSqrtSchedule { peak, warmup_steps }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps as f64;
        if step < warmup {
            self.peak * step / warmup
        } else {
            self.peak * (warmup.max(1.0) / step).sqrt()
        }
    }
}
