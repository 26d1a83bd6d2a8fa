use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    /// Codec settings: constant 1e-4, betas (0.8, 0.99), decay 0.01.
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = params.iter().map(|&p| Tensor::zeros(store.get(p).shape())).collect();
        let v = m.clone();
        Self {
            config,
            step: 0,
            params,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Applies one update. `grads` must hold a gradient for each managed
    /// parameter; gradients for other parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, &pid) in self.params.iter().enumerate() {
            let grad = grads
                .iter()
                .find(|(id, _)| *id == pid)
                .map(|(_, g)| g)
                .ok_or_else(|| {
                    AutodiffError::Invalid(format!("missing gradient for {}", store.name(pid)))
                })?;
            let param = store.get_mut(pid);
            if grad.shape() != param.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adamw_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let decay = 1.0 - c.lr * c.weight_decay;
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }
}
