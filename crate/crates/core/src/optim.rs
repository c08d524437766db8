//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for `{name}` has shape {got:?}, parameter is {want:?}")]
    Shape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("parameter `{name}` belongs to frozen group {group:?}")]
    Frozen { name: String, group: Group },
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamConfig,
    trainable: Vec<Group>,
    step: u64,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamConfig, n_params: usize, trainable: &[Group]) -> Self {
        Self {
            config,
            trainable: trainable.to_vec(),
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &[Group] {
        &self.trainable
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<F>, &Tensor<F>)> {
        match (&self.m[id.index()], &self.v[id.index()]) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Restores state saved in a checkpoint.
    pub fn restore(&mut self, step: u64, id: ParamId, m: Tensor<F>, v: Tensor<F>) {
        self.step = step;
        self.m[id.index()] = Some(m);
        self.v[id.index()] = Some(v);
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One update with learning rate `lr`. Parameters outside the trainable
    /// groups are rejected before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)], lr: f64) -> Result<(), OptimError> {
        for (id, g) in grads {
            let p = store.get(*id);
            if !self.trainable.contains(&p.group) {
                return Err(OptimError::Frozen {
                    name: p.name.clone(),
                    group: p.group,
                });
            }
            if g.shape() != p.value.shape() {
                return Err(OptimError::Shape {
                    name: p.name.clone(),
                    got: g.shape().to_vec(),
                    want: p.value.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let decay = F::of(1.0 - lr * c.weight_decay);
        let (lr_f, eps) = (F::of(lr), F::of(c.eps));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        for (id, g) in grads {
            let shape = g.shape().to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(shape));
            let w = store.value_mut(*id).data_mut();
            for (((wi, mi), vi), &gi) in w
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *wi = *wi * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<F: Float>(grads: &[(ParamId, Tensor<F>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Linear ramp from 0 to `peak` over the warmup, then half-cosine decay
    /// to 0 at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps.max(1);
        if step < warm {
            return self.peak * step as f64 / warm as f64;
        }
        if self.total_steps <= warm {
            return self.peak;
        }
        let progress = ((step - warm) as f64 / (self.total_steps - warm) as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
