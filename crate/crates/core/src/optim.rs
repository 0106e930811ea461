//! Parameter bookkeeping and the Adam optimiser.

use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;

/// A model whose trainable tensors can be enumerated in a fixed order.
pub trait Parameterized {
    /// Named parameters, in the order gradients are reported.
    fn params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grads(&self) -> Grads {
        Grads(
            self.params()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        )
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Gradients aligned with [`Parameterized::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.0.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Reject NaN/Inf, naming the offending parameter.
    pub fn check_finite<M: Parameterized + ?Sized>(&self, model: &M) -> Result<()> {
        for ((name, _), g) in model.params().iter().zip(&self.0) {
            if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(PulmoError::Training {
                    layer: name.clone(),
                    detail: format!("non-finite gradient {v}"),
                });
            }
        }
        Ok(())
    }

    /// Sum a list of per-sample gradients in list order.
    pub fn sum_ordered(mut parts: Vec<Grads>) -> Option<Grads> {
        let mut iter = parts.drain(..);
        let mut acc = iter.next()?;
        for g in iter {
            acc.add(&g);
        }
        Some(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<M: Parameterized + ?Sized>(cfg: AdamConfig, model: &M) -> Self {
        let lens: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        Adam {
            cfg,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &Grads) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
