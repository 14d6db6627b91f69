//! Batch normalization over axis 1 (channels) of a `[B, channels, ...]` input.

use crate::error::{Error, Result};
use crate::graph::{Graph, NormAxis, Var};
use crate::layers::params::{Binding, ParamId, ParamStore};
use crate::layers::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Batch statistics from a train-mode pass, applied to the running
/// averages with [`BatchNormLayer::apply`].
#[derive(Clone, Debug)]
pub struct StatUpdate {
    layer: BatchNormLayer,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        self.layer.apply(store, &self.mean, &self.var);
    }
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || epsilon <= 0.0 {
            return Err(Error::config(format!(
                "batch norm needs momentum in [0, 1) and epsilon > 0, got {momentum}, {epsilon}"
            )));
        }
        Ok(BatchNormLayer {
            channels,
            momentum,
            epsilon,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
        })
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn running_ids(&self) -> (ParamId, ParamId) {
        (self.running_mean, self.running_var)
    }

    /// Train mode normalizes with batch statistics pooled over every axis
    /// but the channel axis and returns them for the running-average update.
    /// Infer mode is the affine map given by the running statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<StatUpdate>)> {
        let s = g.shape(x).to_vec();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::dim(format!(
                "batch norm over {} channels got input {:?}",
                self.channels, s
            )));
        }
        let (normed, update) = match mode {
            Mode::Train => {
                if s[0] < 2 {
                    return Err(Error::contract(format!(
                        "train-mode batch norm needs a batch of at least 2, got {}",
                        s[0]
                    )));
                }
                let (y, stats) = g.normalize(x, NormAxis::Channel(1), self.epsilon)?;
                let update = StatUpdate {
                    layer: self.clone(),
                    mean: stats.mean,
                    var: stats.var,
                };
                (y, Some(update))
            }
            Mode::Infer => {
                let mean = store.get(self.running_mean);
                let var = store.get(self.running_var);
                let shift = g.constant(mean.map(|m| -m));
                let scale = g.constant(var.map(|v| 1.0 / (v + self.epsilon).sqrt()));
                let centered = g.add_along(x, shift, 1)?;
                (g.mul_along(centered, scale, 1)?, None)
            }
        };
        let y = g.mul_along(normed, p.var(self.gamma), 1)?;
        let y = g.add_along(y, p.var(self.beta), 1)?;
        Ok((y, update))
    }

    fn apply(&self, store: &mut ParamStore, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        let rm = store.get_mut(self.running_mean);
        rm.data_mut()
            .iter_mut()
            .zip(mean)
            .for_each(|(r, &b)| *r = m * *r + (1.0 - m) * b);
        let rv = store.get_mut(self.running_var);
        rv.data_mut()
            .iter_mut()
            .zip(var)
            .for_each(|(r, &b)| *r = m * *r + (1.0 - m) * b);
    }
}
