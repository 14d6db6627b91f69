//! MSE + Adam training and per-city descaled evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::schema::{DEFAULT_TARGET_CITIES, TABLE_CITY_ORDER};
use crate::data::{Scaler, WindowedSet};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Mode, ParamStore};
use crate::models::{Forecaster, ModelGraph};
use crate::tensor::Tensor;

/// Mean of the squared differences over every element.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "mse of {:?} against {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Tape version of [`mse`].
pub fn mse_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    let d = g.sub(pred, truth)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.iter().map(|p| p.tensor.numel()))
    }

    /// One update of every slot. `params[i]` and `grads[i]` must match slot
    /// `i` in length.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam has {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::dim(format!("adam slot {i} length mismatch")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Updates the trainable tensors of `store` from their `grad` buffers;
    /// a missing buffer counts as a zero gradient.
    pub fn step_store(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let grads: Vec<Vec<f64>> = store
            .iter()
            .map(|p| match (&p.tensor.grad, p.trainable) {
                (Some(g), true) => g.clone(),
                _ => vec![0.0; p.tensor.numel()],
            })
            .collect();
        // Non-trainable tensors are updated through throwaway copies.
        let mut scratch: Vec<Vec<f64>> = store
            .iter()
            .map(|p| if p.trainable { Vec::new() } else { p.tensor.data().to_vec() })
            .collect();
        let mut params: Vec<&mut [f64]> = store
            .iter_mut()
            .zip(scratch.iter_mut())
            .map(|(p, s)| if p.trainable { p.tensor.data_mut() } else { s.as_mut_slice() })
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.step(&mut params, &grad_refs, lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and ≥ 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 (batch norm)"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the train-mode batch losses of the epoch.
    pub train_mse: f64,
    /// Inference-mode MSE on the validation windows after the epoch.
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// `epoch,train_mse,val_mse` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_mse, e.val_mse);
        }
        s
    }
}

/// Splits `order` into batches of `size`; a trailing singleton joins the
/// previous batch so every batch has at least two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// One train-mode forward/backward on a batch. Gradients replace the
/// store's `grad` buffers; batch-norm running statistics are updated.
/// Returns the batch loss.
pub fn train_step(model: &mut ModelGraph, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let x = g.constant(inputs.clone());
    let y = g.constant(targets.clone());
    let (pred, update) = model.forward_with(&mut g, &p, x, Mode::Train)?;
    let loss = mse_loss(&mut g, pred, y)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate_grads(&g, &p);
    if let Some(u) = update {
        u.apply(&mut model.store);
    }
    Ok(value)
}

/// Inference over many samples in chunks of `chunk`, in parallel, with the
/// results in input order.
pub fn predict_all<M: Forecaster + ?Sized>(model: &M, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = inputs.shape()[0];
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(n)).collect();
            model.predict(&inputs.select_first(&idx))
        })
        .collect::<Result<Vec<Tensor>>>()?;
    let width = model.output_len();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[n, width], data)
}

/// Mini-batch Adam on `train`, keeping the parameters of the epoch with
/// the lowest validation MSE and stopping after `patience` epochs without
/// improvement.
pub fn train(model: &mut ModelGraph, train: &WindowedSet, val: &WindowedSet, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::contract(format!(
            "training needs at least 2 training windows and 1 validation window, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::for_store(&model.store);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in batches(&order, cfg.batch_size).iter().enumerate() {
            let (x, y) = train.batch(idx);
            let loss = train_step(model, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            adam.step_store(&mut model.store, cfg.learning_rate)?;
            total += loss * idx.len() as f64;
        }
        let train_mse = total / train.len() as f64;
        let val_mse = mse(&predict_all(&*model, &val.inputs, 64)?, &val.targets)?;
        if !val_mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        log::info!("epoch {epoch}: train_mse {train_mse:.6e} val_mse {val_mse:.6e}");
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if best.as_ref().is_none_or(|(v, _)| val_mse < *v) {
            let mut snapshot = model.store.clone();
            snapshot.zero_grad();
            best = Some((val_mse, snapshot));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(log)
}

/// Per-city MSE in physical units between descaled predictions and
/// descaled truths, in target order.
pub fn evaluate_predictions(
    pred: &Tensor,
    truth: &Tensor,
    scaler: &Scaler,
    feature: usize,
    cities: &[usize],
) -> Result<Vec<f64>> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} against truths {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let p = scaler.descale_predictions(pred, feature, cities)?;
    let t = scaler.descale_predictions(truth, feature, cities)?;
    let n = cities.len();
    let rows = pred.shape()[0];
    if rows == 0 {
        return Err(Error::contract("cannot evaluate an empty set"));
    }
    Ok((0..n)
        .map(|c| {
            (0..rows)
                .map(|r| {
                    let d = p.get(&[r, c]) - t.get(&[r, c]);
                    d * d
                })
                .sum::<f64>()
                / rows as f64
        })
        .collect())
}

/// Descaled per-city MSE of `model` on `set`. `cities` is the city axis
/// the model was trained with and must match the scaler's.
pub fn evaluate<M: Forecaster + ?Sized>(model: &M, set: &WindowedSet, scaler: &Scaler, cities: &[String]) -> Result<Vec<f64>> {
    if cities != scaler.cities() {
        return Err(Error::config(format!(
            "model cities [{}] differ from scaler cities [{}]",
            cities.join(", "),
            scaler.cities().join(", ")
        )));
    }
    if model.output_len() != set.target_cities.len() {
        return Err(Error::config(format!(
            "model predicts {} targets, set has {}",
            model.output_len(),
            set.target_cities.len()
        )));
    }
    let pred = predict_all(model, &set.inputs, 64)?;
    evaluate_predictions(&pred, &set.targets, scaler, set.target_feature, &set.target_cities)
}

/// Per-city errors of one model for one (feature, horizon) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub feature: String,
    pub horizon: usize,
    pub model: String,
    /// Target cities and their MSEs, in model output order.
    pub cities: Vec<String>,
    pub mse: Vec<f64>,
}

impl EvalTable {
    /// Rows follow `TABLE_CITY_ORDER` when the targets are the six
    /// defaults, output order otherwise.
    pub fn rows(&self) -> Vec<(&str, f64)> {
        let defaults: BTreeSet<&str> = DEFAULT_TARGET_CITIES.iter().copied().collect();
        let ours: BTreeSet<&str> = self.cities.iter().map(String::as_str).collect();
        let order: Vec<&str> = if ours == defaults && self.cities.len() == defaults.len() {
            TABLE_CITY_ORDER.to_vec()
        } else {
            self.cities.iter().map(String::as_str).collect()
        };
        order
            .into_iter()
            .map(|c| {
                let i = self.cities.iter().position(|x| x == c).expect("city present");
                (c, self.mse[i])
            })
            .collect()
    }

    /// `days_ahead,city,<model>` rows.
    pub fn to_csv(&self) -> String {
        table_csv(std::slice::from_ref(self))
    }
}

/// Joins tables into one CSV: one row per (horizon, city), one column per
/// model, horizons ascending. Missing cells are left empty.
pub fn table_csv(tables: &[EvalTable]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for t in tables {
        if !models.contains(&t.model.as_str()) {
            models.push(&t.model);
        }
    }
    let mut horizons: Vec<usize> = tables.iter().map(|t| t.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut s = format!("days_ahead,city,{}\n", models.join(","));
    for h in horizons {
        let at_h: Vec<&EvalTable> = tables.iter().filter(|t| t.horizon == h).collect();
        let mut cities: Vec<&str> = Vec::new();
        for t in &at_h {
            for (c, _) in t.rows() {
                if !cities.contains(&c) {
                    cities.push(c);
                }
            }
        }
        for c in cities {
            let _ = write!(s, "{h},{c}");
            for m in &models {
                let cell = at_h
                    .iter()
                    .find(|t| t.model == *m)
                    .and_then(|t| t.rows().into_iter().find(|(x, _)| *x == c))
                    .map(|(_, v)| format!("{v}"))
                    .unwrap_or_default();
                let _ = write!(s, ",{cell}");
            }
            s.push('\n');
        }
    }
    s
}
