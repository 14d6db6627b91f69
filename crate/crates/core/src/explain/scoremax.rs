//! Gradient ascent on the input to maximize `h = 1/MSE` of a frozen model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::explain::occlusion::Labels;
use crate::explain::saliency::SaliencyMap;
use crate::graph::Graph;
use crate::models::Forecaster;
use crate::tensor::Tensor;
use crate::training::{mse, mse_loss};

/// `1 / mean((pred - truth)^2)`.
pub fn score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(format!("score of {} predictions against {} targets", pred.len(), truth.len())));
    }
    let m = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    if m == 0.0 {
        return Err(Error::InfiniteScore);
    }
    Ok(1.0 / m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoremaxConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub bounds: (f64, f64),
    /// Start from uniform noise inside the bounds instead of the sample.
    pub random_init: Option<u64>,
}

impl Default for ScoremaxConfig {
    fn default() -> Self {
        ScoremaxConfig {
            iterations: 100,
            learning_rate: 0.01,
            bounds: (0.0, 1.0),
            random_init: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoremaxResult {
    /// `I*`, shape `[L, F, C]`, inside the bounds.
    pub input: Tensor,
    /// Score at the start of each iteration.
    pub trace: Vec<f64>,
    pub initial_score: f64,
    /// Score of the clipped result.
    pub final_score: f64,
}

fn score_and_grad<M: Forecaster + ?Sized>(model: &M, input: &Tensor, truth: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (l, f, c) = model.input_dims();
    let mut g = Graph::new();
    let x = g.variable(input.reshape(&[1, l, f, c])?);
    let y = g.constant(truth.reshape(&[1, truth.numel()])?);
    let pred = model.trace(&mut g, x)?;
    let loss = mse_loss(&mut g, pred, y)?;
    if g.value(loss).item() == 0.0 {
        return Err(Error::InfiniteScore);
    }
    let h = g.recip(loss);
    g.backward(h)?;
    Ok((g.value(h).item(), g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()])))
}

fn score_of<M: Forecaster + ?Sized>(model: &M, input: &Tensor, truth: &Tensor) -> Result<f64> {
    let (l, f, c) = model.input_dims();
    let pred = model.predict(&input.reshape(&[1, l, f, c])?)?;
    let m = mse(&pred, &truth.reshape(&[1, truth.numel()])?)?;
    if m == 0.0 {
        return Err(Error::InfiniteScore);
    }
    Ok(1.0 / m)
}

/// Ascends `I ← I + η·dI/‖dI‖` for `iterations` steps starting from
/// `sample` (`[L, F, C]`), then clips into the bounds.
pub fn score_maximize<M: Forecaster + ?Sized>(
    model: &M,
    sample: &Tensor,
    truth: &[f64],
    cfg: &ScoremaxConfig,
) -> Result<ScoremaxResult> {
    let (l, f, c) = model.input_dims();
    if sample.shape() != [l, f, c] {
        return Err(Error::dim(format!("scoremax sample {:?}, model expects [{l}, {f}, {c}]", sample.shape())));
    }
    if truth.len() != model.output_len() {
        return Err(Error::dim(format!("{} targets for {} outputs", truth.len(), model.output_len())));
    }
    if cfg.iterations == 0 {
        return Err(Error::config("scoremax needs at least one iteration"));
    }
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::config(format!("scoremax learning rate must be >= 0, got {}", cfg.learning_rate)));
    }
    let (lo, hi) = cfg.bounds;
    if !(lo <= hi) {
        return Err(Error::config(format!("invalid bounds [{lo}, {hi}]")));
    }
    let truth = Tensor::new(&[truth.len()], truth.to_vec())?;
    let mut input = match cfg.random_init {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(&[l, f, c], |_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        }
        None => sample.clone(),
    };
    let initial_score = score_of(model, &input, &truth)?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations {
        let (h, grad) = score_and_grad(model, &input, &truth)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite input gradient at scoremax iteration {it}")));
        }
        trace.push(h);
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let step = cfg.learning_rate / norm;
            input.data_mut().iter_mut().zip(&grad).for_each(|(x, d)| *x += step * d);
        }
    }
    let input = input.map(|v| v.clamp(lo, hi));
    let final_score = score_of(model, &input, &truth)?;
    Ok(ScoremaxResult {
        input,
        trace,
        initial_score,
        final_score,
    })
}

/// One `F×C` map per requested lag (1-based, lag 1 the oldest).
pub fn lag_maps(result: &ScoremaxResult, lags: &[usize], labels: &Labels) -> Result<Vec<SaliencyMap>> {
    let s = result.input.shape();
    let (l_len, f_len, c_len) = (s[0], s[1], s[2]);
    if labels.features.len() != f_len || labels.cities.len() != c_len {
        return Err(Error::dim("scoremax labels do not match the input grid"));
    }
    lags.iter()
        .map(|&lag| {
            if lag == 0 || lag > l_len {
                return Err(Error::config(format!("lag {lag} outside 1..={l_len}")));
            }
            let plane = result.input.index_first(lag - 1).into_data();
            Ok(SaliencyMap::new(
                format!("Score maximization, lag {lag}"),
                ("feature", labels.features.clone()),
                ("city", labels.cities.clone()),
                plane,
            )?
            .with_meta("lag", lag)
            .with_meta("initial_score", result.initial_score)
            .with_meta("final_score", result.final_score))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[2.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score(&[2.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(score(&[1.0], &[1.0]), Err(Error::InfiniteScore)));
    }

    #[test]
    fn score_rises_toward_truth() {
        let truth = [0.3, -0.2, 1.0];
        let start = [2.0, 1.0, -1.0];
        let mut prev = 0.0;
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let p: Vec<f64> = start.iter().zip(&truth).map(|(a, b)| a + t * (b - a)).collect();
            let h = score(&p, &truth).unwrap();
            assert!(h > prev);
            prev = h;
        }
    }
}
