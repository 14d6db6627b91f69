//! Central finite-difference checks of tape gradients.
//!
//! Non-scalar outputs are reduced to a scalar with fixed, non-uniform
//! weights `w_i = 1 + 0.5·sin(1.3·i + 0.7)` so every output coordinate
//! contributes to the check with a distinct coefficient.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn reduction_weights(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |i| 1.0 + 0.5 * (1.3 * i as f64 + 0.7).sin())
}

fn scalarize(g: &mut Graph, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(reduction_weights(n).reshape(&shape)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = scalarize(&mut g, out)?;
    Ok(g.value(loss).item())
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Analytic gradients of `f` at `xs` (one buffer per input).
pub fn analytic_grads<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = scalarize(&mut g, out)?;
    g.backward(loss)?;
    Ok(vars.iter().map(|&v| g.grad_tensor(v).into_data()).collect())
}

/// Central-difference gradients of `f` at `xs`.
pub fn numeric_grads<F>(f: &F, xs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work = xs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut grads = vec![0.0; xs[t].numel()];
        for (j, gj) in grads.iter_mut().enumerate() {
            let orig = xs[t].data()[j];
            work[t].data_mut()[j] = orig + eps;
            let plus = evaluate(f, &work)?;
            work[t].data_mut()[j] = orig - eps;
            let minus = evaluate(f, &work)?;
            work[t].data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * eps);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Max relative error between analytic and central-difference gradients
/// over every coordinate of every input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, xs)?;
    let numeric = numeric_grads(&f, xs, eps)?;
    Ok(analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}
