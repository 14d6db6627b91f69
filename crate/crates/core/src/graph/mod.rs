//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already a topological order. [`Graph::backward`] walks it once in reverse.
//! Gradients of leaf nodes accumulate across backward calls until
//! [`Graph::zero_grad`].

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxis {
    /// One group per row of the last axis (layer normalization).
    Last,
    /// One group per index of the given axis, pooled over all other axes
    /// (batch normalization over a channel axis).
    Channel(usize),
}

/// Per-group statistics from a normalization op.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddAlong { x: Var, v: Var, axis: usize },
    MulAlong { x: Var, v: Var, axis: usize },
    Act { x: Var, kind: Activation },
    Recip { x: Var },
    Softmax { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    Mean { x: Var },
    Normalize { x: Var, axis: NormAxis, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The recording tape. Single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf tracked for gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf whose tracking follows `value.requires_grad`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = value.requires_grad;
        self.push(value, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like the leaf, zeros when none was accumulated.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------

    /// Matrix product. Accepts `[M,K]·[K,N]`, `[B,M,K]·[K,N]` (shared
    /// right operand) and `[B,M,K]·[B,K,N]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul of {:?} and {:?}", sa, sb));
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) | (3, 2) => {
                if sa[sa.len() - 1] != sb[0] {
                    return Err(mismatch());
                }
                let mut s = sa[..sa.len() - 1].to_vec();
                s.push(sb[1]);
                s
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                vec![sa[0], sa[1], sb[2]]
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; numel(&out_shape)];
        let (ad, bd) = (self.data(a), self.data(b));
        if sb.len() == 2 {
            let rows = ad.len() / sa[sa.len() - 1];
            kernels::gemm(ad, bd, &mut out, rows, sb[0], sb[1]);
        } else {
            let (m, k, n) = (sa[1], sa[2], sb[2]);
            for i in 0..sa[0] {
                kernels::gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b }, rg))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if !(2..=3).contains(&r) {
            return Err(Error::dim(format!("transpose needs rank 2 or 3, got {:?}", s)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let v = self.permute_raw(x, &perm);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Transpose { x }, rg))
    }

    /// Same-padded 2-D cross-correlation. `x` is `[B,Cin,H,W]` or
    /// `[Cin,H,W]`; `k` is `[Cout,Cin,Kh,Kw]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sk.len() != 4 {
            return Err(Error::dim(format!("conv2d kernel must be rank 4, got {:?}", sk)));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d same padding needs odd kernel extents, got {}x{}",
                sk[2], sk[3]
            )));
        }
        let (batch, unbatched) = match sx.len() {
            3 => (1, true),
            4 => (sx[0], false),
            _ => return Err(Error::dim(format!("conv2d input must be rank 3 or 4, got {:?}", sx))),
        };
        let tail = &sx[sx.len() - 3..];
        if tail[0] != sk[1] {
            return Err(Error::dim(format!(
                "conv2d input {:?} has {} channels, kernel {:?} expects {}",
                sx, tail[0], sk, sk[1]
            )));
        }
        let geom = ConvGeom {
            batch,
            cin: sk[1],
            cout: sk[0],
            h: tail[1],
            w: tail[2],
            kh: sk[2],
            kw: sk[3],
        };
        let y = kernels::conv2d_forward(self.data(x), self.data(k), geom);
        let shape = if unbatched {
            vec![geom.cout, geom.h, geom.w]
        } else {
            vec![batch, geom.cout, geom.h, geom.w]
        };
        let rg = self.rg(&[x, k]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Conv2d { x, k, geom }, rg))
    }

    // ----------------------------------------------------------------
    // Elementwise
    // ----------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{} of {:?} and {:?}",
                op,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub { a, b }))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale { x, c }, rg)
    }

    fn along_check(&self, x: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() || self.value(v).numel() != s[axis] {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} along axis {} of {:?}",
                self.shape(v),
                axis,
                s
            )));
        }
        Ok(axis_split(s, axis))
    }

    /// `x + v` with `v` broadcast along `axis` (bias addition).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner) = self.along_check(x, v, axis)?;
        let vd = self.data(v);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (a, &bias) in vd.iter().enumerate().take(dim) {
                let base = (o * dim + a) * inner;
                out[base..base + inner].iter_mut().for_each(|e| *e += bias);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, v]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddAlong { x, v, axis }, rg))
    }

    /// `x ∘ v` with `v` broadcast along `axis` (gain).
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, dim, inner) = self.along_check(x, v, axis)?;
        let vd = self.data(v);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (a, &gain) in vd.iter().enumerate().take(dim) {
                let base = (o * dim + a) * inner;
                out[base..base + inner].iter_mut().for_each(|e| *e *= gain);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, v]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulAlong { x, v, axis }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = self.value(x).map(|e| kind.apply(e));
        let rg = self.rg(&[x]);
        self.push(v, Op::Act { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| 1.0 / e);
        let rg = self.rg(&[x]);
        self.push(v, Op::Recip { x }, rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = *s.last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(s, out), Op::Softmax { x }, rg)
    }

    // ----------------------------------------------------------------
    // Shape manipulation
    // ----------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim(format!("concat axis {} out of range for {:?}", axis, s0)));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat on axis {} of {:?} and {:?}",
                    axis, s0, s
                )));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        self.reshape(x, &[n]).expect("flatten preserves size")
    }

    fn permute_raw(&self, x: Var, perm: &[usize]) -> Tensor {
        let s = self.shape(x);
        let map = kernels::permute_index_map(s, perm);
        let src = self.data(x);
        let data = map.iter().map(|&i| src[i]).collect();
        Tensor::from_parts(perm.iter().map(|&p| s[p]).collect(), data)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let r = self.shape(x).len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "invalid permutation {:?} for {:?}",
                perm,
                self.shape(x)
            )));
        }
        let v = self.permute_raw(x, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `start..start+len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::dim(format!(
                "narrow {}..{} on axis {} of {:?}",
                start,
                start + len,
                axis,
                s
            )));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start }, rg))
    }

    // ----------------------------------------------------------------
    // Reductions and normalization
    // ----------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Zero-mean unit-variance normalization per group, without gain or
    /// bias. Uses the biased variance and `1/sqrt(var + eps)`.
    pub fn normalize(&mut self, x: Var, axis: NormAxis, eps: f64) -> Result<(Var, NormStats)> {
        let s = self.shape(x).to_vec();
        let groups = NormGroups::new(&s, axis)?;
        let src = self.data(x);
        let mut mean = vec![0.0; groups.count];
        let mut var = vec![0.0; groups.count];
        for (i, &v) in src.iter().enumerate() {
            mean[groups.of(i)] += v;
        }
        let n = groups.size as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        for (i, &v) in src.iter().enumerate() {
            let g = groups.of(i);
            var[g] += (v - mean[g]).powi(2);
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = src
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = groups.of(i);
                (v - mean[g]) * inv_std[g]
            })
            .collect();
        let rg = self.rg(&[x]);
        let var_out = self.push(
            Tensor::from_parts(s, out),
            Op::Normalize { x, axis, inv_std },
            rg,
        );
        Ok((var_out, NormStats { mean, var }))
    }

    // ----------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------

    /// Propagates `d loss / d node` to every tracked leaf and adds it to the
    /// leaf's accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::contract(
                "loss does not depend on any tracked tensor",
            ));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for its inputs.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut res = vec![];
                if sb.len() == 2 {
                    let (k, n) = (sb[0], sb[1]);
                    let m = ad.len() / k;
                    if want(*a) {
                        let mut da = vec![0.0; ad.len()];
                        kernels::gemm_nt(g, bd, &mut da, m, k, n);
                        res.push((*a, da));
                    }
                    if want(*b) {
                        let mut db = vec![0.0; bd.len()];
                        kernels::gemm_tn(ad, g, &mut db, m, k, n);
                        res.push((*b, db));
                    }
                } else {
                    let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if want(*a) {
                        let mut da = vec![0.0; ad.len()];
                        for t in 0..bt {
                            kernels::gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bd[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                        res.push((*a, da));
                    }
                    if want(*b) {
                        let mut db = vec![0.0; bd.len()];
                        for t in 0..bt {
                            kernels::gemm_tn(
                                &ad[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        res.push((*b, db));
                    }
                }
                res
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                let r = s.len();
                let mut perm: Vec<usize> = (0..r).collect();
                perm.swap(r - 2, r - 1);
                vec![(*x, permute_data(g, s, &perm))]
            }
            Op::Conv2d { x, k, geom } => {
                let mut res = vec![];
                if want(*x) {
                    res.push((*x, kernels::conv2d_backward_input(g, self.data(*k), *geom)));
                }
                if want(*k) {
                    res.push((*k, kernels::conv2d_backward_kernel(self.data(*x), g, *geom)));
                }
                res
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(ad).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddAlong { x, v, axis } => {
                let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                let mut dv = vec![0.0; dim];
                for o in 0..outer {
                    for (a, d) in dv.iter_mut().enumerate() {
                        let base = (o * dim + a) * inner;
                        *d += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                vec![(*x, g.to_vec()), (*v, dv)]
            }
            Op::MulAlong { x, v, axis } => {
                let (outer, dim, inner) = axis_split(node.value.shape(), *axis);
                let (xd, vd) = (self.data(*x), self.data(*v));
                let mut dx = g.to_vec();
                let mut dv = vec![0.0; dim];
                for o in 0..outer {
                    for a in 0..dim {
                        let base = (o * dim + a) * inner;
                        for j in base..base + inner {
                            dx[j] *= vd[a];
                            dv[a] += g[j] * xd[j];
                        }
                    }
                }
                vec![(*x, dx), (*v, dv)]
            }
            Op::Act { x, kind } => {
                let xd = self.data(*x);
                let dx = match kind {
                    Activation::Sigmoid => {
                        let f = fault::sigmoid_factor();
                        g.iter().zip(out).map(|(g, y)| f * g * y * (1.0 - y)).collect()
                    }
                    Activation::Tanh => g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Activation::Relu => g
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                vec![(*x, dx)]
            }
            Op::Recip { x } => vec![(*x, g.iter().zip(out).map(|(g, y)| -g * y * y).collect())],
            Op::Softmax { x } => {
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    let mut dp = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dp.extend_from_slice(&g[base..base + block]);
                    }
                    offset += block;
                    res.push((p, dp));
                }
                res
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, permute_data(g, node.value.shape(), &inv))]
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, dim, inner) = axis_split(sx, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Normalize { x, axis, inv_std } => {
                let groups = NormGroups::new(node.value.shape(), *axis).expect("validated in forward");
                let n = groups.size as f64;
                let mut mg = vec![0.0; groups.count];
                let mut mgy = vec![0.0; groups.count];
                for (j, (&gv, &y)) in g.iter().zip(out).enumerate() {
                    let k = groups.of(j);
                    mg[k] += gv;
                    mgy[k] += gv * y;
                }
                let dx = g
                    .iter()
                    .zip(out)
                    .enumerate()
                    .map(|(j, (&gv, &y))| {
                        let k = groups.of(j);
                        inv_std[k] * (gv - mg[k] / n - y * mgy[k] / n)
                    })
                    .collect();
                vec![(*x, dx)]
            }
        }
    }
}


#[cfg(not(test))]
mod fault {
    #[inline(always)]
    pub fn sigmoid_factor() -> f64 {
        1.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, dim, inner)` extents around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Permutes row-major `data` laid out as `shape`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    kernels::permute_index_map(shape, perm)
        .into_iter()
        .map(|i| data[i])
        .collect()
}

struct NormGroups {
    axis: NormAxis,
    count: usize,
    size: usize,
    inner: usize,
}

impl NormGroups {
    fn new(shape: &[usize], axis: NormAxis) -> Result<Self> {
        let total = numel(shape);
        match axis {
            NormAxis::Last => {
                let last = *shape.last().ok_or_else(|| Error::dim("normalize a scalar"))?;
                Ok(NormGroups {
                    axis,
                    count: total / last,
                    size: last,
                    inner: last,
                })
            }
            NormAxis::Channel(a) => {
                if a >= shape.len() {
                    return Err(Error::dim(format!("channel axis {} out of range for {:?}", a, shape)));
                }
                let (_, dim, inner) = axis_split(shape, a);
                Ok(NormGroups {
                    axis,
                    count: dim,
                    size: total / dim,
                    inner,
                })
            }
        }
    }

    #[inline]
    fn of(&self, i: usize) -> usize {
        match self.axis {
            NormAxis::Last => i / self.inner,
            NormAxis::Channel(_) => (i / self.inner) % self.count,
        }
    }
}
