//! Single-head scaled dot-product self-attention and a one-layer encoder
//! block (attention + residual + layer norm, feed-forward + residual +
//! layer norm). Inputs are `[S, E]` token matrices or `[B, S, E]` batches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NormAxis, Var};
use crate::layers::dense::Dense;
use crate::layers::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub embed: usize,
    pub key_dim: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, embed: usize, key_dim: usize, rng: &mut R) -> Result<Self> {
        if embed == 0 || key_dim == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        let mut proj = |suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                Tensor::glorot(&[embed, key_dim], embed, key_dim, rng),
                true,
            )
        };
        Ok(AttentionHead {
            embed,
            key_dim,
            w_q: proj("w_q")?,
            w_k: proj("w_k")?,
            w_v: proj("w_v")?,
        })
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_q, self.w_k, self.w_v]
    }

    /// `softmax(Q·Kᵀ / √d_k)·V` with `Q = I·W_q`, `K = I·W_k`, `V = I·W_v`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if !(2..=3).contains(&s.len()) || s[s.len() - 1] != self.embed {
            return Err(Error::dim(format!(
                "attention expects [S, {}] or [B, S, {}], got {:?}",
                self.embed, self.embed, s
            )));
        }
        let q = g.matmul(input, p.var(self.w_q))?;
        let k = g.matmul(input, p.var(self.w_k))?;
        let v = g.matmul(input, p.var(self.w_v))?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.key_dim as f64).sqrt());
        let weights = g.softmax_rows(scores);
        g.matmul(weights, v)
    }
}

/// Intermediate values of one encoder pass, for inspection in tests.
#[derive(Clone, Copy, Debug)]
pub struct EncoderTrace {
    pub attention: Var,
    /// First layer norm before gain and bias.
    pub normed_attention: Var,
    pub hidden: Var,
    /// Second layer norm before gain and bias.
    pub normed_output: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub head: AttentionHead,
    pub ff_dim: usize,
    w_out: ParamId,
    ln1: (ParamId, ParamId),
    ff1: Dense,
    ff2: Dense,
    ln2: (ParamId, ParamId),
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        embed: usize,
        key_dim: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let head = AttentionHead::new(store, &format!("{name}.attn"), embed, key_dim, rng)?;
        let w_out = store.add(
            format!("{name}.w_out"),
            Tensor::glorot(&[key_dim, embed], key_dim, embed, rng),
            true,
        )?;
        let ln1 = (
            store.add(format!("{name}.ln1.gain"), Tensor::ones(&[embed]), true)?,
            store.add(format!("{name}.ln1.bias"), Tensor::zeros(&[embed]), true)?,
        );
        let ff1 = Dense::new(store, &format!("{name}.ff1"), embed, ff_dim, Some(Activation::Relu), rng)?;
        let ff2 = Dense::new(store, &format!("{name}.ff2"), ff_dim, embed, None, rng)?;
        let ln2 = (
            store.add(format!("{name}.ln2.gain"), Tensor::ones(&[embed]), true)?,
            store.add(format!("{name}.ln2.bias"), Tensor::zeros(&[embed]), true)?,
        );
        Ok(EncoderBlock {
            head,
            ff_dim,
            w_out,
            ln1,
            ff1,
            ff2,
            ln2,
        })
    }

    pub fn embed(&self) -> usize {
        self.head.embed
    }

    fn layer_norm(g: &mut Graph, p: &Binding, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<(Var, Var)> {
        let last = g.shape(x).len() - 1;
        let (n, _) = g.normalize(x, NormAxis::Last, LAYER_NORM_EPSILON)?;
        let y = g.mul_along(n, p.var(gain), last)?;
        Ok((n, g.add_along(y, p.var(bias), last)?))
    }

    pub fn forward_traced(&self, g: &mut Graph, p: &Binding, input: Var) -> Result<EncoderTrace> {
        let attention = self.head.forward(g, p, input)?;
        let projected = g.matmul(attention, p.var(self.w_out))?;
        let res1 = g.add(input, projected)?;
        let (normed_attention, hidden) = Self::layer_norm(g, p, res1, self.ln1)?;
        let ff = self.ff1.forward(g, p, hidden)?;
        let ff = self.ff2.forward(g, p, ff)?;
        let res2 = g.add(hidden, ff)?;
        let (normed_output, output) = Self::layer_norm(g, p, res2, self.ln2)?;
        Ok(EncoderTrace {
            attention,
            normed_attention,
            hidden,
            normed_output,
            output,
        })
    }

    /// `A = LN(I + Attention(I)·W_out)`, `out = LN(A + FFN(A))`.
    pub fn forward(&self, g: &mut Graph, p: &Binding, input: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, input)?.output)
    }
}
