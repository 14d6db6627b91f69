//! Convolutional LSTM without peephole connections.
//!
//! ```text
//! i_t = σ(W_xi * x_t + W_hi * h_{t-1} + b_i)
//! f_t = σ(W_xf * x_t + W_hf * h_{t-1} + b_f)
//! Ĉ_t = tanh(W_xc * x_t + W_hc * h_{t-1} + b_c)
//! o_t = σ(W_xo * x_t + W_ho * h_{t-1} + b_o)
//! C_t = f_t ∘ C_{t-1} + i_t ∘ Ĉ_t
//! h_t = o_t ∘ tanh(C_t)
//! ```
//!
//! The eight gate kernels are stored fused in one `[4·filters, Cin+filters,
//! Kh, Kw]` tensor (gate blocks in the order i, f, c, o along the first axis;
//! input channels first, hidden channels after along the second), so one
//! convolution of `concat(x_t, h_{t-1})` evaluates all gates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

    fn block(self) -> usize {
        match self {
            Gate::Input => 0,
            Gate::Forget => 1,
            Gate::Cell => 2,
            Gate::Output => 3,
        }
    }
}

/// Which operand a gate kernel convolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateInput {
    /// `W_x·`, applied to the step input.
    Input,
    /// `W_h·`, applied to the previous hidden state.
    Hidden,
}

#[derive(Clone, Debug)]
pub struct ConvLSTMLayer {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub return_sequence: bool,
    kernel_id: ParamId,
    bias_id: ParamId,
}

impl ConvLSTMLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        return_sequence: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "ConvLSTM kernel must have odd extents, got {kh}x{kw}"
            )));
        }
        if in_channels == 0 || filters == 0 {
            return Err(Error::config("ConvLSTM needs at least one input channel and filter"));
        }
        let cin = in_channels + filters;
        let per_gate = filters * cin * kh * kw;
        // Glorot per gate block: fan_in over (input + hidden) channels.
        let limit = (6.0 / ((cin + filters) * kh * kw) as f64).sqrt();
        let mut data = Vec::with_capacity(4 * per_gate);
        for _ in 0..4 * per_gate {
            data.push(rng.gen_range(-limit..=limit));
        }
        let k = Tensor::new(&[4 * filters, cin, kh, kw], data)?;
        let kernel_id = store.add(format!("{name}.kernel"), k, true)?;
        let bias_id = store.add(format!("{name}.bias"), Tensor::zeros(&[4 * filters]), true)?;
        Ok(ConvLSTMLayer {
            in_channels,
            filters,
            kernel,
            return_sequence,
            kernel_id,
            bias_id,
        })
    }

    pub fn kernel_id(&self) -> ParamId {
        self.kernel_id
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias_id
    }

    fn kernel_span(&self, input: GateInput) -> (usize, usize) {
        match input {
            GateInput::Input => (0, self.in_channels),
            GateInput::Hidden => (self.in_channels, self.filters),
        }
    }

    /// Extracts one gate kernel, `[filters, Cin or filters, Kh, Kw]`.
    pub fn gate_kernel(&self, store: &ParamStore, gate: Gate, input: GateInput) -> Tensor {
        let k = store.get(self.kernel_id);
        let (start, len) = self.kernel_span(input);
        let (kh, kw) = self.kernel;
        let cin = self.in_channels + self.filters;
        let f = self.filters;
        Tensor::from_fn(&[f, len, kh, kw], |i| {
            let kk = i % (kh * kw);
            let c = (i / (kh * kw)) % len;
            let o = i / (kh * kw * len);
            k.data()[((gate.block() * f + o) * cin + start + c) * kh * kw + kk]
        })
    }

    pub fn set_gate_kernel(&self, store: &mut ParamStore, gate: Gate, input: GateInput, value: &Tensor) -> Result<()> {
        let (start, len) = self.kernel_span(input);
        let (kh, kw) = self.kernel;
        let f = self.filters;
        if value.shape() != [f, len, kh, kw] {
            return Err(Error::dim(format!(
                "gate kernel must be {:?}, got {:?}",
                [f, len, kh, kw],
                value.shape()
            )));
        }
        let cin = self.in_channels + self.filters;
        let k = store.get_mut(self.kernel_id);
        for (i, &v) in value.data().iter().enumerate() {
            let kk = i % (kh * kw);
            let c = (i / (kh * kw)) % len;
            let o = i / (kh * kw * len);
            k.data_mut()[((gate.block() * f + o) * cin + start + c) * kh * kw + kk] = v;
        }
        Ok(())
    }

    pub fn gate_bias(&self, store: &ParamStore, gate: Gate) -> Vec<f64> {
        let f = self.filters;
        store.get(self.bias_id).data()[gate.block() * f..(gate.block() + 1) * f].to_vec()
    }

    pub fn set_gate_bias(&self, store: &mut ParamStore, gate: Gate, value: &[f64]) {
        let f = self.filters;
        assert_eq!(value.len(), f);
        store.get_mut(self.bias_id).data_mut()[gate.block() * f..(gate.block() + 1) * f].copy_from_slice(value);
    }

    /// One recurrence step. `x_t` is `[B, Cin, F, C]`, states are
    /// `[B, filters, F, C]`. Returns `(h_t, c_t)`.
    pub fn step(&self, g: &mut Graph, p: &Binding, x_t: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (sx, sh, sc) = (g.shape(x_t).to_vec(), g.shape(h_prev).to_vec(), g.shape(c_prev).to_vec());
        let ok = sx.len() == 4
            && sh.len() == 4
            && sx[0] == sh[0]
            && sx[1] == self.in_channels
            && sh[1] == self.filters
            && sx[2..] == sh[2..]
            && sh == sc;
        if !ok {
            return Err(Error::dim(format!(
                "ConvLSTM step: input {:?}, hidden {:?}, cell {:?} (expected Cin={}, filters={})",
                sx, sh, sc, self.in_channels, self.filters
            )));
        }
        let f = self.filters;
        let joined = g.concat(&[x_t, h_prev], 1)?;
        let z = g.conv2d(joined, p.var(self.kernel_id))?;
        let z = g.add_along(z, p.var(self.bias_id), 1)?;
        let zi = g.narrow(z, 1, 0, f)?;
        let zf = g.narrow(z, 1, f, f)?;
        let zc = g.narrow(z, 1, 2 * f, f)?;
        let zo = g.narrow(z, 1, 3 * f, f)?;
        let i = g.sigmoid(zi);
        let fg = g.sigmoid(zf);
        let cand = g.tanh(zc);
        let o = g.sigmoid(zo);
        let keep = g.mul(fg, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs the recurrence over `seq` (`[B, V, Cin, F, C]`) from zero states.
    /// Returns the last hidden state `[B, filters, F, C]`, or every hidden
    /// state `[B, V, filters, F, C]` when `return_sequence` is set.
    pub fn forward(&self, g: &mut Graph, p: &Binding, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 5 {
            return Err(Error::dim(format!("ConvLSTM expects [B, V, Cin, F, C], got {:?}", s)));
        }
        let (b, steps, rows, cols) = (s[0], s[1], s[3], s[4]);
        if steps == 0 {
            return Err(Error::contract("ConvLSTM needs a non-empty sequence"));
        }
        let state_shape = [b, self.filters, rows, cols];
        let mut h = g.constant(Tensor::zeros(&state_shape));
        let mut c = g.constant(Tensor::zeros(&state_shape));
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.narrow(seq, 1, t, 1)?;
            let xt = g.reshape(xt, &[b, s[2], rows, cols])?;
            let (h2, c2) = self.step(g, p, xt, h, c)?;
            h = h2;
            c = c2;
            if self.return_sequence {
                hs.push(g.reshape(h, &[b, 1, self.filters, rows, cols])?);
            }
        }
        if self.return_sequence {
            g.concat(&hs, 1)
        } else {
            Ok(h)
        }
    }

    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        4 * self.filters * (self.in_channels + self.filters) * kh * kw + 4 * self.filters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(cin: usize, f: usize, k: usize, seq: bool, seed: u64) -> (ParamStore, ConvLSTMLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = ConvLSTMLayer::new(&mut store, "lstm", cin, f, (k, k), seq, &mut rng).unwrap();
        (store, l)
    }

    fn zero_params(store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        let (store, l) = layer(1, 2, 3, false, 0);
        assert_eq!(store.count_trainable(), 224);
        assert_eq!(l.param_count(), 224);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            ConvLSTMLayer::new(&mut store, "l", 1, 2, (2, 3), false, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_weights_give_half_gates_and_zero_state() {
        let (mut store, l) = layer(1, 2, 3, false, 1);
        zero_params(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let h0 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let c0 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let (h, c) = l.step(&mut g, &p, x, h0, c0).unwrap();
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let (mut store, l) = layer(1, 1, 1, false, 2);
        zero_params(&mut store);
        l.set_gate_bias(&mut store, Gate::Forget, &[50.0]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 3.0));
        let h0 = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let c0 = g.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| 0.3 * i as f64 - 0.4));
        let (_, c) = l.step(&mut g, &p, x, h0, c0).unwrap();
        assert!(g.value(c).max_abs_diff(g.value(c0)) < 1e-12);
    }

    #[test]
    fn spatial_mismatch_is_dimension_error() {
        let (store, l) = layer(1, 2, 3, false, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let h0 = g.constant(Tensor::zeros(&[1, 2, 4, 3]));
        let c0 = g.constant(Tensor::zeros(&[1, 2, 4, 3]));
        assert!(matches!(l.step(&mut g, &p, x, h0, c0), Err(Error::Dimension(_))));
    }

    /// Scalar LSTM evaluated by hand on a 1×1 grid with 1×1 kernels.
    fn scalar_lstm(store: &ParamStore, l: &ConvLSTMLayer, xs: &[f64]) -> Vec<f64> {
        let w = |gate, inp| l.gate_kernel(store, gate, inp).data()[0];
        let b = |gate| l.gate_bias(store, gate)[0];
        let (mut h, mut c) = (0.0, 0.0);
        let mut out = vec![];
        for &x in xs {
            let i = sigmoid(w(Gate::Input, GateInput::Input) * x + w(Gate::Input, GateInput::Hidden) * h + b(Gate::Input));
            let f = sigmoid(w(Gate::Forget, GateInput::Input) * x + w(Gate::Forget, GateInput::Hidden) * h + b(Gate::Forget));
            let cc = (w(Gate::Cell, GateInput::Input) * x + w(Gate::Cell, GateInput::Hidden) * h + b(Gate::Cell)).tanh();
            let o = sigmoid(w(Gate::Output, GateInput::Input) * x + w(Gate::Output, GateInput::Hidden) * h + b(Gate::Output));
            c = f * c + i * cc;
            h = o * c.tanh();
            out.push(h);
        }
        out
    }

    #[test]
    fn matches_scalar_lstm_oracle() {
        for seed in 0..10 {
            let (mut store, l) = layer(1, 1, 1, true, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.get_mut(l.bias_id()).data_mut().copy_from_slice(&bias);
            let xs: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let seq = g.constant(Tensor::new(&[1, 5, 1, 1, 1], xs.clone()).unwrap());
            let hs = l.forward(&mut g, &p, seq).unwrap();
            let want = scalar_lstm(&store, &l, &xs);
            for (a, b) in g.value(hs).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sequence_last_slice_equals_last_state() {
        let (store, l_seq) = layer(2, 3, 3, true, 5);
        let l_last = ConvLSTMLayer {
            return_sequence: false,
            ..l_seq.clone()
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let seq = g.constant(Tensor::from_fn(&[2, 4, 2, 5, 5], |i| (i as f64 * 0.37).sin()));
        let all = l_seq.forward(&mut g, &p, seq).unwrap();
        let last = l_last.forward(&mut g, &p, seq).unwrap();
        let tail = g.narrow(all, 1, 3, 1).unwrap();
        assert_eq!(g.value(tail).data(), g.value(last).data());
    }

    #[test]
    fn single_step_sequence_equals_step() {
        let (store, l) = layer(1, 2, 3, false, 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| (i as f64).cos());
        let seq = g.constant(x.reshape(&[1, 1, 1, 4, 4]).unwrap());
        let out = l.forward(&mut g, &p, seq).unwrap();
        let xv = g.constant(x);
        let z = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let (h, _) = l.step(&mut g, &p, xv, z, z).unwrap();
        assert_eq!(g.value(out).data(), g.value(h).data());
    }

    #[test]
    fn repeated_input_matches_manual_steps() {
        let (store, l) = layer(1, 2, 3, false, 7);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let frame = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.1 * i as f64);
        let mut stacked = Vec::new();
        for _ in 0..3 {
            stacked.extend_from_slice(frame.data());
        }
        let seq = g.constant(Tensor::new(&[1, 3, 1, 3, 3], stacked).unwrap());
        let out = l.forward(&mut g, &p, seq).unwrap();
        let x = g.constant(frame);
        let mut h = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let mut c = h;
        for _ in 0..3 {
            let (h2, c2) = l.step(&mut g, &p, x, h, c).unwrap();
            h = h2;
            c = c2;
        }
        assert_eq!(g.value(out).data(), g.value(h).data());
    }

    #[test]
    fn output_shape_full_scale() {
        let (store, l) = layer(1, 32, 3, false, 8);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let seq = g.constant(Tensor::full(&[1, 10, 1, 18, 18], 0.5));
        let out = l.forward(&mut g, &p, seq).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 18, 18]);
    }

    #[test]
    fn hidden_state_bounded() {
        let (store, l) = layer(1, 3, 3, true, 9);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let seq = g.constant(Tensor::from_fn(&[1, 6, 1, 4, 4], |i| 1e3 * (i as f64).sin()));
        let out = l.forward(&mut g, &p, seq).unwrap();
        assert!(g.value(out).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn unsequenced_input_is_rejected() {
        let (store, l) = layer(1, 1, 1, false, 10);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(l.forward(&mut g, &p, x), Err(Error::Dimension(_))));
    }
}
