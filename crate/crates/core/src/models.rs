//! The four forecaster architectures.
//!
//! Unistream: ConvLSTM over all lags → [encoder] → batch norm → flatten →
//! dense ReLU layers → linear head. Multistream: the lags are split into
//! `m` chronological streams of `V` lags, each run through two stacked
//! ConvLSTMs; stream outputs are concatenated on the channel axis, then
//! [encoder] → batch norm → flatten → dense ReLU → linear head.
//!
//! Before the encoder the `[B, ch, F, C]` map becomes `C` city tokens with
//! embedding `ch·F`; the inverse reshape follows.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::layers::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::layers::container::{Metadata, ParamContainer};
use crate::layers::{
    BatchNormLayer, Binding, ConvLSTMLayer, Dense, EncoderBlock, Mode, ParamStore, StatUpdate,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Unistream,
    AttUnistream,
    Multistream,
    AttMultistream,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Unistream,
        Variant::AttUnistream,
        Variant::Multistream,
        Variant::AttMultistream,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unistream => "unistream",
            Variant::AttUnistream => "att_unistream",
            Variant::Multistream => "multistream",
            Variant::AttMultistream => "att_multistream",
        }
    }

    /// Display name used in tables, e.g. `Att-Multistream`.
    pub fn title(self) -> &'static str {
        match self {
            Variant::Unistream => "Unistream",
            Variant::AttUnistream => "Att-Unistream",
            Variant::Multistream => "Multistream",
            Variant::AttMultistream => "Att-Multistream",
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::AttUnistream | Variant::AttMultistream)
    }

    pub fn is_multistream(self) -> bool {
        matches!(self, Variant::Multistream | Variant::AttMultistream)
    }

    /// The same architecture with the encoder block toggled.
    pub fn with_attention(self, on: bool) -> Variant {
        match (self.is_multistream(), on) {
            (false, false) => Variant::Unistream,
            (false, true) => Variant::AttUnistream,
            (true, false) => Variant::Multistream,
            (true, true) => Variant::AttMultistream,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant `{s}` (expected unistream, att_unistream, multistream or att_multistream)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub lags: usize,
    pub features: usize,
    pub cities: usize,
    pub targets: usize,
    pub streams: usize,
    pub lags_per_stream: usize,
    /// Filters of every ConvLSTM (per stream for multistream).
    pub filters: usize,
    pub kernel: (usize, usize),
    /// Hidden dense widths, each followed by ReLU.
    pub dense: Vec<usize>,
    /// Attention key dimension; `None` means the embedding size.
    pub key_dim: Option<usize>,
    /// Feed-forward width; `None` means twice the embedding size.
    pub ff_dim: Option<usize>,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl ModelConfig {
    /// Full-size defaults: 10 lags on an 18×18 grid, six targets, widths
    /// chosen so the four variants have comparable parameter counts.
    pub fn full(variant: Variant) -> Self {
        let (filters, dense) = match variant {
            Variant::Unistream => (32, vec![512, 128]),
            Variant::AttUnistream => (32, vec![256, 128]),
            Variant::Multistream => (16, vec![512]),
            Variant::AttMultistream => (16, vec![256]),
        };
        ModelConfig {
            variant,
            lags: 10,
            features: 18,
            cities: 18,
            targets: 6,
            streams: 2,
            lags_per_stream: 5,
            filters,
            kernel: (3, 3),
            dense,
            key_dim: None,
            ff_dim: None,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_epsilon: DEFAULT_EPSILON,
        }
    }

    /// Small configuration for tests: L=4, F=C=4, two filters, two targets.
    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            variant,
            lags: 4,
            features: 4,
            cities: 4,
            targets: 2,
            streams: 2,
            lags_per_stream: 2,
            filters: 2,
            kernel: (3, 3),
            dense: if variant.is_multistream() { vec![8] } else { vec![8, 4] },
            key_dim: None,
            ff_dim: None,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_epsilon: DEFAULT_EPSILON,
        }
    }

    /// Channels of the map that enters the encoder / batch norm.
    pub fn trunk_channels(&self) -> usize {
        if self.variant.is_multistream() {
            self.streams * self.filters
        } else {
            self.filters
        }
    }

    /// Token embedding size `channels · F`.
    pub fn embed(&self) -> usize {
        self.trunk_channels() * self.features
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim.unwrap_or_else(|| self.embed())
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_dim.unwrap_or_else(|| 2 * self.embed())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lags", self.lags),
            ("features", self.features),
            ("cities", self.cities),
            ("targets", self.targets),
            ("filters", self.filters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.targets > self.cities {
            return Err(Error::config(format!(
                "{} targets exceed {} cities",
                self.targets, self.cities
            )));
        }
        if self.variant.is_multistream() {
            if self.streams == 0 || self.lags_per_stream == 0 || self.streams * self.lags_per_stream != self.lags {
                return Err(Error::config(format!(
                    "streams × lags per stream must equal lags: {} × {} ≠ {}",
                    self.streams, self.lags_per_stream, self.lags
                )));
            }
        }
        let (kh, kw) = self.kernel;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if self.dense.contains(&0) {
            return Err(Error::config("dense widths must be positive"));
        }
        if self.key_dim == Some(0) || self.ff_dim == Some(0) {
            return Err(Error::config("attention dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_epsilon <= 0.0 {
            return Err(Error::config("batch norm momentum must be in [0, 1) and epsilon positive"));
        }
        Ok(())
    }

    pub fn to_metadata(&self, meta: &mut Metadata) {
        meta.set("variant", self.variant);
        meta.set("lags", self.lags);
        meta.set("features", self.features);
        meta.set("cities", self.cities);
        meta.set("targets", self.targets);
        meta.set("streams", self.streams);
        meta.set("lags_per_stream", self.lags_per_stream);
        meta.set("filters", self.filters);
        meta.set("kernel", format!("{}x{}", self.kernel.0, self.kernel.1));
        meta.set(
            "dense",
            self.dense.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        meta.set("key_dim", self.key_dim());
        meta.set("ff_dim", self.ff_dim());
        meta.set("bn_momentum", format!("{:e}", self.bn_momentum));
        meta.set("bn_epsilon", format!("{:e}", self.bn_epsilon));
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        fn num<T: FromStr>(meta: &Metadata, key: &str) -> Result<T> {
            let v = meta.require(key)?;
            v.parse()
                .map_err(|_| Error::Format(format!("metadata `{key}` has invalid value `{v}`")))
        }
        let kernel = meta.require("kernel")?;
        let (kh, kw) = kernel
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| Error::Format(format!("metadata `kernel` has invalid value `{kernel}`")))?;
        let dense_text = meta.require("dense")?;
        let dense = if dense_text.is_empty() {
            Vec::new()
        } else {
            dense_text
                .split(',')
                .map(|d| d.parse())
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| Error::Format(format!("metadata `dense` has invalid value `{dense_text}`")))?
        };
        let cfg = ModelConfig {
            variant: meta.require("variant")?.parse()?,
            lags: num(meta, "lags")?,
            features: num(meta, "features")?,
            cities: num(meta, "cities")?,
            targets: num(meta, "targets")?,
            streams: num(meta, "streams")?,
            lags_per_stream: num(meta, "lags_per_stream")?,
            filters: num(meta, "filters")?,
            kernel: (kh, kw),
            dense,
            key_dim: Some(num(meta, "key_dim")?),
            ff_dim: Some(num(meta, "ff_dim")?),
            bn_momentum: num(meta, "bn_momentum")?,
            bn_epsilon: num(meta, "bn_epsilon")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recurrent front end of a model.
#[derive(Clone, Debug)]
pub enum Trunk {
    Uni(ConvLSTMLayer),
    /// Per stream: a sequence-returning ConvLSTM feeding a last-state one.
    Multi(Vec<(ConvLSTMLayer, ConvLSTMLayer)>),
}

/// An assembled forecaster: layer handles plus the parameter store they
/// index into.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub trunk: Trunk,
    pub encoder: Option<EncoderBlock>,
    pub norm: BatchNormLayer,
    pub hidden: Vec<Dense>,
    pub head: Dense,
}

impl ModelGraph {
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut store = ParamStore::new();
        let trunk = if cfg.variant.is_multistream() {
            let mut streams = Vec::with_capacity(cfg.streams);
            for s in 0..cfg.streams {
                let first = ConvLSTMLayer::new(&mut store, &format!("stream{s}.convlstm0"), 1, cfg.filters, cfg.kernel, true, rng)?;
                let second = ConvLSTMLayer::new(
                    &mut store,
                    &format!("stream{s}.convlstm1"),
                    cfg.filters,
                    cfg.filters,
                    cfg.kernel,
                    false,
                    rng,
                )?;
                streams.push((first, second));
            }
            Trunk::Multi(streams)
        } else {
            Trunk::Uni(ConvLSTMLayer::new(&mut store, "convlstm", 1, cfg.filters, cfg.kernel, false, rng)?)
        };
        let encoder = if cfg.variant.has_attention() {
            Some(EncoderBlock::new(&mut store, "encoder", cfg.embed(), cfg.key_dim(), cfg.ff_dim(), rng)?)
        } else {
            None
        };
        let channels = cfg.trunk_channels();
        let norm = BatchNormLayer::new(&mut store, "batchnorm", channels, cfg.bn_momentum, cfg.bn_epsilon)?;
        let mut width = channels * cfg.features * cfg.cities;
        let mut hidden = Vec::with_capacity(cfg.dense.len());
        for (i, &w) in cfg.dense.iter().enumerate() {
            hidden.push(Dense::new(&mut store, &format!("dense{i}"), width, w, Some(Activation::Relu), rng)?);
            width = w;
        }
        let head = Dense::new(&mut store, "output", width, cfg.targets, None, rng)?;
        Ok(ModelGraph {
            config,
            store,
            trunk,
            encoder,
            norm,
            hidden,
            head,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Trainable parameter count (batch norm γ/β included, running
    /// statistics excluded).
    pub fn count_params(&self) -> usize {
        self.store.count_trainable()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1..] != [c.lags, c.features, c.cities] || shape[0] == 0 {
            return Err(Error::dim(format!(
                "model expects input [B, {}, {}, {}], got {:?}",
                c.lags, c.features, c.cities, shape
            )));
        }
        Ok(())
    }

    fn to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
        let s = g.shape(map).to_vec();
        let t = g.permute(map, &[0, 3, 1, 2])?;
        g.reshape(t, &[s[0], s[3], s[1] * s[2]])
    }

    fn from_tokens(g: &mut Graph, tokens: Var, channels: usize, features: usize) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let t = g.reshape(tokens, &[s[0], s[1], channels, features])?;
        g.permute(t, &[0, 2, 3, 1])
    }

    /// Builds the forward pass on `g` with parameters taken from `p`.
    /// `input` is `[B, L, F, C]`; the result is `[B, n]`. In train mode the
    /// batch-norm statistics update is returned for the caller to apply.
    pub fn forward_with(&self, g: &mut Graph, p: &Binding, input: Var, mode: Mode) -> Result<(Var, Option<StatUpdate>)> {
        let s = g.shape(input).to_vec();
        self.check_input(&s)?;
        let cfg = &self.config;
        let (b, l, f, c) = (s[0], s[1], s[2], s[3]);
        let seq = g.reshape(input, &[b, l, 1, f, c])?;
        let map = match &self.trunk {
            Trunk::Uni(layer) => layer.forward(g, p, seq)?,
            Trunk::Multi(streams) => {
                let v = cfg.lags_per_stream;
                let mut outs = Vec::with_capacity(streams.len());
                for (i, (first, second)) in streams.iter().enumerate() {
                    let part = g.narrow(seq, 1, i * v, v)?;
                    let hs = first.forward(g, p, part)?;
                    outs.push(second.forward(g, p, hs)?);
                }
                g.concat(&outs, 1)?
            }
        };
        let map = match &self.encoder {
            Some(enc) => {
                let tokens = Self::to_tokens(g, map)?;
                let encoded = enc.forward(g, p, tokens)?;
                Self::from_tokens(g, encoded, cfg.trunk_channels(), f)?
            }
            None => map,
        };
        let (normed, update) = self.norm.forward(g, p, &self.store, map, mode)?;
        let mut x = g.reshape(normed, &[b, cfg.trunk_channels() * f * c])?;
        for d in &self.hidden {
            x = d.forward(g, p, x)?;
        }
        Ok((self.head.forward(g, p, x)?, update))
    }

    /// Writes the parameters and the configuration into a container;
    /// `extra` entries are appended to the metadata.
    pub fn to_container(&self, extra: &Metadata) -> ParamContainer {
        let mut meta = Metadata::new();
        self.config.to_metadata(&mut meta);
        for (k, v) in extra.iter() {
            meta.set(k, v);
        }
        ParamContainer::new(meta, self.store.clone())
    }

    pub fn from_container(container: &ParamContainer) -> Result<Self> {
        let cfg = ModelConfig::from_metadata(&container.meta)?;
        let mut model = Self::seeded(cfg, 0)?;
        model.store.load_values(&container.store)?;
        Ok(model)
    }
}

/// Anything that maps `[B, L, F, C]` inputs to `[B, n]` predictions on a
/// differentiation tape, with frozen parameters.
pub trait Forecaster: Sync {
    /// `(L, F, C)`.
    fn input_dims(&self) -> (usize, usize, usize);

    fn output_len(&self) -> usize;

    /// Inference-mode forward pass with parameters as constants, so only
    /// `input` can carry gradients.
    fn trace(&self, g: &mut Graph, input: Var) -> Result<Var>;

    fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(inputs.clone());
        let y = self.trace(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

impl Forecaster for ModelGraph {
    fn input_dims(&self) -> (usize, usize, usize) {
        (self.config.lags, self.config.features, self.config.cities)
    }

    fn output_len(&self) -> usize {
        self.config.targets
    }

    fn trace(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let p = self.store.bind(g, false);
        Ok(self.forward_with(g, &p, input, Mode::Infer)?.0)
    }
}

/// `y = vec(x)·W + b`, with `W` of shape `[L·F·C, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearForecaster {
    pub dims: (usize, usize, usize),
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearForecaster {
    pub fn new(dims: (usize, usize, usize), weight: Tensor, bias: Tensor) -> Result<Self> {
        let k = dims.0 * dims.1 * dims.2;
        if weight.ndim() != 2 || weight.shape()[0] != k || bias.shape() != [weight.shape()[1]] {
            return Err(Error::dim(format!(
                "linear forecaster weight {:?} / bias {:?} for {k} inputs",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(LinearForecaster { dims, weight, bias })
    }
}

impl Forecaster for LinearForecaster {
    fn input_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn output_len(&self) -> usize {
        self.bias.numel()
    }

    fn trace(&self, g: &mut Graph, input: Var) -> Result<Var> {
        let b = g.shape(input)[0];
        let x = g.reshape(input, &[b, self.weight.shape()[0]])?;
        let w = g.constant(self.weight.clone());
        let bias = g.constant(self.bias.clone());
        let y = g.matmul(x, w)?;
        g.add_along(y, bias, 1)
    }
}
