//! A small pre-norm decoder-only transformer with observable gate sites.
//!
//! Each layer exposes six sites, visited in this order:
//!
//! 1. per-head attention outputs `z_h` (before the output projection),
//! 2. the attention output, gated per dimension,
//! 3. the attention output, gated as a whole block,
//! 4. MLP hidden activations after GELU,
//! 5. the MLP output, gated per dimension,
//! 6. the MLP output, gated as a whole block.
//!
//! Sites 2–3 and 5–6 see the value that is added to the residual stream.
//! A [`SiteHook`] may replace the value at every site; the plain forward uses
//! [`NoHook`].

mod nodes;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use nodes::{enumerate_nodes, node_parent, Granularity, NodeId, NodeLayout};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Default experiment shape: 4 layers, 4 heads, width 64.
    pub fn toy(vocab_size: usize) -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 64, d_mlp: 256, vocab_size, max_seq_len: 64 }
    }

    /// The GPT-2 small shape the default sparsity weights were tuned on.
    pub fn gpt2_small() -> Self {
        Self { n_layers: 12, n_heads: 12, d_model: 768, d_mlp: 3072, vocab_size: 50257, max_seq_len: 1024 }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    /// Total gateable nodes.
    pub fn node_count(&self) -> usize {
        self.n_layers * (2 + self.n_heads + self.d_model + self.d_mlp + self.d_model)
    }
}

/// Weights of one transformer layer, in storage order.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LayerParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Gain,
    Ln2Bias,
    WIn,
    BIn,
    WOut,
    BOut,
}

impl LayerParam {
    pub const ALL: [LayerParam; 16] = [
        LayerParam::Ln1Gain,
        LayerParam::Ln1Bias,
        LayerParam::Wq,
        LayerParam::Bq,
        LayerParam::Wk,
        LayerParam::Bk,
        LayerParam::Wv,
        LayerParam::Bv,
        LayerParam::Wo,
        LayerParam::Bo,
        LayerParam::Ln2Gain,
        LayerParam::Ln2Bias,
        LayerParam::WIn,
        LayerParam::BIn,
        LayerParam::WOut,
        LayerParam::BOut,
    ];

    fn name(self) -> &'static str {
        match self {
            LayerParam::Ln1Gain => "ln1/gain",
            LayerParam::Ln1Bias => "ln1/bias",
            LayerParam::Wq => "attn/w_q",
            LayerParam::Bq => "attn/b_q",
            LayerParam::Wk => "attn/w_k",
            LayerParam::Bk => "attn/b_k",
            LayerParam::Wv => "attn/w_v",
            LayerParam::Bv => "attn/b_v",
            LayerParam::Wo => "attn/w_o",
            LayerParam::Bo => "attn/b_o",
            LayerParam::Ln2Gain => "ln2/gain",
            LayerParam::Ln2Bias => "ln2/bias",
            LayerParam::WIn => "mlp/w_in",
            LayerParam::BIn => "mlp/b_in",
            LayerParam::WOut => "mlp/w_out",
            LayerParam::BOut => "mlp/b_out",
        }
    }

    fn shape(self, c: &ModelConfig) -> Vec<usize> {
        let d = c.d_model;
        match self {
            LayerParam::Wq | LayerParam::Wk | LayerParam::Wv | LayerParam::Wo => vec![d, d],
            LayerParam::WIn => vec![d, c.d_mlp],
            LayerParam::BIn => vec![c.d_mlp],
            LayerParam::WOut => vec![c.d_mlp, d],
            _ => vec![d],
        }
    }
}

/// Non-layer weights, stored after all layers except the two embeddings.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum GlobalParam {
    TokenEmbed,
    PosEmbed,
    FinalLnGain,
    FinalLnBias,
    Unembed,
    UnembedBias,
}

/// Frozen or trainable weights of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    weights: Vec<Arc<Tensor<T>>>,
}

fn weight_index(c: &ModelConfig, p: GlobalParam) -> usize {
    let tail = 2 + LayerParam::ALL.len() * c.n_layers;
    match p {
        GlobalParam::TokenEmbed => 0,
        GlobalParam::PosEmbed => 1,
        GlobalParam::FinalLnGain => tail,
        GlobalParam::FinalLnBias => tail + 1,
        GlobalParam::Unembed => tail + 2,
        GlobalParam::UnembedBias => tail + 3,
    }
}

fn layer_weight_index(layer: usize, p: LayerParam) -> usize {
    2 + layer * LayerParam::ALL.len() + LayerParam::ALL.iter().position(|&x| x == p).unwrap()
}

/// Names and shapes of every weight, in storage order.
pub fn weight_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = vec![
        ("embed/token".to_string(), vec![c.vocab_size, c.d_model]),
        ("embed/pos".to_string(), vec![c.max_seq_len, c.d_model]),
    ];
    for l in 0..c.n_layers {
        for p in LayerParam::ALL {
            specs.push((format!("layer/{l}/{}", p.name()), p.shape(c)));
        }
    }
    specs.push(("final_ln/gain".into(), vec![c.d_model]));
    specs.push(("final_ln/bias".into(), vec![c.d_model]));
    specs.push(("unembed/weight".into(), vec![c.d_model, c.vocab_size]));
    specs.push(("unembed/bias".into(), vec![c.vocab_size]));
    specs
}

impl Model<f32> {
    /// Gaussian initialization: fan-in scaling for projections, residual
    /// writers additionally scaled by `1/sqrt(2L)`, unit gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let mut weights = Vec::new();
        for (name, shape) in weight_specs(&config) {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('/').next().unwrap();
            let std = if name.starts_with("embed/") {
                Some(0.1)
            } else if leaf.starts_with("w_") || leaf == "weight" {
                let base = 1.0 / (shape[0] as f32).sqrt();
                Some(if leaf == "w_o" || leaf == "w_out" { base * residual_scale } else { base })
            } else {
                None
            };
            let data = match std {
                Some(std) => {
                    let normal = Normal::new(0.0, std).unwrap();
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                None if leaf == "gain" => vec![1.0; n],
                None => vec![0.0; n],
            };
            weights.push(Arc::new(Tensor::new(shape, data)?));
        }
        Ok(Self { config, weights })
    }

    /// All-zero weights (gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = weight_specs(&config).into_iter().map(|(_, s)| Arc::new(Tensor::zeros(s))).collect();
        Ok(Self { config, weights })
    }
}

impl<T: Real> Model<T> {
    /// Assembles a model from weights in [`weight_specs`] order.
    pub fn from_weights(config: ModelConfig, weights: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = weight_specs(&config);
        if specs.len() != weights.len() {
            return Err(Error::InvalidConfig(format!("expected {} weight arrays, got {}", specs.len(), weights.len())));
        }
        for ((name, shape), w) in specs.iter().zip(&weights) {
            if w.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!("weight {name} has shape {:?}, expected {shape:?}", w.shape())));
            }
        }
        Ok(Self { config, weights: weights.into_iter().map(Arc::new).collect() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Arc<Tensor<T>>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Arc<Tensor<T>>] {
        &mut self.weights
    }

    pub fn named_weights(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        weight_specs(&self.config).into_iter().map(|(n, _)| n).zip(self.weights.iter().map(|w| &**w))
    }

    pub fn layer_weight(&self, layer: usize, p: LayerParam) -> &Arc<Tensor<T>> {
        &self.weights[layer_weight_index(layer, p)]
    }

    pub fn layer_weight_mut(&mut self, layer: usize, p: LayerParam) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.weights[layer_weight_index(layer, p)])
    }

    pub fn global_weight(&self, p: GlobalParam) -> &Arc<Tensor<T>> {
        &self.weights[weight_index(&self.config, p)]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config, weights: self.weights.iter().map(|w| Arc::new(w.cast())).collect() }
    }

    /// Every weight as a frozen constant.
    pub fn frozen_vars(&self) -> WeightVars<T> {
        WeightVars { config: self.config, vars: self.weights.iter().cloned().map(Var::Const).collect() }
    }

    /// Every weight as a trainable leaf; `ParamId(i)` is the `i`-th weight.
    pub fn trainable_vars(&self, tape: &mut Tape<T>) -> WeightVars<T> {
        let vars = self.weights.iter().enumerate().map(|(i, w)| tape.param(ParamId(i), (**w).clone())).collect();
        WeightVars { config: self.config, vars }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size: self.config.vocab_size });
        }
        if tokens.is_empty() {
            return Err(Error::InvalidConfig("empty token sequence".into()));
        }
        Ok(())
    }
}

/// Weights bound to a tape, either frozen or trainable.
pub struct WeightVars<T: Real> {
    config: ModelConfig,
    vars: Vec<Var<T>>,
}

impl<T: Real> WeightVars<T> {
    fn layer(&self, layer: usize, p: LayerParam) -> &Var<T> {
        &self.vars[layer_weight_index(layer, p)]
    }

    fn global(&self, p: GlobalParam) -> &Var<T> {
        &self.vars[weight_index(&self.config, p)]
    }
}

/// Value-replacement hook invoked at every gate site.
pub trait SiteHook<T: Real> {
    /// Per-head outputs `z_h`, each `[seq, d_head]`.
    fn heads(&mut self, _tape: &mut Tape<T>, _layer: usize, heads: Vec<Var<T>>) -> Result<Vec<Var<T>>> {
        Ok(heads)
    }

    /// Any of the non-head sites. `site` is never [`Granularity::Head`].
    fn site(&mut self, _tape: &mut Tape<T>, _layer: usize, _site: Granularity, value: Var<T>) -> Result<Var<T>> {
        Ok(value)
    }
}

pub struct NoHook;

impl<T: Real> SiteHook<T> for NoHook {}

/// Which positions get unembedded.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Readout {
    All,
    Position(usize),
}

/// Runs the transformer on `tokens` and returns logits `[rows, vocab]`.
pub fn run<T: Real>(
    tape: &mut Tape<T>,
    weights: &WeightVars<T>,
    tokens: &[usize],
    hook: &mut dyn SiteHook<T>,
    readout: Readout,
) -> Result<Var<T>> {
    let c = weights.config;
    let seq = tokens.len();
    let eps = T::lit(LAYER_NORM_EPS);
    let d_head = c.d_head();
    let score_scale = T::one() / T::from_usize(d_head).unwrap().sqrt();

    let tok = tape.gather(weights.global(GlobalParam::TokenEmbed), tokens)?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.gather(weights.global(GlobalParam::PosEmbed), &positions)?;
    let mut resid = tape.add(&tok, &pos)?;

    for l in 0..c.n_layers {
        let w = |p| weights.layer(l, p);
        let x = tape.layer_norm(&resid, w(LayerParam::Ln1Gain), w(LayerParam::Ln1Bias), eps)?;
        let project = |tape: &mut Tape<T>, wm, bias| -> Result<Var<T>> {
            let y = tape.matmul(&x, w(wm))?;
            Ok(tape.add(&y, w(bias))?)
        };
        let q = project(tape, LayerParam::Wq, LayerParam::Bq)?;
        let k = project(tape, LayerParam::Wk, LayerParam::Bk)?;
        let v = project(tape, LayerParam::Wv, LayerParam::Bv)?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let qh = tape.slice_cols(&q, h * d_head, d_head)?;
            let kh = tape.slice_cols(&k, h * d_head, d_head)?;
            let vh = tape.slice_cols(&v, h * d_head, d_head)?;
            let kt = tape.transpose(&kh)?;
            let scores = tape.matmul(&qh, &kt)?;
            let scores = tape.scale(&scores, score_scale)?;
            let pattern = tape.softmax(&scores, true)?;
            heads.push(tape.matmul(&pattern, &vh)?);
        }
        let heads = hook.heads(tape, l, heads)?;
        let z = tape.concat_cols(&heads)?;
        let attn = tape.matmul(&z, w(LayerParam::Wo))?;
        let attn = tape.add(&attn, w(LayerParam::Bo))?;
        let attn = hook.site(tape, l, Granularity::AttnNeuron, attn)?;
        let attn = hook.site(tape, l, Granularity::AttnBlock, attn)?;
        resid = tape.add(&resid, &attn)?;

        let x = tape.layer_norm(&resid, w(LayerParam::Ln2Gain), w(LayerParam::Ln2Bias), eps)?;
        let pre = tape.matmul(&x, w(LayerParam::WIn))?;
        let pre = tape.add(&pre, w(LayerParam::BIn))?;
        let hidden = tape.gelu(&pre)?;
        let hidden = hook.site(tape, l, Granularity::MlpHidden, hidden)?;
        let out = tape.matmul(&hidden, w(LayerParam::WOut))?;
        let out = tape.add(&out, w(LayerParam::BOut))?;
        let out = hook.site(tape, l, Granularity::MlpOutput, out)?;
        let out = hook.site(tape, l, Granularity::MlpBlock, out)?;
        resid = tape.add(&resid, &out)?;
    }

    let rows = match readout {
        Readout::All => resid,
        Readout::Position(p) => tape.slice_rows(&resid, p, 1)?,
    };
    let x = tape.layer_norm(&rows, weights.global(GlobalParam::FinalLnGain), weights.global(GlobalParam::FinalLnBias), eps)?;
    let logits = tape.matmul(&x, weights.global(GlobalParam::Unembed))?;
    Ok(tape.add(&logits, weights.global(GlobalParam::UnembedBias))?)
}

/// Activations observed at the gate sites of one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerSites<T: Real = f32> {
    /// `z_h` per head, `[seq, d_head]`.
    pub heads: Vec<Tensor<T>>,
    /// Attention output at the per-dimension site, `[seq, d_model]`.
    pub attn_out: Tensor<T>,
    /// Attention output at the block site.
    pub attn_block: Tensor<T>,
    /// GELU output, `[seq, d_mlp]`.
    pub mlp_hidden: Tensor<T>,
    pub mlp_out: Tensor<T>,
    pub mlp_block: Tensor<T>,
}

/// Records the value arriving at every site, leaving it unchanged.
#[derive(Default)]
pub struct RecordingHook<T: Real = f32> {
    pub layers: Vec<LayerSites<T>>,
}

impl<T: Real> RecordingHook<T> {
    fn layer_mut(&mut self, layer: usize) -> &mut LayerSites<T> {
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, LayerSites::default);
        }
        &mut self.layers[layer]
    }
}

impl<T: Real> SiteHook<T> for RecordingHook<T> {
    fn heads(&mut self, tape: &mut Tape<T>, layer: usize, heads: Vec<Var<T>>) -> Result<Vec<Var<T>>> {
        self.layer_mut(layer).heads = heads.iter().map(|h| tape.value(h).clone()).collect();
        Ok(heads)
    }

    fn site(&mut self, tape: &mut Tape<T>, layer: usize, site: Granularity, value: Var<T>) -> Result<Var<T>> {
        let v = tape.value(&value).clone();
        let slot = self.layer_mut(layer);
        match site {
            Granularity::AttnNeuron => slot.attn_out = v,
            Granularity::AttnBlock => slot.attn_block = v,
            Granularity::MlpHidden => slot.mlp_hidden = v,
            Granularity::MlpOutput => slot.mlp_out = v,
            Granularity::MlpBlock => slot.mlp_block = v,
            Granularity::Head => unreachable!("heads use SiteHook::heads"),
        }
        Ok(value)
    }
}

/// Per-layer activation record of a plain forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord<T: Real = f32> {
    pub layers: Vec<LayerSites<T>>,
    /// Each head's contribution `z_h · W_O[h]` to the attention output,
    /// before the output bias, `[seq, d_model]` per head.
    pub head_contributions: Vec<Vec<Tensor<T>>>,
    /// `[seq, vocab]`
    pub logits: Tensor<T>,
}

/// Plain forward pass recording every gate site.
pub fn forward_layers<T: Real>(model: &Model<T>, tokens: &[usize]) -> Result<ForwardRecord<T>> {
    model.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let mut hook = RecordingHook::default();
    let logits = run(&mut tape, &model.frozen_vars(), tokens, &mut hook, Readout::All)?;
    let logits = tape.value(&logits).clone();
    let d_head = model.config.d_head();
    let mut head_contributions = Vec::with_capacity(model.config.n_layers);
    for (l, sites) in hook.layers.iter().enumerate() {
        let wo: Var<T> = model.layer_weight(l, LayerParam::Wo).clone().into();
        let wo_t = tape.transpose(&wo)?;
        let mut per_head = Vec::with_capacity(sites.heads.len());
        for (h, z) in sites.heads.iter().enumerate() {
            // rows h*d_head.. of W_O, via columns of its transpose
            let rows = tape.slice_cols(&wo_t, h * d_head, d_head)?;
            let rows = tape.transpose(&rows)?;
            let contrib = tape.matmul(&Var::from(z.clone()), &rows)?;
            per_head.push(tape.value(&contrib).clone());
        }
        head_contributions.push(per_head);
    }
    Ok(ForwardRecord { layers: hook.layers, head_contributions, logits })
}

/// Logits `[seq, vocab]` of the plain forward pass.
pub fn logits<T: Real>(model: &Model<T>, tokens: &[usize]) -> Result<Tensor<T>> {
    model.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let out = run(&mut tape, &model.frozen_vars(), tokens, &mut NoHook, Readout::All)?;
    Ok(tape.value(&out).clone())
}
