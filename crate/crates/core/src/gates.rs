//! Hard Concrete gates.
//!
//! A gate with parameter `log_alpha` and uniform noise `u` takes the value
//!
//! ```text
//! s = sigmoid((ln u - ln(1 - u) + log_alpha) / beta)
//! m = clamp(s * (zeta - gamma) + gamma, 0, 1)
//! ```
//!
//! so it is exactly 0 or exactly 1 with positive probability. The expected
//! L0 cost is `P(m > 0) = sigmoid(log_alpha - beta * ln(-gamma / zeta))`,
//! and a trained gate is kept iff `log_alpha` exceeds that same threshold.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{kernels::sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Granularity, ModelConfig, NodeId, NodeLayout};
use crate::tensor::{Real, Tensor};

/// Lower/upper bound applied to noise draws.
pub const NOISE_EPS: f64 = 1e-6;

/// Initial `log_alpha` of every gate: close to fully on.
pub const DEFAULT_LOG_ALPHA: f32 = 2.0;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConstants {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for GateConstants {
    fn default() -> Self {
        Self { beta: 2.0 / 3.0, gamma: -0.1, zeta: 1.1 }
    }
}

impl GateConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0 && self.gamma < 0.0 && self.zeta > 1.0;
        if !ok || !self.beta.is_finite() || !self.gamma.is_finite() || !self.zeta.is_finite() {
            return Err(Error::InvalidConfig(format!("gate constants need beta > 0, gamma < 0, zeta > 1; got {self:?}")));
        }
        Ok(())
    }

    /// `beta * ln(-gamma / zeta)`: the binarization threshold on `log_alpha`.
    pub fn threshold(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }
}

fn stretch(s: f64, c: &GateConstants) -> f64 {
    (s * (c.zeta - c.gamma) + c.gamma).clamp(0.0, 1.0)
}

/// One Hard Concrete draw for noise `u ∈ (0, 1)`.
pub fn sample_gate(log_alpha: f64, c: &GateConstants, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidNoise(u));
    }
    let s = sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / c.beta);
    Ok(stretch(s, c))
}

/// Deterministic gate value: the `u = 0.5` draw.
pub fn eval_gate(log_alpha: f64, c: &GateConstants) -> f64 {
    stretch(sigmoid(log_alpha / c.beta), c)
}

/// Probability that a sampled gate is nonzero.
pub fn expected_l0(log_alpha: f64, c: &GateConstants) -> f64 {
    sigmoid(log_alpha - c.threshold())
}

/// Final keep/drop decision for a trained gate.
pub fn binarize(log_alpha: f64, c: &GateConstants) -> bool {
    log_alpha > c.threshold()
}

/// Clears every node whose parent is cleared. Parents must precede their
/// children in index order, which holds for [`crate::model::enumerate_nodes`].
pub fn enforce_hierarchy(bits: &[bool], parent: impl Fn(usize) -> Option<usize>) -> Vec<bool> {
    let mut out = bits.to_vec();
    for i in 0..out.len() {
        if let Some(p) = parent(i) {
            debug_assert!(p < i, "parent {p} must precede child {i}");
            if !out[p] {
                out[i] = false;
            }
        }
    }
    out
}

/// Per-family sparsity weights.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub attn_block: f64,
    pub mlp_block: f64,
    pub head: f64,
    pub attn_neuron: f64,
    pub mlp_hidden: f64,
    pub mlp_output: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { head: 3.0, mlp_hidden: 5.0, mlp_output: 1.5, attn_neuron: 1.5, attn_block: 0.2, mlp_block: 0.1 }
    }
}

impl Lambdas {
    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    pub fn uniform(v: f64) -> Self {
        Self { attn_block: v, mlp_block: v, head: v, attn_neuron: v, mlp_hidden: v, mlp_output: v }
    }

    pub fn get(&self, g: Granularity) -> f64 {
        match g {
            Granularity::AttnBlock => self.attn_block,
            Granularity::MlpBlock => self.mlp_block,
            Granularity::Head => self.head,
            Granularity::AttnNeuron => self.attn_neuron,
            Granularity::MlpHidden => self.mlp_hidden,
            Granularity::MlpOutput => self.mlp_output,
        }
    }

    pub fn sum(&self) -> f64 {
        Granularity::ALL.iter().map(|&g| self.get(g)).sum()
    }

    /// Rescales each weight by `family size here / family size in
    /// `reference`. Because the penalty is a per-family mean, this keeps the
    /// pressure on a single gate equal across model sizes.
    pub fn size_scaled(&self, config: &ModelConfig, reference: &ModelConfig) -> Self {
        let mut out = *self;
        for g in Granularity::ALL {
            let ratio = (g.per_layer(config) * config.n_layers) as f64 / (g.per_layer(reference) * reference.n_layers) as f64;
            *out.get_mut(g) *= ratio;
        }
        out
    }

    pub fn get_mut(&mut self, g: Granularity) -> &mut f64 {
        match g {
            Granularity::AttnBlock => &mut self.attn_block,
            Granularity::MlpBlock => &mut self.mlp_block,
            Granularity::Head => &mut self.head,
            Granularity::AttnNeuron => &mut self.attn_neuron,
            Granularity::MlpHidden => &mut self.mlp_hidden,
            Granularity::MlpOutput => &mut self.mlp_output,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match Granularity::ALL.iter().find(|&&g| !(self.get(g) >= 0.0 && self.get(g).is_finite())) {
            Some(g) => Err(Error::InvalidConfig(format!("lambda for {g} must be finite and >= 0"))),
            None => Ok(()),
        }
    }
}

/// Trainable `log_alpha` for every node, in [`crate::model::enumerate_nodes`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    layout: NodeLayout,
    pub log_alpha: Vec<f32>,
    pub constants: GateConstants,
}

impl MaskSet {
    pub fn new(config: &ModelConfig, constants: GateConstants) -> Self {
        Self::filled(config, constants, DEFAULT_LOG_ALPHA)
    }

    pub fn filled(config: &ModelConfig, constants: GateConstants, value: f32) -> Self {
        let layout = NodeLayout::new(config);
        Self { log_alpha: vec![value; layout.len()], layout, constants }
    }

    pub fn from_values(config: &ModelConfig, constants: GateConstants, log_alpha: Vec<f32>) -> Result<Self> {
        let layout = NodeLayout::new(config);
        if log_alpha.len() != layout.len() {
            return Err(Error::InvalidConfig(format!("mask set needs {} values, got {}", layout.len(), log_alpha.len())));
        }
        if log_alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite log_alpha".into()));
        }
        Ok(Self { layout, log_alpha, constants })
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }

    pub fn config(&self) -> &ModelConfig {
        self.layout.config()
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn get(&self, node: &NodeId) -> Option<f32> {
        self.layout.index_of(node).map(|i| self.log_alpha[i])
    }

    pub fn set(&mut self, node: &NodeId, value: f32) {
        let i = self.layout.index_of(node).expect("node belongs to this mask set");
        self.log_alpha[i] = value;
    }

    pub fn family(&self, layer: usize, g: Granularity) -> &[f32] {
        &self.log_alpha[self.layout.range(layer, g)]
    }

    pub fn family_mut(&mut self, layer: usize, g: Granularity) -> &mut [f32] {
        let r = self.layout.range(layer, g);
        &mut self.log_alpha[r]
    }
}

/// Normalized expected-L0 penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0Penalty {
    /// Mean expected L0 of each family, in `Granularity::ALL` order.
    pub per_family: [f64; 6],
    /// `Σ_g λ_g · per_family[g]`
    pub total: f64,
}

/// Mean expected L0 within each family, weighted by its lambda.
pub fn normalized_l0(masks: &MaskSet, lambdas: &Lambdas) -> L0Penalty {
    let c = &masks.constants;
    let layout = masks.layout();
    let mut per_family = [0.0; 6];
    for (slot, g) in per_family.iter_mut().zip(Granularity::ALL) {
        let sum: f64 =
            (0..layout.config().n_layers).flat_map(|l| masks.family(l, g).iter()).map(|&a| expected_l0(a as f64, c)).sum();
        *slot = sum / layout.family_total(g) as f64;
    }
    let total = Granularity::ALL.iter().zip(&per_family).map(|(&g, p)| lambdas.get(g) * p).sum();
    L0Penalty { per_family, total }
}

/// Counter-based noise: the draw for `(seed, step, index)` is word
/// `2 * index` of ChaCha stream `step` under key `seed`, so any draw can be
/// reproduced without replaying earlier ones.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    seed: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn to_unit(bits: u64) -> f64 {
        let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        u.clamp(NOISE_EPS, 1.0 - NOISE_EPS)
    }

    fn rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        rng
    }

    pub fn at(&self, step: u64, index: usize) -> f64 {
        let mut rng = self.rng(step);
        rng.set_word_pos(2 * index as u128);
        Self::to_unit(rng.next_u64())
    }

    /// Draws for indices `0..n` of `step`.
    pub fn step(&self, step: u64, n: usize) -> Vec<f64> {
        let mut rng = self.rng(step);
        (0..n).map(|_| Self::to_unit(rng.next_u64())).collect()
    }
}

/// Logistic noise `ln u - ln(1 - u)` for each draw.
pub fn logistic(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect()
}

/// Gate values on a tape. With `logistic_noise = None` this is
/// [`eval_gate`], otherwise [`sample_gate`] with the given `ln u - ln(1-u)`.
pub fn gate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    log_alpha: &Var<T>,
    logistic_noise: Option<&[T]>,
    c: &GateConstants,
) -> Result<Var<T>> {
    let pre = match logistic_noise {
        Some(noise) => {
            let noise = tape.constant(Tensor::vector(noise.to_vec()));
            tape.add(log_alpha, &noise)?
        }
        None => log_alpha.clone(),
    };
    let scaled = tape.scale(&pre, T::lit(1.0 / c.beta))?;
    let s = tape.sigmoid(&scaled)?;
    let stretched = tape.affine(&s, T::lit(c.zeta - c.gamma), T::lit(c.gamma))?;
    Ok(tape.clamp(&stretched, T::zero(), T::one())?)
}

/// Expected L0 of each gate on a tape.
pub fn expected_l0_on_tape<T: Real>(tape: &mut Tape<T>, log_alpha: &Var<T>, c: &GateConstants) -> Result<Var<T>> {
    let shifted = tape.affine(log_alpha, T::one(), T::lit(-c.threshold()))?;
    Ok(tape.sigmoid(&shifted)?)
}
