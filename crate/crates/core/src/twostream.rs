//! Clean/corrupted two-stream forward.
//!
//! The corrupted stream is a plain forward on the corrupted tokens. The clean
//! stream replaces the value at every gate site with
//! `m · h_clean + (1 − m) · h_corrupt`, finest family first, so a coarser gate
//! mixes the already-mixed child output against the corrupted value at its
//! own site. The base stream is a plain forward on the clean tokens.

use crate::engine::{Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::gates::{binarize, eval_gate, logistic, sample_gate, MaskSet, NoiseStream};
use crate::model::{forward_layers, run, Granularity, LayerSites, Model, NodeLayout, Readout, SiteHook};
use crate::tensor::{Real, Tensor};

/// How gate values are derived from `log_alpha`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum GateMode {
    /// Hard Concrete draw with the noise of `step`.
    Sampled { noise: NoiseStream, step: u64 },
    /// The `u = 0.5` point.
    Deterministic,
    /// 0/1 by the binarization threshold.
    Binary,
}

/// Gate value of every node under `mode`, in node order.
pub fn gate_values(masks: &MaskSet, mode: GateMode) -> Vec<f64> {
    let c = &masks.constants;
    match mode {
        GateMode::Sampled { noise, step } => {
            let u = noise.step(step, masks.len());
            masks
                .log_alpha
                .iter()
                .zip(u)
                .map(|(&a, u)| sample_gate(a as f64, c, u).expect("noise is clamped into (0, 1)"))
                .collect()
        }
        GateMode::Deterministic => masks.log_alpha.iter().map(|&a| eval_gate(a as f64, c)).collect(),
        GateMode::Binary => masks.log_alpha.iter().map(|&a| binarize(a as f64, c) as u8 as f64).collect(),
    }
}

/// Logistic noise `ln u − ln(1 − u)` of a sampled step, in node order.
pub fn step_noise(noise: NoiseStream, step: u64, n: usize) -> Vec<f64> {
    logistic(&noise.step(step, n))
}

/// `m · h_clean + (1 − m) · h_corrupt`. `m` is either one value or one value
/// per column.
pub fn interpolate_on_tape<T: Real>(tape: &mut Tape<T>, h_clean: &Var<T>, h_corrupt: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    let (a, b) = (tape.value(h_clean).shape(), tape.value(h_corrupt).shape());
    if a != b {
        return Err(crate::engine::EngineError::ShapeMismatch {
            op: "interpolate",
            detail: format!("clean {a:?} vs corrupt {b:?}"),
        }
        .into());
    }
    let keep = tape.mul(h_clean, m)?;
    let inv = tape.affine(m, -T::one(), T::one())?;
    let swap = tape.mul(h_corrupt, &inv)?;
    Ok(tape.add(&keep, &swap)?)
}

/// Eager form of [`interpolate_on_tape`].
pub fn interpolate<T: Real>(h_clean: &Tensor<T>, h_corrupt: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let out = interpolate_on_tape(&mut tape, &h_clean.clone().into(), &h_corrupt.clone().into(), &m.clone().into())?;
    Ok(tape.value(&out).clone())
}

/// Identifies the gate-value leaf of one (layer, family) slot.
pub fn gate_param_id(layer: usize, g: Granularity) -> ParamId {
    ParamId(layer * Granularity::ALL.len() + Granularity::ALL.iter().position(|&x| x == g).unwrap())
}

/// Gate values bound to a tape, one vector per (layer, family).
pub struct SiteGates<T: Real> {
    layers: Vec<Vec<Var<T>>>,
}

impl<T: Real> SiteGates<T> {
    fn build(layout: &NodeLayout, values: &[T], mut bind: impl FnMut(usize, Granularity, Tensor<T>) -> Var<T>) -> Self {
        assert_eq!(values.len(), layout.len(), "one gate value per node");
        let layers = (0..layout.config().n_layers)
            .map(|l| {
                Granularity::ALL
                    .iter()
                    .map(|&g| {
                        let v = values[layout.range(l, g)].to_vec();
                        // heads are sliced per column, which needs a matrix
                        let t = match g {
                            Granularity::Head => Tensor::matrix(1, v.len(), v).expect("1 x n"),
                            _ => Tensor::vector(v),
                        };
                        bind(l, g, t)
                    })
                    .collect()
            })
            .collect();
        Self { layers }
    }

    /// Fixed gate values.
    pub fn constant(layout: &NodeLayout, values: &[T]) -> Self {
        Self::build(layout, values, |_, _, t| t.into())
    }

    /// Gate values as tape leaves under [`gate_param_id`].
    pub fn tracked(tape: &mut Tape<T>, layout: &NodeLayout, values: &[T]) -> Self {
        Self::build(layout, values, |l, g, t| tape.param(gate_param_id(l, g), t))
    }

    pub fn get(&self, layer: usize, g: Granularity) -> &Var<T> {
        &self.layers[layer][Granularity::ALL.iter().position(|&x| x == g).unwrap()]
    }
}

/// Gradients of [`SiteGates::tracked`] leaves as one vector in node order.
pub fn flatten_gate_grads<T: Real>(layout: &NodeLayout, grads: &Gradients<T>) -> Vec<T> {
    let mut out = vec![T::zero(); layout.len()];
    for l in 0..layout.config().n_layers {
        for g in Granularity::ALL {
            if let Some(t) = grads.get(gate_param_id(l, g)) {
                out[layout.range(l, g)].copy_from_slice(t.data());
            }
        }
    }
    out
}

/// Mask-independent streams of one example.
#[derive(Clone, Debug)]
pub struct Reference<T: Real = f32> {
    pub corrupt_sites: Vec<LayerSites<T>>,
    /// `[seq, vocab]`
    pub corrupt_logits: Tensor<T>,
    pub base_sites: Vec<LayerSites<T>>,
    /// `[seq, vocab]`
    pub base_logits: Tensor<T>,
}

/// Runs the corrupted and base streams.
pub fn prepare<T: Real>(model: &Model<T>, clean: &[usize], corrupt: &[usize]) -> Result<Reference<T>> {
    if clean.len() != corrupt.len() {
        return Err(Error::LengthMismatch { clean: clean.len(), corrupt: corrupt.len() });
    }
    let c = forward_layers(model, corrupt)?;
    let b = forward_layers(model, clean)?;
    Ok(Reference { corrupt_sites: c.layers, corrupt_logits: c.logits, base_sites: b.layers, base_logits: b.logits })
}

struct InterpolationHook<'a, T: Real> {
    corrupt: &'a [LayerSites<T>],
    gates: &'a SiteGates<T>,
    record: Option<Vec<LayerSites<T>>>,
}

impl<T: Real> InterpolationHook<'_, T> {
    fn slot(&mut self, layer: usize) -> Option<&mut LayerSites<T>> {
        let rec = self.record.as_mut()?;
        if rec.len() <= layer {
            rec.resize_with(layer + 1, LayerSites::default);
        }
        Some(&mut rec[layer])
    }
}

impl<T: Real> SiteHook<T> for InterpolationHook<'_, T> {
    fn heads(&mut self, tape: &mut Tape<T>, layer: usize, heads: Vec<Var<T>>) -> Result<Vec<Var<T>>> {
        let m = self.gates.get(layer, Granularity::Head).clone();
        let mut out = Vec::with_capacity(heads.len());
        for (h, z) in heads.iter().enumerate() {
            let corrupt = Var::from(self.corrupt[layer].heads[h].clone());
            let mh = tape.slice_cols(&m, h, 1)?;
            out.push(interpolate_on_tape(tape, z, &corrupt, &mh)?);
        }
        if let Some(slot) = self.slot(layer) {
            slot.heads = out.iter().map(|v| tape.value(v).clone()).collect();
        }
        Ok(out)
    }

    fn site(&mut self, tape: &mut Tape<T>, layer: usize, site: Granularity, value: Var<T>) -> Result<Var<T>> {
        let sites = &self.corrupt[layer];
        let corrupt = match site {
            Granularity::AttnNeuron => &sites.attn_out,
            Granularity::AttnBlock => &sites.attn_block,
            Granularity::MlpHidden => &sites.mlp_hidden,
            Granularity::MlpOutput => &sites.mlp_out,
            Granularity::MlpBlock => &sites.mlp_block,
            Granularity::Head => unreachable!("heads use SiteHook::heads"),
        };
        let corrupt = Var::from(corrupt.clone());
        let out = interpolate_on_tape(tape, &value, &corrupt, self.gates.get(layer, site))?;
        if let Some(slot) = self.slot(layer) {
            let v = tape.value(&out).clone();
            match site {
                Granularity::AttnNeuron => slot.attn_out = v,
                Granularity::AttnBlock => slot.attn_block = v,
                Granularity::MlpHidden => slot.mlp_hidden = v,
                Granularity::MlpOutput => slot.mlp_out = v,
                Granularity::MlpBlock => slot.mlp_block = v,
                Granularity::Head => unreachable!(),
            }
        }
        Ok(out)
    }
}

/// The clean stream on `tape`, interpolating against `corrupt_sites`.
/// Returns logits for the rows selected by `readout`.
pub fn clean_stream<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    corrupt_sites: &[LayerSites<T>],
    clean: &[usize],
    gates: &SiteGates<T>,
    readout: Readout,
) -> Result<Var<T>> {
    model.check_tokens(clean)?;
    let mut hook = InterpolationHook { corrupt: corrupt_sites, gates, record: None };
    run(tape, &model.frozen_vars(), clean, &mut hook, readout)
}

/// Activations and logits of all three streams for one example.
#[derive(Clone, Debug)]
pub struct StreamState<T: Real = f32> {
    pub clean: Vec<LayerSites<T>>,
    pub corrupt: Vec<LayerSites<T>>,
    pub base: Vec<LayerSites<T>>,
    /// `[seq, vocab]` for each stream.
    pub clean_logits: Tensor<T>,
    pub corrupt_logits: Tensor<T>,
    pub base_logits: Tensor<T>,
}

/// All three streams with explicit per-node gate values.
pub fn run_with_gates<T: Real>(model: &Model<T>, gates: &[T], clean: &[usize], corrupt: &[usize]) -> Result<StreamState<T>> {
    let reference = prepare(model, clean, corrupt)?;
    let layout = NodeLayout::new(model.config());
    if gates.len() != layout.len() {
        return Err(Error::InvalidConfig(format!("expected {} gate values, got {}", layout.len(), gates.len())));
    }
    let site_gates = SiteGates::constant(&layout, gates);
    let mut tape = Tape::new();
    let mut hook = InterpolationHook { corrupt: &reference.corrupt_sites, gates: &site_gates, record: Some(Vec::new()) };
    let out = run(&mut tape, &model.frozen_vars(), clean, &mut hook, Readout::All)?;
    Ok(StreamState {
        clean: hook.record.take().unwrap_or_default(),
        clean_logits: tape.value(&out).clone(),
        corrupt: reference.corrupt_sites,
        corrupt_logits: reference.corrupt_logits,
        base: reference.base_sites,
        base_logits: reference.base_logits,
    })
}

/// All three streams with gate values derived from `masks` under `mode`.
pub fn run_two_stream<T: Real>(
    model: &Model<T>,
    masks: &MaskSet,
    clean: &[usize],
    corrupt: &[usize],
    mode: GateMode,
) -> Result<StreamState<T>> {
    if masks.config() != model.config() {
        return Err(Error::InvalidConfig("mask set was built for a different model config".into()));
    }
    let gates: Vec<T> = gate_values(masks, mode).into_iter().map(T::lit).collect();
    run_with_gates(model, &gates, clean, corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateConstants;
    use crate::model::LayerParam;
    use crate::model::{logits, ModelConfig, NodeId};

    fn config() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_mlp: 12, vocab_size: 13, max_seq_len: 8 }
    }

    const CLEAN: [usize; 5] = [1, 4, 7, 2, 9];
    const CORRUPT: [usize; 5] = [3, 4, 11, 2, 9];

    fn ones(model: &Model) -> Vec<f32> {
        vec![1.0; model.config().node_count()]
    }

    #[test]
    fn interpolate_examples() {
        let c = Tensor::vector(vec![2.0f32, -3.0]);
        let k = Tensor::vector(vec![0.0f32, 5.0]);
        assert_eq!(interpolate(&c, &k, &Tensor::scalar(1.0)).unwrap(), c);
        assert_eq!(interpolate(&c, &k, &Tensor::scalar(0.0)).unwrap(), k);
        assert_eq!(interpolate(&c, &k, &Tensor::scalar(0.5)).unwrap().data(), &[1.0, 1.0]);
        let per_dim = interpolate(&c, &k, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(per_dim.data(), &[2.0, 5.0]);
        assert!(interpolate(&c, &Tensor::vector(vec![0.0f32; 3]), &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn all_ones_reproduces_base_exactly() {
        let model = Model::init(config(), 5).unwrap();
        let s = run_with_gates(&model, &ones(&model), &CLEAN, &CORRUPT).unwrap();
        assert_eq!(s.clean_logits, s.base_logits);
        assert_eq!(s.base_logits, logits(&model, &CLEAN).unwrap());
        assert_eq!(s.corrupt_logits, logits(&model, &CORRUPT).unwrap());
        assert_eq!(s.clean, s.base);
    }

    #[test]
    fn all_zeros_reproduce_corrupt_at_shared_last_token() {
        let model = Model::init(config(), 6).unwrap();
        let zeros = vec![0.0; model.config().node_count()];
        let s = run_with_gates(&model, &zeros, &CLEAN, &CORRUPT).unwrap();
        let last = CLEAN.len() - 1;
        for (a, b) in s.clean_logits.row(last).iter().zip(s.corrupt_logits.row(last)) {
            assert!((a - b).abs() < 1e-5);
        }
        // every residual write is the corrupted one
        for (c, k) in s.clean.iter().zip(&s.corrupt) {
            assert_eq!(c.attn_block, k.attn_block);
            assert_eq!(c.mlp_block, k.mlp_block);
        }
    }

    /// Plain forward with one MLP contribution replaced, via a dedicated hook.
    fn patch_mlp(model: &Model, layer: usize, replacement: &Tensor) -> Tensor {
        struct Patch<'a>(usize, &'a Tensor);
        impl SiteHook<f32> for Patch<'_> {
            fn site(&mut self, _: &mut Tape<f32>, l: usize, s: Granularity, v: Var<f32>) -> Result<Var<f32>> {
                Ok(if l == self.0 && s == Granularity::MlpBlock { self.1.clone().into() } else { v })
            }
        }
        let mut tape = Tape::new();
        let out = run(&mut tape, &model.frozen_vars(), &CLEAN, &mut Patch(layer, replacement), Readout::All).unwrap();
        tape.value(&out).clone()
    }

    #[test]
    fn single_block_gate_is_activation_patching() {
        let model = Model::init(config(), 7).unwrap();
        let layout = NodeLayout::new(model.config());
        for layer in 0..2 {
            let mut gates = ones(&model);
            gates[layout.index_of(&NodeId::mlp_block(layer)).unwrap()] = 0.0;
            let s = run_with_gates(&model, &gates, &CLEAN, &CORRUPT).unwrap();
            let oracle = patch_mlp(&model, layer, &s.corrupt[layer].mlp_block);
            assert_eq!(s.clean_logits, oracle);
        }
    }

    #[test]
    fn corrupt_stream_ignores_masks() {
        let model = Model::init(config(), 8).unwrap();
        let a = MaskSet::filled(model.config(), GateConstants::default(), 3.0);
        let b = MaskSet::filled(model.config(), GateConstants::default(), -3.0);
        let sa = run_two_stream(&model, &a, &CLEAN, &CORRUPT, GateMode::Deterministic).unwrap();
        let sb = run_two_stream(&model, &b, &CLEAN, &CORRUPT, GateMode::Binary).unwrap();
        assert_eq!(sa.corrupt_logits, sb.corrupt_logits);
        assert_eq!(sa.corrupt, sb.corrupt);
    }

    #[test]
    fn parent_off_hides_children() {
        let model = Model::init(config(), 9).unwrap();
        let layout = NodeLayout::new(model.config());
        let run_with = |child: f32| {
            let mut gates = ones(&model);
            gates[layout.index_of(&NodeId::attn_block(1)).unwrap()] = 0.0;
            gates[layout.index_of(&NodeId::mlp_block(0)).unwrap()] = 0.0;
            for g in [Granularity::Head, Granularity::AttnNeuron] {
                for i in layout.range(1, g) {
                    gates[i] = child;
                }
            }
            for g in [Granularity::MlpHidden, Granularity::MlpOutput] {
                for i in layout.range(0, g) {
                    gates[i] = child;
                }
            }
            run_with_gates(&model, &gates, &CLEAN, &CORRUPT).unwrap().clean_logits
        };
        let reference = run_with(1.0);
        for child in [0.0, 0.3, 0.9] {
            assert_eq!(run_with(child), reference);
        }
    }

    #[test]
    fn continuous_in_a_single_gate() {
        let model = Model::init(config(), 10).unwrap();
        let layout = NodeLayout::new(model.config());
        let idx = layout.index_of(&NodeId::head(0, 1)).unwrap();
        let at = |m: f32| {
            let mut gates = ones(&model);
            gates[idx] = m;
            run_with_gates(&model, &gates, &CLEAN, &CORRUPT).unwrap().clean_logits
        };
        let (lo, hi) = (at(0.5), at(0.5 + 1e-4));
        let gap = lo.data().iter().zip(hi.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(gap < 1e-3);
        assert_ne!(at(0.0), at(1.0));
        assert_eq!(at(1.0), run_with_gates(&model, &ones(&model), &CLEAN, &CORRUPT).unwrap().clean_logits);
    }

    #[test]
    fn inert_head_gate_has_no_effect() {
        let mut model = Model::init(config(), 11).unwrap();
        // zero the W_O rows read by head 1 of layer 0
        let d_head = model.config().d_head();
        let wo = model.layer_weight_mut(0, LayerParam::Wo);
        for v in &mut wo.data_mut()[d_head * 8..2 * d_head * 8] {
            *v = 0.0;
        }
        let layout = NodeLayout::new(model.config());
        let mut gates = ones(&model);
        gates[layout.index_of(&NodeId::head(0, 1)).unwrap()] = 0.0;
        let s = run_with_gates(&model, &gates, &CLEAN, &CORRUPT).unwrap();
        assert_eq!(s.clean_logits, s.base_logits);
    }

    #[test]
    fn rejects_length_mismatch() {
        let model = Model::init(config(), 1).unwrap();
        let masks = MaskSet::new(model.config(), GateConstants::default());
        let err = run_two_stream::<f32>(&model, &masks, &CLEAN, &CORRUPT[..4], GateMode::Binary).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { clean: 5, corrupt: 4 }));
    }

    #[test]
    fn gate_value_modes() {
        let c = GateConstants::default();
        let mut masks = MaskSet::filled(&config(), c, 0.0);
        masks.log_alpha[0] = -2.0;
        let det = gate_values(&masks, GateMode::Deterministic);
        assert!((det[1] - 0.5).abs() < 1e-12);
        let bin = gate_values(&masks, GateMode::Binary);
        assert_eq!((bin[0], bin[1]), (0.0, 1.0));
        let noise = NoiseStream::new(3);
        let a = gate_values(&masks, GateMode::Sampled { noise, step: 4 });
        assert_eq!(a, gate_values(&masks, GateMode::Sampled { noise, step: 4 }));
        assert_ne!(a, gate_values(&masks, GateMode::Sampled { noise, step: 5 }));
    }
}
