//! Ground-truth minimal circuits by brute force over coarse nodes.
//!
//! Only attention blocks, MLP blocks, and heads are enumerated; neuron-level
//! gates stay on unless their block is removed. "Removed" means patched with
//! the corrupted activation, exactly as in binary circuit evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{circuit_kl, Circuit};
use crate::model::{Granularity, Model, ModelConfig, NodeId, NodeLayout};
use crate::tasks::TaskExample;
use crate::training::{prepare_examples, PreparedExample};

pub const MAX_COARSE_NODES: usize = 20;
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Attention blocks, heads, and MLP blocks in node order.
pub fn coarse_node_set(config: &ModelConfig) -> Vec<NodeId> {
    let mut nodes = Vec::new();
    for l in 0..config.n_layers {
        nodes.push(NodeId::attn_block(l));
        nodes.push(NodeId::mlp_block(l));
        nodes.extend((0..config.n_heads).map(|h| NodeId::head(l, h)));
    }
    nodes
}

fn is_coarse(n: &NodeId) -> bool {
    matches!(n.granularity, Granularity::AttnBlock | Granularity::MlpBlock | Granularity::Head)
}

/// Validates `nodes` and returns them sorted by node index.
fn canonical(config: &ModelConfig, nodes: &[NodeId]) -> Result<Vec<(usize, NodeId)>> {
    if nodes.len() > MAX_COARSE_NODES {
        return Err(Error::TooManyNodes { n: nodes.len(), max: MAX_COARSE_NODES });
    }
    let layout = NodeLayout::new(config);
    let mut out = Vec::with_capacity(nodes.len());
    for n in nodes {
        if !is_coarse(n) || !n.is_valid(config) {
            return Err(Error::InvalidConfig(format!("{n} is not a coarse node of this model")));
        }
        out.push((layout.index_of(n).expect("valid node"), *n));
    }
    out.sort();
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidConfig("coarse node set has duplicates".into()));
    }
    Ok(out)
}

/// The circuit keeping every non-enumerated gate and exactly the enumerated
/// nodes in `kept`.
pub fn subset_circuit(config: &ModelConfig, enumerated: &[NodeId], kept: &[NodeId]) -> Result<Circuit> {
    let layout = NodeLayout::new(config);
    let mut bits = vec![true; layout.len()];
    for n in enumerated {
        bits[layout.index_of(n).ok_or_else(|| Error::InvalidConfig(format!("{n} not in model")))?] = false;
    }
    for n in kept {
        bits[layout.index_of(n).ok_or_else(|| Error::InvalidConfig(format!("{n} not in model")))?] = true;
    }
    Circuit::from_raw_bits(*config, &bits)
}

/// Coarse nodes of `nodes` that are effectively active in `circuit`: a
/// block when its bit is on, a head when it and its block are on.
pub fn active_coarse(circuit: &Circuit, nodes: &[NodeId]) -> Vec<NodeId> {
    nodes
        .iter()
        .filter(|n| {
            circuit.is_active(n) && (n.granularity != Granularity::Head || circuit.is_active(&NodeId::attn_block(n.layer)))
        })
        .copied()
        .collect()
}

/// Projects a fine circuit onto the coarse set, turning its neurons back on.
pub fn coarse_projection(circuit: &Circuit, nodes: &[NodeId]) -> Result<Circuit> {
    subset_circuit(circuit.config(), nodes, &active_coarse(circuit, nodes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subset {
    pub nodes: Vec<NodeId>,
    /// Mean answer-position `KL(base ∥ circuit)`.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Enumerated nodes in node order.
    pub node_set: Vec<NodeId>,
    pub epsilon: f64,
    /// Loss of the full circuit.
    pub full_loss: f64,
    /// Whether some subset met `full_loss + epsilon`; if not, `minimal`
    /// holds the full set as a best effort.
    pub feasible: bool,
    pub minimal_size: usize,
    /// Every minimum-cardinality subset meeting the tolerance, sorted by
    /// the node indices they contain.
    pub minimal: Vec<Subset>,
    pub subsets_examined: u64,
}

fn members(sorted: &[(usize, NodeId)], mask: u32) -> Vec<NodeId> {
    sorted.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, (_, n))| *n).collect()
}

/// Loss of every subset of `nodes` in bitmask order over node-sorted positions.
fn all_losses(model: &Model, prepared: &[PreparedExample], sorted: &[(usize, NodeId)]) -> Result<Vec<f64>> {
    let config = model.config();
    let enumerated: Vec<NodeId> = sorted.iter().map(|p| p.1).collect();
    (0..1u32 << sorted.len())
        .into_par_iter()
        .map(|mask| circuit_kl(model, prepared, &subset_circuit(config, &enumerated, &members(sorted, mask))?))
        .collect()
}

pub fn exhaustive_search_prepared(
    model: &Model,
    prepared: &[PreparedExample],
    nodes: &[NodeId],
    epsilon: f64,
) -> Result<OracleResult> {
    if prepared.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sorted = canonical(model.config(), nodes)?;
    let losses = all_losses(model, prepared, &sorted)?;
    let full_mask = (1u32 << sorted.len()) - 1;
    let full_loss = losses[full_mask as usize];
    let tolerance = full_loss + epsilon;
    let feasible_sizes =
        losses.iter().enumerate().filter(|(_, &l)| l <= tolerance).map(|(m, _)| (m as u32).count_ones() as usize);
    let (feasible, minimal_size, masks): (bool, usize, Vec<u32>) = match feasible_sizes.min() {
        Some(k) => {
            let masks = (0..=full_mask).filter(|&m| m.count_ones() as usize == k && losses[m as usize] <= tolerance).collect();
            (true, k, masks)
        }
        None => (false, sorted.len(), vec![full_mask]),
    };
    let mut minimal: Vec<(Vec<usize>, Subset)> = masks
        .into_iter()
        .map(|m| {
            let idx: Vec<usize> = sorted.iter().enumerate().filter(|(i, _)| m >> i & 1 == 1).map(|(_, p)| p.0).collect();
            (idx, Subset { nodes: members(&sorted, m), loss: losses[m as usize] })
        })
        .collect();
    minimal.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(OracleResult {
        node_set: sorted.iter().map(|p| p.1).collect(),
        epsilon,
        full_loss,
        feasible,
        minimal_size,
        minimal: minimal.into_iter().map(|p| p.1).collect(),
        subsets_examined: losses.len() as u64,
    })
}

/// Every minimum-size subset of `nodes` whose loss stays within `epsilon`
/// of the full circuit.
pub fn exhaustive_search(model: &Model, examples: &[TaskExample], nodes: &[NodeId], epsilon: f64) -> Result<OracleResult> {
    exhaustive_search_prepared(model, &prepare_examples(model, examples)?, nodes, epsilon)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub removed: NodeId,
    /// Loss increase caused by this removal.
    pub delta: f64,
    /// Loss after the removal.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyTrace {
    pub epsilon: f64,
    pub full_loss: f64,
    pub steps: Vec<GreedyStep>,
    /// Nodes still present when no removal stays within tolerance.
    pub kept: Vec<NodeId>,
}

pub fn greedy_ablation_prepared(
    model: &Model,
    prepared: &[PreparedExample],
    nodes: &[NodeId],
    epsilon: f64,
) -> Result<GreedyTrace> {
    if prepared.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = model.config();
    let sorted = canonical(config, nodes)?;
    let enumerated: Vec<NodeId> = sorted.iter().map(|p| p.1).collect();
    let mut kept = enumerated.clone();
    let full_loss = circuit_kl(model, prepared, &subset_circuit(config, &enumerated, &kept)?)?;
    let tolerance = full_loss + epsilon;
    let mut current = full_loss;
    let mut steps = Vec::new();
    while !kept.is_empty() {
        let candidates = (0..kept.len())
            .into_par_iter()
            .map(|i| {
                let mut rest = kept.clone();
                rest.remove(i);
                circuit_kl(model, prepared, &subset_circuit(config, &enumerated, &rest)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        // `kept` is in node order, so the first minimum is the lowest index
        let mut best = 0;
        for (i, &l) in candidates.iter().enumerate() {
            if l < candidates[best] {
                best = i;
            }
        }
        if candidates[best] > tolerance {
            break;
        }
        let removed = kept.remove(best);
        steps.push(GreedyStep { removed, delta: candidates[best] - current, loss: candidates[best] });
        current = candidates[best];
    }
    Ok(GreedyTrace { epsilon, full_loss, steps, kept })
}

/// Repeatedly removes the node whose removal raises the loss least, while the
/// loss stays within `epsilon` of the full circuit.
pub fn greedy_ablation(model: &Model, examples: &[TaskExample], nodes: &[NodeId], epsilon: f64) -> Result<GreedyTrace> {
    greedy_ablation_prepared(model, &prepare_examples(model, examples)?, nodes, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerParam;
    use crate::tasks::{gen_gt, Vocabulary};

    fn micro() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_mlp: 8, vocab_size: Vocabulary::standard().len(), max_seq_len: 16 }
    }

    fn setup() -> (Model, Vec<PreparedExample>) {
        let model = Model::init(micro(), 11).unwrap();
        let prepared = prepare_examples(&model, &gen_gt(6, 2).unwrap()).unwrap();
        (model, prepared)
    }

    #[test]
    fn coarse_set_shape() {
        let nodes = coarse_node_set(&micro());
        assert_eq!(nodes.len(), 8);
        let toy = coarse_node_set(&ModelConfig::toy(10));
        assert_eq!(toy.len(), 24);
        assert!(matches!(canonical(&ModelConfig::toy(10), &toy), Err(Error::TooManyNodes { n: 24, max: 20 })));
        assert!(canonical(&micro(), &[NodeId::neuron(Granularity::MlpHidden, 0, 0)]).is_err());
        assert!(canonical(&micro(), &[NodeId::head(0, 0), NodeId::head(0, 0)]).is_err());
    }

    #[test]
    fn vacuous_and_infeasible_tolerances() {
        let (model, prepared) = setup();
        let nodes = coarse_node_set(&micro());
        let all = exhaustive_search_prepared(&model, &prepared, &nodes, f64::INFINITY).unwrap();
        assert!(all.feasible);
        assert_eq!(all.minimal_size, 0);
        assert_eq!(all.minimal.len(), 1);
        assert!(all.minimal[0].nodes.is_empty());
        assert_eq!(all.subsets_examined, 256);
        assert_eq!(all.full_loss, 0.0);

        let none = exhaustive_search_prepared(&model, &prepared, &nodes, -1e-9).unwrap();
        assert!(!none.feasible);
        assert_eq!(none.minimal_size, 8);
        assert_eq!(none.minimal[0].nodes, none.node_set);
    }

    #[test]
    fn minimal_subsets_are_minimal_and_order_invariant() {
        let (model, prepared) = setup();
        let nodes = coarse_node_set(&micro());
        let losses_full = circuit_kl(&model, &prepared, &Circuit::empty(&micro())).unwrap();
        let eps = losses_full * 0.3;
        let a = exhaustive_search_prepared(&model, &prepared, &nodes, eps).unwrap();
        let mut reversed = nodes.clone();
        reversed.reverse();
        let b = exhaustive_search_prepared(&model, &prepared, &reversed, eps).unwrap();
        assert_eq!(a, b);
        assert!(a.feasible);
        for s in &a.minimal {
            assert!(s.loss <= a.full_loss + eps);
            assert_eq!(s.nodes.len(), a.minimal_size);
            // every subset with one node fewer fails the tolerance
            for drop in 0..s.nodes.len() {
                let mut fewer = s.nodes.clone();
                fewer.remove(drop);
                let l = circuit_kl(&model, &prepared, &subset_circuit(&micro(), &nodes, &fewer).unwrap()).unwrap();
                assert!(l > a.full_loss + eps);
            }
        }
        let greedy = greedy_ablation_prepared(&model, &prepared, &nodes, eps).unwrap();
        assert!(greedy.kept.len() >= a.minimal_size);
        assert!(greedy.steps.iter().all(|s| s.loss <= a.full_loss + eps));
    }

    #[test]
    fn inert_head_is_removed_first() {
        let (mut model, _) = setup();
        let dh = micro().d_head();
        let d = micro().d_model;
        // head 1 of layer 1 writes nothing
        for v in &mut model.layer_weight_mut(1, LayerParam::Wo).data_mut()[dh * d..2 * dh * d] {
            *v = 0.0;
        }
        let prepared = prepare_examples(&model, &gen_gt(6, 2).unwrap()).unwrap();
        let trace = greedy_ablation_prepared(&model, &prepared, &coarse_node_set(&micro()), 1e-3).unwrap();
        assert_eq!(trace.steps[0].removed, NodeId::head(1, 1));
        assert_eq!(trace.steps[0].delta, 0.0);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let (mut model, _) = setup();
        let dh = micro().d_head();
        let d = micro().d_model;
        for v in &mut model.layer_weight_mut(0, LayerParam::Wo).data_mut()[..2 * dh * d] {
            *v = 0.0;
        }
        let prepared = prepare_examples(&model, &gen_gt(4, 3).unwrap()).unwrap();
        let nodes = [NodeId::head(0, 1), NodeId::head(0, 0)];
        let trace = greedy_ablation_prepared(&model, &prepared, &nodes, 1e-3).unwrap();
        assert_eq!(trace.steps[0].removed, NodeId::head(0, 0));
        assert_eq!(trace.steps[1].removed, NodeId::head(0, 1));
        assert!(trace.kept.is_empty());
    }

    #[test]
    fn projection_turns_neurons_back_on() {
        let c = micro();
        let layout = NodeLayout::new(&c);
        let mut bits = vec![true; layout.len()];
        bits[layout.index_of(&NodeId::neuron(Granularity::MlpHidden, 0, 3)).unwrap()] = false;
        bits[layout.index_of(&NodeId::attn_block(1)).unwrap()] = false;
        let fine = Circuit::from_raw_bits(c, &bits).unwrap();
        let nodes = coarse_node_set(&c);
        let active = active_coarse(&fine, &nodes);
        assert_eq!(active.len(), 8 - 3);
        let coarse = coarse_projection(&fine, &nodes).unwrap();
        assert!(coarse.is_active(&NodeId::neuron(Granularity::MlpHidden, 0, 3)));
        assert!(!coarse.is_active(&NodeId::head(1, 0)));
    }

    #[test]
    fn result_json_round_trip() {
        let (model, prepared) = setup();
        let r = exhaustive_search_prepared(&model, &prepared, &coarse_node_set(&micro())[..3], 0.05).unwrap();
        let back: OracleResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
