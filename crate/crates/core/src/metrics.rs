//! Task scores, output faithfulness, and circuit-size accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Granularity, ModelConfig, NodeId, NodeLayout};
use crate::tasks::{AnswerSpec, Vocabulary};

/// Floor applied to the circuit probability inside the KL logarithm.
pub const KL_EPSILON: f64 = 1e-12;

pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// `P(y > y_start + margin) − P(y < y_start − margin)` over the two-digit
/// year tokens; `year_probs[y]` is the probability of year token `y`.
pub fn gt_score(year_probs: &[f64], y_start: u32, margin: u32) -> Result<f64> {
    if y_start > 99 {
        return Err(Error::InvalidYear(y_start));
    }
    if year_probs.len() != 100 {
        return Err(Error::InvalidConfig(format!("expected 100 year probabilities, got {}", year_probs.len())));
    }
    let (y, m) = (y_start as usize, margin as usize);
    let above: f64 = year_probs.iter().skip(y + m + 1).sum();
    let below: f64 = year_probs[..y.saturating_sub(m)].iter().sum();
    Ok(above - below)
}

/// `logit_IO − logit_S`
pub fn ioi_score(logits: &[f64], io_token: usize, s_token: usize) -> f64 {
    logits[io_token] - logits[s_token]
}

/// `logit_consistent − logit_inconsistent`
pub fn gp_score(logits: &[f64], consistent_token: usize, inconsistent_token: usize) -> f64 {
    logits[consistent_token] - logits[inconsistent_token]
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// `Σ_v p(v) · ln(p(v) / max(q(v), ε))`, clamped at 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p.iter().zip(q).filter(|(&pv, _)| pv > 0.0).map(|(&pv, &qv)| pv * (pv.ln() - qv.max(KL_EPSILON).ln())).sum();
    kl.max(0.0)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// KL between the distributions of two logit vectors, computed in log space
/// with the same floor as [`kl_divergence`].
pub fn kl_from_logits(model_logits: &[f64], circuit_logits: &[f64]) -> f64 {
    let lp = log_softmax(model_logits);
    let lq = log_softmax(circuit_logits);
    let floor = KL_EPSILON.ln();
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b.max(floor))).sum();
    kl.max(0.0)
}

/// The task metric of one example from its answer-position logits.
pub fn task_score(spec: &AnswerSpec, logits: &[f64], vocab: &Vocabulary, gt_margin: u32) -> Result<f64> {
    match *spec {
        AnswerSpec::Gt { y_start } => {
            let probs = softmax(logits);
            let years = (0..100).map(|y| vocab.year(y).map(|id| probs[id])).collect::<Result<Vec<_>>>()?;
            gt_score(&years, y_start, gt_margin)
        }
        AnswerSpec::Ioi { io_token, s_token } => Ok(ioi_score(logits, io_token, s_token)),
        AnswerSpec::Gp { consistent_token, inconsistent_token } => Ok(gp_score(logits, consistent_token, inconsistent_token)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub granularity: Granularity,
    pub active: usize,
    pub total: usize,
    /// `1 − active / total`
    pub sparsity: f64,
}

impl FamilyStats {
    pub fn new(granularity: Granularity, active: usize, total: usize) -> Self {
        let sparsity = if total == 0 { 0.0 } else { 1.0 - active as f64 / total as f64 };
        Self { granularity, active, total, sparsity }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitSize {
    /// Gateable parameters kept by the circuit.
    pub parameters: u64,
    /// Gateable parameters of the full model (embeddings and unembedding excluded).
    pub total_parameters: u64,
    /// `total_parameters / parameters`; `None` for an empty circuit.
    pub compression_ratio: Option<f64>,
    pub families: Vec<FamilyStats>,
}

fn check_bits(bits: &[bool], layout: &NodeLayout) -> Result<()> {
    if bits.len() != layout.len() {
        return Err(Error::InvalidConfig(format!("expected {} mask bits, got {}", layout.len(), bits.len())));
    }
    Ok(())
}

fn count(bits: &[bool], range: std::ops::Range<usize>) -> u64 {
    bits[range].iter().filter(|&&b| b).count() as u64
}

/// Parameters of one layer given active counts. A component's weights count
/// only while its block gate is on; matrices scale with the active rows and
/// columns they connect.
fn layer_parameters(c: &ModelConfig, attn_on: bool, heads: u64, attn_out: u64, mlp_on: bool, hidden: u64, mlp_out: u64) -> u64 {
    let (d, dh) = (c.d_model as u64, c.d_head() as u64);
    let attn = if attn_on { 2 * d + 3 * (d * dh + dh) * heads + heads * dh * attn_out + attn_out } else { 0 };
    let mlp = if mlp_on { 2 * d + (d + 1) * hidden + hidden * mlp_out + mlp_out } else { 0 };
    attn + mlp
}

/// Parameter accounting and per-family sparsity of a binary circuit.
pub fn circuit_size(bits: &[bool], config: &ModelConfig) -> Result<CircuitSize> {
    let layout = NodeLayout::new(config);
    check_bits(bits, &layout)?;
    let (mut parameters, mut total_parameters) = (0, 0);
    for l in 0..config.n_layers {
        let n = |g| count(bits, layout.range(l, g));
        parameters += layer_parameters(
            config,
            n(Granularity::AttnBlock) == 1,
            n(Granularity::Head),
            n(Granularity::AttnNeuron),
            n(Granularity::MlpBlock) == 1,
            n(Granularity::MlpHidden),
            n(Granularity::MlpOutput),
        );
        let (h, d, m) = (config.n_heads as u64, config.d_model as u64, config.d_mlp as u64);
        total_parameters += layer_parameters(config, true, h, d, true, m, d);
    }
    let families = Granularity::ALL
        .iter()
        .map(|&g| {
            let active = (0..config.n_layers).map(|l| count(bits, layout.range(l, g))).sum::<u64>();
            FamilyStats::new(g, active as usize, layout.family_total(g))
        })
        .collect();
    let compression_ratio = (parameters > 0).then(|| total_parameters as f64 / parameters as f64);
    Ok(CircuitSize { parameters, total_parameters, compression_ratio, families })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCount {
    pub active: u64,
    pub total: u64,
    /// `1 − active / total`
    pub compression: f64,
}

/// Node of the coarse graph used for edge accounting.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CoarseNode {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Output,
}

/// Coarse graph nodes in topological order.
pub fn coarse_nodes(config: &ModelConfig) -> Vec<CoarseNode> {
    let mut nodes = vec![CoarseNode::Embed];
    for layer in 0..config.n_layers {
        nodes.extend((0..config.n_heads).map(|head| CoarseNode::Head { layer, head }));
        nodes.push(CoarseNode::Mlp { layer });
    }
    nodes.push(CoarseNode::Output);
    nodes
}

/// Whether `from` writes into the residual stream read by `to`.
pub fn coarse_edge(from: CoarseNode, to: CoarseNode) -> bool {
    use CoarseNode::*;
    match (from, to) {
        (Output, _) | (_, Embed) => false,
        (_, Output) => true,
        (Embed, _) => true,
        (Head { layer: a, .. } | Mlp { layer: a }, Head { layer: b, .. }) => a < b,
        (Head { layer: a, .. }, Mlp { layer: b }) => a <= b,
        (Mlp { layer: a }, Mlp { layer: b }) => a < b,
    }
}

/// Edges of the coarse graph with both endpoints active. A head is active
/// when it and its attention block are on; an MLP when its block is on;
/// the embedding and output nodes always are.
pub fn edge_count(bits: &[bool], config: &ModelConfig) -> Result<EdgeCount> {
    let layout = NodeLayout::new(config);
    check_bits(bits, &layout)?;
    let bit = |n: NodeId| bits[layout.index_of(&n).expect("node in range")];
    let nodes = coarse_nodes(config);
    let active: Vec<bool> = nodes
        .iter()
        .map(|n| match *n {
            CoarseNode::Embed | CoarseNode::Output => true,
            CoarseNode::Head { layer, head } => bit(NodeId::attn_block(layer)) && bit(NodeId::head(layer, head)),
            CoarseNode::Mlp { layer } => bit(NodeId::mlp_block(layer)),
        })
        .collect();
    let (mut total, mut on) = (0u64, 0u64);
    for (j, &to) in nodes.iter().enumerate() {
        for (i, &from) in nodes[..j].iter().enumerate() {
            if coarse_edge(from, to) {
                total += 1;
                if active[i] && active[j] {
                    on += 1;
                }
            }
        }
    }
    Ok(EdgeCount { active: on, total, compression: 1.0 - on as f64 / total as f64 })
}

/// Task, faithfulness, and size metrics of one evaluated circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ioi_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_score: Option<f64>,
    pub kl_divergence: f64,
    pub kl_epsilon: f64,
    pub examples: usize,
    pub families: Vec<FamilyStats>,
    pub parameter_count: u64,
    pub total_parameters: u64,
    pub compression_ratio: Option<f64>,
    pub active_edges: u64,
    pub total_edges: u64,
    pub edge_compression: f64,
}

impl MetricReport {
    /// Task score of whichever task the report covers.
    pub fn task_score(&self) -> Option<f64> {
        self.gt_score.or(self.ioi_score).or(self.gp_score)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::enumerate_nodes;

    fn cfg(l: usize, h: usize) -> ModelConfig {
        ModelConfig { n_layers: l, n_heads: h, d_model: 2 * h, d_mlp: 4, vocab_size: 5, max_seq_len: 4 }
    }

    #[test]
    fn gt_examples() {
        let uniform = vec![0.01; 100];
        assert!((gt_score(&uniform, 43, 0).unwrap() - 0.13).abs() < 1e-12);
        let mut peak = vec![0.0; 100];
        peak[99] = 1.0;
        assert_eq!(gt_score(&peak, 43, 0).unwrap(), 1.0);
        assert!(matches!(gt_score(&uniform, 100, 0), Err(Error::InvalidYear(100))));
        // margin 10: 46/100 above 53, 33/100 below 33
        assert!((gt_score(&uniform, 43, 10).unwrap() - 0.13).abs() < 1e-12);
    }

    #[test]
    fn logit_differences() {
        assert_eq!(ioi_score(&[0.5, 0.5], 0, 1), 0.0);
        assert_eq!(ioi_score(&[2.0, 1.0], 0, 1), 1.0);
        assert_eq!(mean(&[1.0, 3.0]), 2.0);
        assert_eq!(gp_score(&[3.0, 3.0], 0, 1), 0.0);
        assert_eq!(gp_score(&[2.0, 1.0], 0, 1), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - 0.6931).abs() < 1e-4);
        assert!((kl_divergence(&[0.75, 0.25], &[0.5, 0.5]) - 0.1308).abs() < 1e-4);
        assert!((kl_divergence(&[1.0, 0.0], &[0.0, 1.0]) - 1e-12f64.ln().abs()).abs() < 1e-9);
        let (a, b) = ([1.0, -2.0, 0.5], [0.3, 0.1, -1.0]);
        assert!((kl_from_logits(&a, &b) - kl_divergence(&softmax(&a), &softmax(&b))).abs() < 1e-12);
        assert_eq!(kl_from_logits(&a, &a), 0.0);
    }

    #[test]
    fn table_sparsity_formula() {
        let s = FamilyStats::new(Granularity::Head, 21, 144);
        assert_eq!(format!("{:.1}", 100.0 * s.sparsity), "85.4");
    }

    #[test]
    fn size_endpoints() {
        let c = ModelConfig { n_layers: 2, n_heads: 2, d_model: 4, d_mlp: 8, vocab_size: 5, max_seq_len: 4 };
        let n = c.node_count();
        let full = circuit_size(&vec![true; n], &c).unwrap();
        assert_eq!(full.compression_ratio, Some(1.0));
        assert_eq!(full.parameters, full.total_parameters);
        // per layer: ln1 8, qkv 60, w_o+b_o 20, ln2 8, w_in+b_in 40, w_out+b_out 36
        assert_eq!(full.total_parameters, 2 * (8 + 60 + 20 + 8 + 40 + 36));
        let empty = circuit_size(&vec![false; n], &c).unwrap();
        assert_eq!(empty.parameters, 0);
        assert_eq!(empty.compression_ratio, None);
        assert!(empty.families.iter().all(|f| f.sparsity == 1.0));
    }

    /// All edges of the stated rule, by a direct pass over (from, to) pairs.
    fn brute_force_edges(l: usize, h: usize) -> u64 {
        // index nodes: 0 = EMB, then per layer h heads and one MLP, then OUT
        let mut kind = vec![(0usize, 'E')];
        for layer in 0..l {
            kind.extend(std::iter::repeat_n((layer, 'H'), h));
            kind.push((layer, 'M'));
        }
        kind.push((l, 'O'));
        let mut edges = 0;
        for (i, &(la, ka)) in kind.iter().enumerate() {
            for (j, &(lb, kb)) in kind.iter().enumerate() {
                let upstream = match (ka, kb) {
                    (_, 'E') | ('O', _) => false,
                    (_, 'O') => i != j,
                    ('E', _) => true,
                    (_, 'H') => la < lb,
                    ('H', 'M') => la <= lb,
                    ('M', 'M') => la < lb,
                    _ => false,
                };
                edges += upstream as u64;
            }
        }
        edges
    }

    #[test]
    fn edges_all_active_match_brute_force() {
        for l in 1..=3 {
            for h in 1..=3 {
                let c = cfg(l, h);
                let e = edge_count(&vec![true; c.node_count()], &c).unwrap();
                assert_eq!(e.total, brute_force_edges(l, h));
                assert_eq!(e.active, e.total);
                assert_eq!(e.compression, 0.0);
            }
        }
        assert_eq!(brute_force_edges(2, 2), 26);
    }

    #[test]
    fn single_active_head() {
        let c = cfg(2, 2);
        let layout = NodeLayout::new(&c);
        let mut bits = vec![false; c.node_count()];
        bits[layout.index_of(&NodeId::attn_block(1)).unwrap()] = true;
        bits[layout.index_of(&NodeId::head(1, 0)).unwrap()] = true;
        // EMB -> head, head -> OUT, EMB -> OUT
        assert_eq!(edge_count(&bits, &c).unwrap().active, 3);
        let none = edge_count(&vec![false; c.node_count()], &c).unwrap();
        assert_eq!(none.active, 1);
    }

    #[test]
    fn task_scores_dispatch() {
        let vocab = Vocabulary::standard();
        let mut logits = vec![-1e9; vocab.len()];
        logits[99] = 0.0;
        assert!((task_score(&AnswerSpec::Gt { y_start: 43 }, &logits, vocab, 0).unwrap() - 1.0).abs() < 1e-12);
        let spec = AnswerSpec::Ioi { io_token: 3, s_token: 4 };
        logits[3] = 2.0;
        logits[4] = 1.0;
        assert_eq!(task_score(&spec, &logits, vocab, 0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn kl_nonnegative(raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..8)) {
            let (p, q): (Vec<f64>, Vec<f64>) = raw.into_iter().unzip();
            let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
            let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
            let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
            prop_assert!(kl_divergence(&p, &q) >= 0.0);
            prop_assert!(kl_divergence(&p, &p) < 1e-9);
        }

        #[test]
        fn gt_antisymmetric(raw in proptest::collection::vec(0.0f64..1.0, 100), y in 0u32..100) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            // reflect around y_start, keeping only years whose mirror exists
            let yi = y as i64;
            let mut kept = vec![0.0; 100];
            let mut mirrored = vec![0.0; 100];
            for v in 0..100i64 {
                let r = 2 * yi - v;
                if (0..100).contains(&r) {
                    kept[v as usize] = p[v as usize];
                    mirrored[r as usize] = p[v as usize];
                }
            }
            let a = gt_score(&kept, y, 0).unwrap();
            let b = gt_score(&mirrored, y, 0).unwrap();
            prop_assert!((a + b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&gt_score(&p, y, 0).unwrap()));
        }

        #[test]
        fn size_is_monotone(seed_bits in proptest::collection::vec(any::<bool>(), 40), extra in 0usize..40) {
            let c = ModelConfig { n_layers: 2, n_heads: 2, d_model: 4, d_mlp: 8, vocab_size: 5, max_seq_len: 4 };
            prop_assert_eq!(enumerate_nodes(&c).len(), 40);
            let before = circuit_size(&seed_bits, &c).unwrap().parameters;
            let mut more = seed_bits.clone();
            more[extra] = true;
            prop_assert!(circuit_size(&more, &c).unwrap().parameters >= before);
        }
    }
}
