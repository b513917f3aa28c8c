//! Gateable node identities and their flat index layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// The six gateable families.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    AttnBlock,
    MlpBlock,
    Head,
    AttnNeuron,
    MlpHidden,
    MlpOutput,
}

impl Granularity {
    /// Per-layer order used by [`enumerate_nodes`].
    pub const ALL: [Granularity; 6] = [
        Granularity::AttnBlock,
        Granularity::MlpBlock,
        Granularity::Head,
        Granularity::AttnNeuron,
        Granularity::MlpHidden,
        Granularity::MlpOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::AttnBlock => "attn_block",
            Granularity::MlpBlock => "mlp_block",
            Granularity::Head => "head",
            Granularity::AttnNeuron => "attn_neuron",
            Granularity::MlpHidden => "mlp_hidden",
            Granularity::MlpOutput => "mlp_output",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }

    /// Human-readable column title used in reports.
    pub fn title(self) -> &'static str {
        match self {
            Granularity::AttnBlock => "Attn Block",
            Granularity::MlpBlock => "MLP Block",
            Granularity::Head => "Attn Heads",
            Granularity::AttnNeuron => "Attn Neurons",
            Granularity::MlpHidden => "MLP Hidden",
            Granularity::MlpOutput => "MLP Output",
        }
    }

    /// Number of gates of this family in one layer.
    pub fn per_layer(self, c: &ModelConfig) -> usize {
        match self {
            Granularity::AttnBlock | Granularity::MlpBlock => 1,
            Granularity::Head => c.n_heads,
            Granularity::AttnNeuron | Granularity::MlpOutput => c.d_model,
            Granularity::MlpHidden => c.d_mlp,
        }
    }

    pub fn is_block(self) -> bool {
        matches!(self, Granularity::AttnBlock | Granularity::MlpBlock)
    }

    pub fn is_neuron(self) -> bool {
        matches!(self, Granularity::AttnNeuron | Granularity::MlpHidden | Granularity::MlpOutput)
    }

    /// Block family governing this one, if any.
    pub fn parent(self) -> Option<Granularity> {
        match self {
            Granularity::AttnBlock | Granularity::MlpBlock => None,
            Granularity::Head | Granularity::AttnNeuron => Some(Granularity::AttnBlock),
            Granularity::MlpHidden | Granularity::MlpOutput => Some(Granularity::MlpBlock),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub granularity: Granularity,
    pub layer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neuron: Option<usize>,
}

impl NodeId {
    pub fn attn_block(layer: usize) -> Self {
        Self { granularity: Granularity::AttnBlock, layer, head: None, neuron: None }
    }

    pub fn mlp_block(layer: usize) -> Self {
        Self { granularity: Granularity::MlpBlock, layer, head: None, neuron: None }
    }

    pub fn head(layer: usize, head: usize) -> Self {
        Self { granularity: Granularity::Head, layer, head: Some(head), neuron: None }
    }

    /// A neuron-level node of family `g`.
    pub fn neuron(g: Granularity, layer: usize, neuron: usize) -> Self {
        debug_assert!(g.is_neuron());
        Self { granularity: g, layer, head: None, neuron: Some(neuron) }
    }

    /// Builds the node at position `index` within its (layer, family) slot.
    pub fn member(g: Granularity, layer: usize, index: usize) -> Self {
        match g {
            Granularity::AttnBlock => Self::attn_block(layer),
            Granularity::MlpBlock => Self::mlp_block(layer),
            Granularity::Head => Self::head(layer, index),
            _ => Self::neuron(g, layer, index),
        }
    }

    /// Position within its (layer, family) slot.
    pub fn index_in_family(&self) -> usize {
        self.head.or(self.neuron).unwrap_or(0)
    }

    pub fn is_valid(&self, c: &ModelConfig) -> bool {
        let g = self.granularity;
        let shape_ok = match g {
            Granularity::AttnBlock | Granularity::MlpBlock => self.head.is_none() && self.neuron.is_none(),
            Granularity::Head => self.head.is_some() && self.neuron.is_none(),
            _ => self.head.is_none() && self.neuron.is_some(),
        };
        shape_ok && self.layer < c.n_layers && self.index_in_family() < g.per_layer(c)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.head, self.neuron) {
            (Some(h), _) => write!(f, "{}[{}.{}]", self.granularity, self.layer, h),
            (_, Some(n)) => write!(f, "{}[{}.{}]", self.granularity, self.layer, n),
            _ => write!(f, "{}[{}]", self.granularity, self.layer),
        }
    }
}

/// Parent in the hierarchy: heads and attention neurons belong to the
/// attention block of their layer; MLP neurons to the MLP block.
pub fn node_parent(node: &NodeId) -> Option<NodeId> {
    node.granularity.parent().map(|g| NodeId::member(g, node.layer, 0))
}

/// All gateable nodes ordered by layer, then family, then index.
pub fn enumerate_nodes(config: &ModelConfig) -> Vec<NodeId> {
    let layout = NodeLayout::new(config);
    (0..layout.len()).map(|i| layout.node_at(i)).collect()
}

/// Flat index arithmetic for the node order of [`enumerate_nodes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeLayout {
    config: ModelConfig,
    /// Offset of each family within one layer, in `Granularity::ALL` order.
    offsets: [usize; 6],
    stride: usize,
}

impl NodeLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut offsets = [0; 6];
        let mut acc = 0;
        for (i, g) in Granularity::ALL.into_iter().enumerate() {
            offsets[i] = acc;
            acc += g.per_layer(config);
        }
        Self { config: *config, offsets, stride: acc }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.stride * self.config.n_layers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes per layer.
    pub fn stride(&self) -> usize {
        self.stride
    }

    fn family_pos(g: Granularity) -> usize {
        Granularity::ALL.iter().position(|&x| x == g).unwrap()
    }

    /// Flat range covered by family `g` in `layer`.
    pub fn range(&self, layer: usize, g: Granularity) -> std::ops::Range<usize> {
        let start = layer * self.stride + self.offsets[Self::family_pos(g)];
        start..start + g.per_layer(&self.config)
    }

    /// Number of nodes of family `g` across all layers.
    pub fn family_total(&self, g: Granularity) -> usize {
        g.per_layer(&self.config) * self.config.n_layers
    }

    pub fn index_of(&self, node: &NodeId) -> Option<usize> {
        node.is_valid(&self.config).then(|| self.range(node.layer, node.granularity).start + node.index_in_family())
    }

    pub fn node_at(&self, index: usize) -> NodeId {
        assert!(index < self.len(), "node index {index} out of range");
        let layer = index / self.stride;
        let within = index % self.stride;
        let pos = self.offsets.iter().rposition(|&o| o <= within).unwrap();
        NodeId::member(Granularity::ALL[pos], layer, within - self.offsets[pos])
    }

    /// Flat index of the parent of the node at `index`.
    pub fn parent_index(&self, index: usize) -> Option<usize> {
        let node = self.node_at(index);
        node_parent(&node).map(|p| self.range(p.layer, p.granularity).start)
    }
}
