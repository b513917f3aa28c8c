//! Final circuits: binarization, hierarchy, evaluation, and reports.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::gates::{binarize, enforce_hierarchy, MaskSet};
use crate::metrics::{
    circuit_size, edge_count, kl_from_logits, mean, task_score, FamilyStats, MetricReport, KL_EPSILON, METRIC_SCHEMA_VERSION,
};
use crate::model::{Granularity, Model, ModelConfig, NodeId, NodeLayout, Readout};
use crate::tasks::{Task, TaskExample, Vocabulary};
use crate::tensor::Real;
use crate::training::{prepare_examples, ExperimentConfig, PreparedExample};
use crate::twostream::{clean_stream, SiteGates};

/// A binary, hierarchy-consistent selection of gateable nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CircuitFile", into = "CircuitFile")]
pub struct Circuit {
    config: ModelConfig,
    bits: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyBits {
    layer: usize,
    family: Granularity,
    /// One `0`/`1` character per gate.
    bits: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitFile {
    config: ModelConfig,
    families: Vec<FamilyBits>,
}

impl From<Circuit> for CircuitFile {
    fn from(c: Circuit) -> Self {
        let layout = c.layout();
        let mut families = Vec::new();
        for layer in 0..c.config.n_layers {
            for family in Granularity::ALL {
                let bits = c.bits[layout.range(layer, family)].iter().map(|&b| if b { '1' } else { '0' }).collect();
                families.push(FamilyBits { layer, family, bits });
            }
        }
        CircuitFile { config: c.config, families }
    }
}

impl TryFrom<CircuitFile> for Circuit {
    type Error = Error;

    fn try_from(f: CircuitFile) -> Result<Self> {
        f.config.validate()?;
        let layout = NodeLayout::new(&f.config);
        let mut bits = vec![false; layout.len()];
        let mut seen = vec![false; f.config.n_layers * Granularity::ALL.len()];
        for fam in &f.families {
            if fam.layer >= f.config.n_layers {
                return Err(Error::InvalidConfig(format!("layer {} out of range", fam.layer)));
            }
            let range = layout.range(fam.layer, fam.family);
            if fam.bits.len() != range.len() {
                return Err(Error::InvalidConfig(format!("{}/{} needs {} bits", fam.family, fam.layer, range.len())));
            }
            for (slot, ch) in bits[range].iter_mut().zip(fam.bits.chars()) {
                *slot = match ch {
                    '0' => false,
                    '1' => true,
                    other => return Err(Error::InvalidConfig(format!("bad bit character {other:?}"))),
                };
            }
            let key = fam.layer * Granularity::ALL.len() + Granularity::ALL.iter().position(|&g| g == fam.family).unwrap();
            seen[key] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidConfig("circuit file is missing a family".into()));
        }
        Circuit::from_bits(f.config, bits)
    }
}

impl Circuit {
    /// Every node kept.
    pub fn full(config: &ModelConfig) -> Self {
        Self { config: *config, bits: vec![true; config.node_count()] }
    }

    /// Every node replaced by its corrupted value.
    pub fn empty(config: &ModelConfig) -> Self {
        Self { config: *config, bits: vec![false; config.node_count()] }
    }

    /// Wraps node-order bits; fails on a wrong length or a hierarchy violation.
    pub fn from_bits(config: ModelConfig, bits: Vec<bool>) -> Result<Self> {
        let layout = NodeLayout::new(&config);
        if bits.len() != layout.len() {
            return Err(Error::InvalidConfig(format!("expected {} bits, got {}", layout.len(), bits.len())));
        }
        if let Some(i) = (0..bits.len()).find(|&i| bits[i] && layout.parent_index(i).is_some_and(|p| !bits[p])) {
            return Err(Error::InvalidConfig(format!("node {} is active under an inactive parent", layout.node_at(i))));
        }
        Ok(Self { config, bits })
    }

    /// Bits with the hierarchy applied rather than checked.
    pub fn from_raw_bits(config: ModelConfig, bits: &[bool]) -> Result<Self> {
        let layout = NodeLayout::new(&config);
        if bits.len() != layout.len() {
            return Err(Error::InvalidConfig(format!("expected {} bits, got {}", layout.len(), bits.len())));
        }
        let bits = enforce_hierarchy(bits, |i| layout.parent_index(i));
        Ok(Self { config, bits })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> NodeLayout {
        NodeLayout::new(&self.config)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_active(&self, node: &NodeId) -> bool {
        self.layout().index_of(node).is_some_and(|i| self.bits[i])
    }

    pub fn active(&self, layer: usize, g: Granularity) -> usize {
        self.bits[self.layout().range(layer, g)].iter().filter(|&&b| b).count()
    }

    /// Family statistics of each layer, in `Granularity::ALL` order.
    pub fn layer_counts(&self) -> Vec<LayerCounts> {
        (0..self.config.n_layers)
            .map(|layer| LayerCounts {
                layer,
                families: Granularity::ALL
                    .iter()
                    .map(|&g| FamilyStats::new(g, self.active(layer, g), g.per_layer(&self.config)))
                    .collect(),
            })
            .collect()
    }
}

/// Binarizes each gate, then zeroes children of inactive blocks.
pub fn extract(masks: &MaskSet) -> Circuit {
    let layout = masks.layout();
    let raw: Vec<bool> = masks.log_alpha.iter().map(|&a| binarize(a as f64, &masks.constants)).collect();
    let bits = enforce_hierarchy(&raw, |i| layout.parent_index(i));
    Circuit { config: *masks.config(), bits }
}

/// Answer-position logits of the clean stream under a fixed binary circuit.
pub fn circuit_logits<T: Real>(model: &Model<T>, ex: &PreparedExample<T>, circuit: &Circuit) -> Result<Vec<f64>> {
    let layout = circuit.layout();
    let values: Vec<T> = circuit.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let gates = SiteGates::constant(&layout, &values);
    let mut tape = Tape::new();
    let out = clean_stream(&mut tape, model, &ex.corrupt_sites, &ex.clean, &gates, Readout::Position(ex.answer_position))?;
    Ok(tape.value(&out).data().iter().map(|v| v.to_f64().unwrap()).collect())
}

/// Mean `KL(base ∥ circuit)` at the answer position.
pub fn circuit_kl<T: Real>(model: &Model<T>, prepared: &[PreparedExample<T>], circuit: &Circuit) -> Result<f64> {
    let kls = prepared
        .par_iter()
        .map(|ex| Ok(kl_from_logits(&ex.base_logits, &circuit_logits(model, ex, circuit)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&kls))
}

fn check_task<T: Real>(prepared: &[PreparedExample<T>]) -> Result<Task> {
    let first = prepared.first().ok_or(Error::EmptyDataset)?.spec.task();
    if prepared.iter().any(|e| e.spec.task() != first) {
        return Err(Error::InvalidConfig("examples mix several tasks".into()));
    }
    Ok(first)
}

fn assemble(task: Task, score: f64, kl: f64, examples: usize, circuit: &Circuit) -> Result<MetricReport> {
    let size = circuit_size(&circuit.bits, &circuit.config)?;
    let edges = edge_count(&circuit.bits, &circuit.config)?;
    let pick = |t: Task| (task == t).then_some(score);
    Ok(MetricReport {
        schema_version: METRIC_SCHEMA_VERSION,
        gt_score: pick(Task::Gt),
        ioi_score: pick(Task::Ioi),
        gp_score: pick(Task::Gp),
        kl_divergence: kl,
        kl_epsilon: KL_EPSILON,
        examples,
        families: size.families,
        parameter_count: size.parameters,
        total_parameters: size.total_parameters,
        compression_ratio: size.compression_ratio,
        active_edges: edges.active,
        total_edges: edges.total,
        edge_compression: edges.compression,
    })
}

/// Metrics of a binary circuit over already prepared examples.
pub fn evaluate_prepared<T: Real>(
    model: &Model<T>,
    prepared: &[PreparedExample<T>],
    circuit: &Circuit,
    gt_margin: u32,
) -> Result<MetricReport> {
    if circuit.config != *model.config() {
        return Err(Error::InvalidConfig("circuit was built for a different model config".into()));
    }
    let task = check_task(prepared)?;
    let vocab = Vocabulary::standard();
    let rows = prepared
        .par_iter()
        .map(|ex| {
            let logits = circuit_logits(model, ex, circuit)?;
            Ok((task_score(&ex.spec, &logits, vocab, gt_margin)?, kl_from_logits(&ex.base_logits, &logits)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let kls: Vec<f64> = rows.iter().map(|r| r.1).collect();
    assemble(task, mean(&scores), mean(&kls), prepared.len(), circuit)
}

/// Metrics of the unmodified model: its task score, zero KL, full size.
pub fn base_report<T: Real>(config: &ModelConfig, prepared: &[PreparedExample<T>], gt_margin: u32) -> Result<MetricReport> {
    let task = check_task(prepared)?;
    let vocab = Vocabulary::standard();
    let scores = prepared.iter().map(|ex| task_score(&ex.spec, &ex.base_logits, vocab, gt_margin)).collect::<Result<Vec<_>>>()?;
    assemble(task, mean(&scores), 0.0, prepared.len(), &Circuit::full(config))
}

/// Runs the binary circuit over `examples` and scores it against the base model.
pub fn evaluate_circuit(model: &Model, circuit: &Circuit, examples: &[TaskExample], gt_margin: u32) -> Result<MetricReport> {
    let prepared = prepare_examples(model, examples)?;
    evaluate_prepared(model, &prepared, circuit, gt_margin)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub layer: usize,
    pub families: Vec<FamilyStats>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Everything known about one extracted circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub task: Task,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentConfig>,
    pub layers: Vec<LayerCounts>,
    pub base: MetricReport,
    pub circuit: MetricReport,
}

impl CircuitReport {
    pub fn new(
        circuit: &Circuit,
        base: MetricReport,
        metrics: MetricReport,
        seed: u64,
        experiment: Option<ExperimentConfig>,
    ) -> Result<Self> {
        let task = [(metrics.gt_score, Task::Gt), (metrics.ioi_score, Task::Ioi), (metrics.gp_score, Task::Gp)]
            .into_iter()
            .find_map(|(s, t)| s.map(|_| t))
            .ok_or_else(|| Error::InvalidConfig("metric report carries no task score".into()))?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            task,
            config: circuit.config,
            experiment,
            layers: circuit.layer_counts(),
            base,
            circuit: metrics,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

fn cell(f: &FamilyStats) -> String {
    if f.granularity.is_block() {
        if f.active == 1 { "Active" } else { "Inactive" }.to_string()
    } else {
        format!("{}/{}", f.active, f.total)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn markdown(r: &CircuitReport) -> String {
    let mut s = String::new();
    let c = &r.config;
    let _ = writeln!(s, "# Circuit report: {}\n", r.task.name());
    let _ = writeln!(
        s,
        "Model: {} layers, {} heads, d_model {}, d_mlp {}. Seed {}. Tool version {}.\n",
        c.n_layers, c.n_heads, c.d_model, c.d_mlp, r.seed, r.tool_version
    );
    s.push_str("| Layer |");
    for g in Granularity::ALL {
        let _ = write!(s, " {} |", g.title());
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(Granularity::ALL.len()));
    s.push('\n');
    for l in &r.layers {
        let _ = write!(s, "| {} |", l.layer);
        for f in &l.families {
            let _ = write!(s, " {} |", cell(f));
        }
        s.push('\n');
    }
    let (b, m) = (&r.base, &r.circuit);
    s.push_str("\n| Metric | Base | Circuit |\n|---|---|---|\n");
    let _ = writeln!(s, "| Task score | {} | {} |", opt(b.task_score()), opt(m.task_score()));
    let _ = writeln!(s, "| KL divergence | {:.6} | {:.6} |", b.kl_divergence, m.kl_divergence);
    let _ = writeln!(s, "| Parameters | {} | {} |", b.parameter_count, m.parameter_count);
    let _ = writeln!(s, "| Compression ratio | {} | {} |", opt(b.compression_ratio), opt(m.compression_ratio));
    let _ = writeln!(s, "| Edges | {}/{} | {}/{} |", b.active_edges, b.total_edges, m.active_edges, m.total_edges);
    let _ = writeln!(s, "| Examples | {} | {} |", b.examples, m.examples);
    s
}

fn csv(r: &CircuitReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "family", "active", "total", "sparsity"]).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for l in &r.layers {
        for f in &l.families {
            w.write_record([
                l.layer.to_string(),
                f.granularity.name().to_string(),
                f.active.to_string(),
                f.total.to_string(),
                format!("{:.6}", f.sparsity),
            ])
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn render_report(report: &CircuitReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Markdown => Ok(markdown(report)),
        ReportFormat::Csv => csv(report),
    }
}
