use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use circuitscope::checkpoint::Checkpoint;
use circuitscope::extraction::{
    base_report, evaluate_prepared, extract as extract_circuit, render_report, Circuit, CircuitReport, ReportFormat,
};
use circuitscope::metrics::MetricReport;
use circuitscope::model::Model;
use circuitscope::oracle::{coarse_node_set, exhaustive_search_prepared, greedy_ablation_prepared};
use circuitscope::tasks::Task;
use circuitscope::training::{base_train, discover_with, prepare_examples, Datasets, ExperimentConfig, LogEntry};
use circuitscope::Error;

use crate::manifest::{input_hash, sha256_hex, timestamp, InputFile, RunManifest, MANIFEST_FILE};
use crate::Common;

pub const MODEL_FILE: &str = "model.npck";
pub const MASKS_FILE: &str = "masks.npck";
pub const CIRCUIT_FILE: &str = "circuit_mask.json";
pub const METRICS_FILE: &str = "metrics.json";

/// A problem with the user's inputs rather than with the computation.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// 1 for configuration and missing-input problems, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Io(io) => io_code(io),
                Error::InvalidConfig(_)
                | Error::Json(_)
                | Error::Checkpoint(_)
                | Error::Dataset(_)
                | Error::TooManyNodes { .. }
                | Error::TokenOutOfRange { .. }
                | Error::SequenceTooLong { .. }
                | Error::LengthMismatch { .. } => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
    }
    2
}

fn io_code(e: &std::io::Error) -> u8 {
    if e.kind() == std::io::ErrorKind::NotFound {
        1
    } else {
        2
    }
}

/// Metric JSON written by `evaluate` and read by `report`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub seed: u64,
    pub task: Task,
    pub experiment: ExperimentConfig,
    pub base: MetricReport,
    pub circuit: MetricReport,
}

/// State shared by every subcommand: the resolved config, recorded inputs,
/// and outputs written so far.
struct Run {
    command: &'static str,
    config: ExperimentConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
    inputs: Vec<InputFile>,
    outputs: Vec<String>,
    started: DateTime<Utc>,
}

impl Run {
    /// Loads and validates the config before anything else happens.
    fn start(command: &'static str, common: &Common) -> Result<Self> {
        let started = Utc::now();
        let mut config = match &common.config {
            Some(path) => {
                let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_slice::<ExperimentConfig>(&bytes)
                    .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?
            }
            None => ExperimentConfig::toy(common.task.unwrap_or(Task::Gt)),
        };
        if let Some(task) = common.task {
            config.task = task;
        }
        if let Some(seed) = common.seed {
            config.train.seed = seed;
        }
        config.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(Self {
            command,
            config,
            config_path: common.config.clone(),
            out: common.out.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started,
        })
    }

    fn seed(&self) -> u64 {
        self.config.train.seed
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputFile { path: path.to_path_buf(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    fn checkpoint(&mut self, path: &Path) -> Result<Checkpoint> {
        let bytes = self.read_input(path)?;
        Checkpoint::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    fn model(&mut self, path: &Path) -> Result<Model> {
        let ck = self.checkpoint(path)?;
        let model = ck.model().with_context(|| format!("{} holds no model", path.display()))?;
        if *model.config() != self.config.model {
            return Err(ConfigError(format!("{} does not match the configured model shape", path.display())).into());
        }
        Ok(model)
    }

    fn json_input<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = self.read_input(path)?;
        serde_json::from_slice(&bytes).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
    }

    fn datasets(&self) -> Result<Datasets> {
        Ok(self.config.datasets()?)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        let clashes = |p: &Path| std::fs::canonicalize(p).ok() == std::fs::canonicalize(&path).ok();
        if path.exists() && self.inputs.iter().any(|i| clashes(&i.path)) {
            return Err(ConfigError(format!("refusing to overwrite input {}", path.display())).into());
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write(name, text.as_bytes())
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut buf = Vec::new();
        for r in rows {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        self.write(name, &buf)
    }

    fn finish(self) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let config_json = serde_json::to_vec(&self.config)?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            config_path: self.config_path,
            seed: self.config.train.seed,
            input_hash: input_hash(&config_json, &self.inputs),
            inputs: self.inputs,
            output_dir: self.out.clone(),
            outputs: self.outputs,
            started_at: timestamp(self.started),
            finished_at: timestamp(Utc::now()),
        };
        manifest.write(&self.out).with_context(|| format!("writing {MANIFEST_FILE}"))?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

fn train_model(run: &mut Run, data: &Datasets) -> Result<Model> {
    let c = &run.config;
    let init = Model::init(c.model, c.train.seed)?;
    let result = base_train(init, &data.base_training(), &data.validation, &c.train, c.data().gt_margin)?;
    for e in &result.epochs {
        println!("base epoch {:>3}  loss {:.4}  validation score {:.4}", e.epoch, e.loss, e.validation_score);
    }
    let mut ck = Checkpoint::from_model(&result.model);
    ck.metadata.insert("task".into(), serde_json::to_value(c.task)?);
    ck.metadata.insert("seed".into(), c.train.seed.into());
    ck.metadata.insert("validation_score".into(), result.final_score.into());
    run.write(MODEL_FILE, &ck.to_bytes()?)?;
    run.write_jsonl("base_log.jsonl", &result.epochs)?;
    Ok(result.model)
}

pub fn train_base(common: &Common) -> Result<()> {
    let mut run = Run::start("train-base", common)?;
    let data = run.datasets()?;
    train_model(&mut run, &data)?;
    run.finish()
}

pub fn discover(common: &Common, model_path: Option<&Path>) -> Result<()> {
    let mut run = Run::start("discover", common)?;
    let data = run.datasets()?;
    let model = match model_path {
        Some(p) => run.model(p)?,
        None => train_model(&mut run, &data)?,
    };
    let result = discover_with(&model, &data.train, &data.validation, &run.config.train, |entry| {
        if let LogEntry::Eval { epoch, validation, live_sparsity, .. } = entry {
            let pct: Vec<String> = live_sparsity.iter().map(|s| format!("{:.0}%", s * 100.0)).collect();
            println!("mask epoch {epoch:>3}  kl {:.4}  penalty {:.4}  off {}", validation.kl, validation.penalty, pct.join(" "));
            let _ = std::io::stdout().flush();
        }
    })?;
    let mut ck = Checkpoint::new(run.config.model);
    ck.put_masks(&result.masks)?;
    ck.metadata.insert("task".into(), serde_json::to_value(run.config.task)?);
    ck.metadata.insert("seed".into(), run.seed().into());
    ck.metadata.insert("steps".into(), result.state.step.into());
    ck.metadata.insert("lambdas".into(), serde_json::to_value(run.config.train.effective_lambdas(&run.config.model))?);
    run.write(MASKS_FILE, &ck.to_bytes()?)?;
    run.write_jsonl("train_log.jsonl", &result.log)?;
    run.write_json("run_state.json", &result.state)?;
    run.finish()
}

fn circuit_from_masks(run: &mut Run, path: &Path) -> Result<Circuit> {
    let ck = run.checkpoint(path)?;
    let masks = ck.masks().with_context(|| format!("{} holds no masks", path.display()))?;
    Ok(extract_circuit(&masks))
}

pub fn extract(common: &Common, masks: &Path) -> Result<()> {
    let mut run = Run::start("extract", common)?;
    let circuit = circuit_from_masks(&mut run, masks)?;
    for l in circuit.layer_counts() {
        let cells: Vec<String> = l.families.iter().map(|f| format!("{} {}/{}", f.granularity, f.active, f.total)).collect();
        println!("layer {}: {}", l.layer, cells.join(", "));
    }
    run.write_json(CIRCUIT_FILE, &circuit)?;
    run.finish()
}

pub fn evaluate(common: &Common, model: &Path, circuit: Option<&Path>, masks: Option<&Path>) -> Result<()> {
    let mut run = Run::start("evaluate", common)?;
    let model = run.model(model)?;
    let circuit: Circuit = match (circuit, masks) {
        (Some(p), _) => run.json_input(p)?,
        (None, Some(p)) => circuit_from_masks(&mut run, p)?,
        (None, None) => return Err(ConfigError("evaluate needs --circuit or --masks".into()).into()),
    };
    if circuit.config() != model.config() {
        return Err(ConfigError("circuit and model shapes differ".into()).into());
    }
    let data = run.datasets()?;
    let margin = run.config.data().gt_margin;
    let prepared = prepare_examples(&model, &data.test)?;
    let evaluation = Evaluation {
        seed: run.seed(),
        task: run.config.task,
        experiment: run.config.clone(),
        base: base_report(model.config(), &prepared, margin)?,
        circuit: evaluate_prepared(&model, &prepared, &circuit, margin)?,
    };
    println!(
        "task score base {:?} circuit {:?}  kl {:.6}",
        evaluation.base.task_score(),
        evaluation.circuit.task_score(),
        evaluation.circuit.kl_divergence
    );
    run.write_json(METRICS_FILE, &evaluation)?;
    run.finish()
}

pub fn oracle(common: &Common, model: &Path, epsilon: f64) -> Result<()> {
    let mut run = Run::start("oracle", common)?;
    let model = run.model(model)?;
    let data = run.datasets()?;
    let prepared = prepare_examples(&model, &data.test)?;
    let nodes = coarse_node_set(model.config());
    let result = exhaustive_search_prepared(&model, &prepared, &nodes, epsilon)?;
    let greedy = greedy_ablation_prepared(&model, &prepared, &nodes, epsilon)?;
    println!(
        "minimal size {} ({} subsets, feasible {}); greedy keeps {}",
        result.minimal_size,
        result.minimal.len(),
        result.feasible,
        greedy.kept.len()
    );
    run.write_json("oracle.json", &result)?;
    run.write_json("greedy.json", &greedy)?;
    run.finish()
}

pub fn report(common: &Common, circuit: &Path, metrics: &Path, format: &str) -> Result<()> {
    let formats = match format {
        "all" => vec![ReportFormat::Json, ReportFormat::Markdown, ReportFormat::Csv],
        f => vec![f.parse::<ReportFormat>().map_err(|e| ConfigError(e.to_string()))?],
    };
    let mut run = Run::start("report", common)?;
    let circuit: Circuit = run.json_input(circuit)?;
    let evaluation: Evaluation = run.json_input(metrics)?;
    if *circuit.config() != evaluation.experiment.model {
        return Err(ConfigError("circuit and metrics describe different models".into()).into());
    }
    let report = CircuitReport::new(&circuit, evaluation.base, evaluation.circuit, evaluation.seed, Some(evaluation.experiment))?;
    for f in formats {
        run.write(&format!("circuit.{}", f.extension()), render_report(&report, f)?.as_bytes())?;
    }
    run.finish()
}
