//! Base-model training and mask discovery.
//!
//! Mask gradients are computed in two stages. Each example's clean stream
//! treats the gate values of the step as leaves and yields `dL/dm`; these
//! are summed over the batch in example order. The summed gradient is then
//! pushed through the Hard Concrete transform on a small gate tape, together
//! with the sparsity penalty, to give `dL/dlog_alpha`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ParamId, Tape};
use crate::error::{Error, Result};
use crate::gates::{
    binarize, expected_l0_on_tape, gate_on_tape, normalized_l0, GateConstants, Lambdas, MaskSet, NoiseStream, DEFAULT_LOG_ALPHA,
};
use crate::metrics::{kl_from_logits, log_softmax, mean, task_score};
use crate::model::{run, Granularity, LayerSites, Model, ModelConfig, NodeLayout, Readout};
use crate::tasks::{AnswerSpec, IoiCorruption, Task, TaskExample, Vocabulary};
use crate::tensor::{Real, Tensor};
use crate::twostream::{clean_stream, flatten_gate_grads, prepare, step_noise, SiteGates, StreamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasePhase {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once the validation task score exceeds this.
    pub target_score: Option<f64>,
}

impl Default for BasePhase {
    fn default() -> Self {
        Self { learning_rate: 3e-3, epochs: 60, batch_size: 32, target_score: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPhase {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Validation runs every this many epochs, and after the last one.
    pub eval_every: usize,
    pub init_log_alpha: f32,
    /// Weight of an extra answer-token cross-entropy term; 0 disables it.
    pub answer_ce_weight: f64,
    /// Rescale λ by family size relative to GPT-2 small, so each gate feels
    /// the same penalty it would there.
    pub scale_lambdas: bool,
}

impl Default for MaskPhase {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            eval_every: 10,
            init_log_alpha: DEFAULT_LOG_ALPHA,
            answer_ce_weight: 0.0,
            scale_lambdas: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Examples used only for base training.
    pub base_train: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Margin of the Greater-Than score.
    pub gt_margin: u32,
    pub ioi_corruption: IoiCorruption,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { base_train: 2000, train: 150, validation: 150, test: 300, gt_margin: 0, ioi_corruption: IoiCorruption::default() }
    }
}

impl DataConfig {
    /// Appendix-scale defaults for `task`.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Ioi => Self { train: 200, validation: 200, ..Self::default() },
            _ => Self::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambdas: Lambdas,
    pub gates: GateConstants,
    pub base: BasePhase,
    pub mask: MaskPhase,
}

impl TrainConfig {
    /// The λ used when discovering masks for a model of shape `config`.
    pub fn effective_lambdas(&self, config: &ModelConfig) -> Lambdas {
        if self.mask.scale_lambdas {
            self.lambdas.size_scaled(config, &ModelConfig::gpt2_small())
        } else {
            self.lambdas
        }
    }

    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.gates.validate()?;
        let bad = |what: &str| Err(Error::InvalidConfig(format!("{what} must be positive")));
        if !(self.base.learning_rate > 0.0) {
            return bad("base.learning_rate");
        }
        if !(self.mask.learning_rate > 0.0) {
            return bad("mask.learning_rate");
        }
        if self.base.batch_size == 0 || self.mask.batch_size == 0 {
            return bad("batch_size");
        }
        if self.mask.eval_every == 0 {
            return bad("mask.eval_every");
        }
        if !self.mask.init_log_alpha.is_finite() || !(self.mask.answer_ce_weight >= 0.0) {
            return Err(Error::InvalidConfig("mask.init_log_alpha must be finite and answer_ce_weight >= 0".into()));
        }
        Ok(())
    }
}

/// Everything a pipeline run needs: task, model shape, data sizes, training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// The toy model on `task` with default settings.
    pub fn toy(task: Task) -> Self {
        let mut train = TrainConfig::default();
        // GT scores live in [-1, 1]; the other two are logit differences
        train.base.target_score = Some(match task {
            Task::Gt => 0.9,
            Task::Ioi | Task::Gp => 4.0,
        });
        if task == Task::Ioi {
            train.mask.epochs = 500;
        }
        Self { task, model: ModelConfig::toy(Vocabulary::standard().len()), data: Some(DataConfig::for_task(task)), train }
    }

    pub fn data(&self) -> DataConfig {
        self.data.clone().unwrap_or_else(|| DataConfig::for_task(self.task))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let vocab = Vocabulary::standard().len();
        if self.model.vocab_size < vocab {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is below the task vocabulary {vocab}",
                self.model.vocab_size
            )));
        }
        let data = self.data();
        if data.train == 0 || data.validation == 0 || data.test == 0 {
            return Err(Error::InvalidConfig("train, validation and test sizes must be positive".into()));
        }
        Ok(())
    }

    /// Generates the task data and cuts it into base / train / validation / test.
    pub fn datasets(&self) -> Result<Datasets> {
        let d = self.data();
        let total = d.base_train + d.train + d.validation + d.test;
        let all = match self.task {
            Task::Ioi => crate::tasks::gen_ioi_with(total, self.train.seed, d.ioi_corruption)?,
            t => t.generate(total, self.train.seed)?,
        };
        let mut parts = crate::tasks::split(&all, &[d.base_train, d.train, d.validation, d.test])?.into_iter();
        let mut next = || parts.next().unwrap_or_default();
        Ok(Datasets { base: next(), train: next(), validation: next(), test: next() })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub base: Vec<TaskExample>,
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl Datasets {
    /// Examples used to fit the base model: the dedicated base split plus train.
    pub fn base_training(&self) -> Vec<TaskExample> {
        self.base.iter().chain(&self.train).cloned().collect()
    }
}

/// Adam moments for a flat list of parameter blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f64, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every block; `grads[i]` matches `params[i]`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let m = b1 * self.m[k][i] as f64 + (1.0 - b1) * gi;
                let v = b2 * self.v[k][i] as f64 + (1.0 - b2) * gi * gi;
                self.m[k][i] = m as f32;
                self.v[k][i] = v as f32;
                let update = self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step: step as usize, detail: format!("{what} is {v}") })
    }
}

/// Answer-position logits of a plain forward, widened to `f64`.
pub fn answer_logits<T: Real>(model: &Model<T>, tokens: &[usize], position: usize) -> Result<Vec<f64>> {
    model.check_tokens(tokens)?;
    let mut tape = Tape::new();
    let out = run(&mut tape, &model.frozen_vars(), tokens, &mut crate::model::NoHook, Readout::Position(position))?;
    Ok(tape.value(&out).data().iter().map(|v| v.to_f64().unwrap()).collect())
}

/// Mean task score of the plain model on `examples`.
pub fn base_score(model: &Model, examples: &[TaskExample], gt_margin: u32) -> Result<f64> {
    let vocab = Vocabulary::standard();
    let scores = examples
        .par_iter()
        .map(|e| task_score(&e.spec, &answer_logits(model, &e.clean, e.answer_position)?, vocab, gt_margin))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub validation_score: f64,
}

#[derive(Clone, Debug)]
pub struct BaseTrainResult {
    pub model: Model,
    pub epochs: Vec<BaseEpoch>,
    /// Validation task score of the returned model.
    pub final_score: f64,
}

fn target_weights(e: &TaskExample, vocab_size: usize) -> Result<Vec<f32>> {
    let targets = e.spec.target_tokens(Vocabulary::standard())?;
    let mut w = vec![0.0; vocab_size];
    for &t in &targets {
        w[t] = -1.0 / targets.len() as f32;
    }
    Ok(w)
}

/// Cross-entropy of one example against the uniform distribution over its
/// target tokens, with gradients for every weight.
fn base_example_grad(model: &Model, e: &TaskExample, scale: f32) -> Result<(f64, Vec<Tensor>)> {
    model.check_tokens(&e.clean)?;
    let mut tape = Tape::new();
    let weights = model.trainable_vars(&mut tape);
    let logits = run(&mut tape, &weights, &e.clean, &mut crate::model::NoHook, Readout::Position(e.answer_position))?;
    let logp = tape.log_softmax(&logits)?;
    let w = Tensor::vector(target_weights(e, model.config().vocab_size)?);
    let weighted = tape.mul(&logp, &w.into())?;
    let loss = tape.sum(&weighted)?;
    let value = tape.value(&loss).item() as f64;
    let mut grads = tape.backward(&loss, scale)?;
    let out = (0..model.weights().len())
        .map(|i| grads.take(ParamId(i)).unwrap_or_else(|| Tensor::zeros(model.weights()[i].shape().to_vec())))
        .collect();
    Ok((value, out))
}

/// Fits the model to the task's answer tokens with Adam.
pub fn base_train(
    mut model: Model,
    train: &[TaskExample],
    validation: &[TaskExample],
    config: &TrainConfig,
    gt_margin: u32,
) -> Result<BaseTrainResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phase = &config.base;
    let sizes: Vec<usize> = model.weights().iter().map(|w| w.numel()).collect();
    let mut adam = Adam::new(phase.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba5e);
    let mut epochs = Vec::new();
    let mut step = 0u64;
    for epoch in 0..phase.epochs {
        let mut losses = Vec::new();
        for batch in batches(train.len(), phase.batch_size, &mut rng) {
            let scale = 1.0 / batch.len() as f32;
            let per_example =
                batch.par_iter().map(|&i| base_example_grad(&model, &train[i], scale)).collect::<Result<Vec<_>>>()?;
            let mut total: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut loss = 0.0;
            for (l, grads) in &per_example {
                loss += l / batch.len() as f64;
                for (acc, g) in total.iter_mut().zip(grads) {
                    for (a, v) in acc.iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            check_finite(step, "base loss", loss)?;
            let mut params: Vec<&mut [f32]> =
                model.weights_mut().iter_mut().map(|w| std::sync::Arc::make_mut(w).data_mut()).collect();
            let grads: Vec<&[f32]> = total.iter().map(Vec::as_slice).collect();
            adam.step(&mut params, &grads);
            losses.push(loss);
            step += 1;
        }
        let validation_score = if validation.is_empty() { f64::NAN } else { base_score(&model, validation, gt_margin)? };
        epochs.push(BaseEpoch { epoch, loss: mean(&losses), validation_score });
        if phase.target_score.is_some_and(|t| validation_score > t) {
            break;
        }
    }
    let final_score = if validation.is_empty() { f64::NAN } else { base_score(&model, validation, gt_margin)? };
    Ok(BaseTrainResult { model, epochs, final_score })
}

/// Loss value broken into its terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean `KL(base ∥ clean)` at the answer position.
    pub kl: f64,
    /// Mean answer cross-entropy (0 unless enabled).
    pub answer_ce: f64,
    /// `Σ_g λ_g · mean expected L0`
    pub penalty: f64,
    /// Mean expected L0 of each family, in `Granularity::ALL` order.
    pub per_family: [f64; 6],
    pub total: f64,
}

/// The objective of one evaluated example: faithfulness at the answer
/// position plus the sparsity penalty of `masks`.
pub fn mask_loss<T: Real>(state: &StreamState<T>, answer_position: usize, masks: &MaskSet, lambdas: &Lambdas) -> LossParts {
    let row = |t: &Tensor<T>| t.row(answer_position).iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>();
    let kl = kl_from_logits(&row(&state.base_logits), &row(&state.clean_logits));
    let p = normalized_l0(masks, lambdas);
    LossParts { kl, answer_ce: 0.0, penalty: p.total, per_family: p.per_family, total: kl + p.total }
}

/// An example with its mask-independent streams cached.
#[derive(Clone, Debug)]
pub struct PreparedExample<T: Real = f32> {
    pub clean: Vec<usize>,
    pub answer_position: usize,
    pub corrupt_sites: Vec<LayerSites<T>>,
    pub spec: AnswerSpec,
    /// Base logits at the answer position.
    pub base_logits: Vec<f64>,
    /// Base log-probabilities at the answer position.
    pub base_logprobs: Vec<f64>,
    /// `−1/|targets|` on each target token, 0 elsewhere.
    pub target_weights: Vec<T>,
}

pub fn prepare_examples<T: Real>(model: &Model<T>, examples: &[TaskExample]) -> Result<Vec<PreparedExample<T>>> {
    examples
        .par_iter()
        .map(|e| {
            e.validate()?;
            let r = prepare(model, &e.clean, &e.corrupt)?;
            let base: Vec<f64> = r.base_logits.row(e.answer_position).iter().map(|v| v.to_f64().unwrap()).collect();
            let weights = target_weights(e, model.config().vocab_size)?;
            Ok(PreparedExample {
                clean: e.clean.clone(),
                answer_position: e.answer_position,
                corrupt_sites: r.corrupt_sites,
                spec: e.spec.clone(),
                base_logprobs: log_softmax(&base),
                base_logits: base,
                target_weights: weights.into_iter().map(|w| T::lit(w as f64)).collect(),
            })
        })
        .collect()
}

/// Per-example task loss and its gradient with respect to the gate values.
fn example_gate_grad<T: Real>(
    model: &Model<T>,
    layout: &NodeLayout,
    ex: &PreparedExample<T>,
    gates: &[T],
    ce_weight: f64,
    scale: T,
) -> Result<(f64, f64, Vec<T>)> {
    let mut tape = Tape::new();
    let site_gates = SiteGates::tracked(&mut tape, layout, gates);
    let logits =
        clean_stream(&mut tape, model, &ex.corrupt_sites, &ex.clean, &site_gates, Readout::Position(ex.answer_position))?;
    let logq = tape.log_softmax(&logits)?;
    let p: Vec<T> = ex.base_logprobs.iter().map(|&lp| T::lit(-lp.exp())).collect();
    let neg_cross = tape.mul(&logq, &Tensor::vector(p).into())?;
    let cross = tape.sum(&neg_cross)?;
    let entropy_term: f64 = ex.base_logprobs.iter().map(|&lp| lp.exp() * lp).sum();
    let kl = tape.value(&cross).item().to_f64().unwrap() + entropy_term;
    let (loss, ce) = if ce_weight > 0.0 {
        let w = tape.mul(&logq, &Tensor::vector(ex.target_weights.clone()).into())?;
        let ce = tape.sum(&w)?;
        let ce_value = tape.value(&ce).item().to_f64().unwrap();
        let weighted = tape.scale(&ce, T::lit(ce_weight))?;
        (tape.add(&cross, &weighted)?, ce_value)
    } else {
        (cross, 0.0)
    };
    let grads = tape.backward(&loss, scale)?;
    Ok((kl, ce, flatten_gate_grads(layout, &grads)))
}

/// Batch objective and its gradient with respect to `log_alpha`. With
/// `logistic_noise = None` gates take their deterministic values.
#[allow(clippy::too_many_arguments)]
pub fn mask_objective<T: Real>(
    model: &Model<T>,
    batch: &[&PreparedExample<T>],
    log_alpha: &[T],
    logistic_noise: Option<&[T]>,
    constants: &GateConstants,
    lambdas: &Lambdas,
    ce_weight: f64,
) -> Result<(LossParts, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layout = NodeLayout::new(model.config());
    let n = layout.len();
    let mut gate_tape = Tape::new();
    let la = gate_tape.param(ParamId(0), Tensor::vector(log_alpha.to_vec()));
    let m = gate_on_tape(&mut gate_tape, &la, logistic_noise, constants)?;
    let gate_values = gate_tape.value(&m).data().to_vec();

    let scale = T::one() / T::from_usize(batch.len()).unwrap();
    let per_example = batch
        .par_iter()
        .map(|ex| example_gate_grad(model, &layout, ex, &gate_values, ce_weight, scale))
        .collect::<Result<Vec<_>>>()?;
    let mut dm = vec![T::zero(); n];
    let (mut kl, mut ce) = (0.0, 0.0);
    for (k, c, g) in &per_example {
        kl += k / batch.len() as f64;
        ce += c / batch.len() as f64;
        for (a, v) in dm.iter_mut().zip(g) {
            *a = *a + *v;
        }
    }

    // surrogate Σ m ⊙ dL/dm + Σ w ⊙ expected_l0, with w = λ_g / |family g|
    let dm_var = Tensor::vector(dm).into();
    let chained = gate_tape.mul(&m, &dm_var)?;
    let chained = gate_tape.sum(&chained)?;
    let l0 = expected_l0_on_tape(&mut gate_tape, &la, constants)?;
    let mut weights = vec![T::zero(); n];
    for (i, w) in weights.iter_mut().enumerate() {
        let g = layout.node_at(i).granularity;
        *w = T::lit(lambdas.get(g) / layout.family_total(g) as f64);
    }
    let penalty = gate_tape.mul(&l0, &Tensor::vector(weights).into())?;
    let penalty = gate_tape.sum(&penalty)?;
    let surrogate = gate_tape.add(&chained, &penalty)?;
    let grad = gate_tape.backward(&surrogate, T::one())?.take(ParamId(0)).expect("log_alpha is a leaf");

    let l0_values = gate_tape.value(&l0).data();
    let mut per_family = [0.0; 6];
    for (slot, g) in per_family.iter_mut().zip(Granularity::ALL) {
        let sum: f64 =
            (0..layout.config().n_layers).flat_map(|l| layout.range(l, g)).map(|i| l0_values[i].to_f64().unwrap()).sum();
        *slot = sum / layout.family_total(g) as f64;
    }
    let penalty_value = gate_tape.value(&penalty).item().to_f64().unwrap();
    let total = kl + ce_weight * ce + penalty_value;
    Ok((LossParts { kl, answer_ce: ce, penalty: penalty_value, per_family, total }, grad.into_data()))
}

/// Fraction of gates in each family that would binarize to 0.
pub fn live_sparsity(masks: &MaskSet) -> [f64; 6] {
    let layout = masks.layout();
    let mut out = [0.0; 6];
    for (slot, g) in out.iter_mut().zip(Granularity::ALL) {
        let off = (0..layout.config().n_layers)
            .flat_map(|l| masks.family(l, g).iter())
            .filter(|&&a| !binarize(a as f64, &masks.constants))
            .count();
        *slot = off as f64 / layout.family_total(g) as f64;
    }
    out
}

/// One line of the discovery log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step { step: u64, epoch: usize, loss: LossParts, live_sparsity: [f64; 6] },
    Eval { step: u64, epoch: usize, validation: LossParts, live_sparsity: [f64; 6] },
}

/// Optimizer position and best validation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub step: u64,
    pub optimizer: Adam,
    /// Lowest validation objective seen and the `log_alpha` that reached it.
    pub best: Option<(f64, Vec<f32>)>,
}

#[derive(Clone, Debug)]
pub struct DiscoverResult {
    pub masks: MaskSet,
    pub log: Vec<LogEntry>,
    pub state: RunState,
}

/// Validation objective with deterministic gates.
pub fn validation_loss(model: &Model, prepared: &[PreparedExample], masks: &MaskSet, lambdas: &Lambdas) -> Result<LossParts> {
    let refs: Vec<&PreparedExample> = prepared.iter().collect();
    Ok(mask_objective(model, &refs, &masks.log_alpha, None, &masks.constants, lambdas, 0.0)?.0)
}

/// Trains `log_alpha` on `train` with the model frozen.
pub fn discover(
    model: &Model,
    train: &[TaskExample],
    validation: &[TaskExample],
    config: &TrainConfig,
) -> Result<DiscoverResult> {
    discover_with(model, train, validation, config, |_| {})
}

/// [`discover`] with a callback invoked on each log entry as it is produced.
pub fn discover_with(
    model: &Model,
    train: &[TaskExample],
    validation: &[TaskExample],
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<DiscoverResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let phase = &config.mask;
    let prepared = prepare_examples(model, train)?;
    let prepared_val = prepare_examples(model, validation)?;
    let mut masks = MaskSet::filled(model.config(), config.gates, phase.init_log_alpha);
    let n = masks.len();
    let lambdas = config.effective_lambdas(model.config());
    let noise = NoiseStream::new(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = RunState { step: 0, optimizer: Adam::new(phase.learning_rate, &[n]), best: None };
    let mut log = Vec::new();
    let mut push = |entry: LogEntry, log: &mut Vec<LogEntry>| {
        on_log(&entry);
        log.push(entry);
    };

    for epoch in 0..phase.epochs {
        for batch in batches(prepared.len(), phase.batch_size, &mut rng) {
            let refs: Vec<&PreparedExample> = batch.iter().map(|&i| &prepared[i]).collect();
            let u: Vec<f32> = step_noise(noise, state.step, n).into_iter().map(|v| v as f32).collect();
            let (loss, grad) =
                mask_objective(model, &refs, &masks.log_alpha, Some(&u), &config.gates, &lambdas, phase.answer_ce_weight)?;
            check_finite(state.step, "mask loss", loss.total)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step: state.step as usize, detail: "non-finite gradient".into() });
            }
            state.optimizer.step(&mut [&mut masks.log_alpha], &[&grad]);
            push(LogEntry::Step { step: state.step, epoch, loss, live_sparsity: live_sparsity(&masks) }, &mut log);
            state.step += 1;
        }
        let last = epoch + 1 == phase.epochs;
        if !prepared_val.is_empty() && ((epoch + 1) % phase.eval_every == 0 || last) {
            let v = validation_loss(model, &prepared_val, &masks, &lambdas)?;
            if state.best.as_ref().is_none_or(|(b, _)| v.total < *b) {
                state.best = Some((v.total, masks.log_alpha.clone()));
            }
            push(LogEntry::Eval { step: state.step, epoch, validation: v, live_sparsity: live_sparsity(&masks) }, &mut log);
        }
    }
    Ok(DiscoverResult { masks, log, state })
}
