//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test -p circuitscope --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use circuitscope::checkpoint::Checkpoint;
use circuitscope::extraction::{base_report, circuit_kl, evaluate_prepared, extract, Circuit};
use circuitscope::gates::{binarize, enforce_hierarchy, expected_l0, logistic, sample_gate, GateConstants, Lambdas, MaskSet};
use circuitscope::metrics::{edge_count, kl_from_logits, FamilyStats};
use circuitscope::model::{logits, Granularity, Model, ModelConfig, NodeLayout};
use circuitscope::oracle::{active_coarse, coarse_node_set, coarse_projection, exhaustive_search_prepared, DEFAULT_EPSILON};
use circuitscope::tasks::{Task, TaskExample, Vocabulary};
use circuitscope::training::{base_train, discover, mask_objective, prepare_examples, ExperimentConfig, PreparedExample};
use circuitscope::twostream::run_with_gates;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn vocab() -> usize {
    Vocabulary::standard().len()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gate_distribution() -> Outcome {
    let c = GateConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut worst = 0.0f64;
    for la in [-2.0, 0.0, 2.0] {
        let (mut zeros, mut ones) = (0usize, 0usize);
        for _ in 0..n {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let m = sample_gate(la, &c, u).unwrap();
            zeros += (m == 0.0) as usize;
            ones += (m == 1.0) as usize;
        }
        let p0 = sigmoid(c.beta * (-c.gamma / c.zeta).ln() - la);
        let p1 = sigmoid(la - c.beta * ((1.0 - c.gamma) / (c.zeta - 1.0)).ln());
        let (e0, e1) = (zeros as f64 / n as f64, ones as f64 / n as f64);
        let errs = [
            (e0 - p0).abs(),
            (e1 - p1).abs(),
            ((1.0 - e0 - e1) - (1.0 - p0 - p1)).abs(),
            (expected_l0(la, &c) - (1.0 - e0)).abs(),
        ];
        worst = errs.iter().fold(worst, |a, &b| a.max(b));
    }
    outcome(worst < 0.01, format!("max abs error {worst:.4}"))
}

/// Batch loss recomputed from scalar gate formulas and the plain two-stream
/// runner, with no tape involved.
fn scalar_loss(model: &Model<f64>, data: &[TaskExample], la: &[f64], u: &[f64], lambdas: &Lambdas) -> f64 {
    let c = GateConstants::default();
    let gates: Vec<f64> = la.iter().zip(u).map(|(&a, &u)| sample_gate(a, &c, u).unwrap()).collect();
    let kl: f64 = data
        .iter()
        .map(|e| {
            let s = run_with_gates(model, &gates, &e.clean, &e.corrupt).unwrap();
            kl_from_logits(s.base_logits.row(e.answer_position), s.clean_logits.row(e.answer_position))
        })
        .sum::<f64>()
        / data.len() as f64;
    let layout = NodeLayout::new(model.config());
    let penalty: f64 = Granularity::ALL
        .iter()
        .map(|&g| {
            let r = layout.range(0, g);
            lambdas.get(g) * r.clone().map(|i| expected_l0(la[i], &c)).sum::<f64>() / r.len() as f64
        })
        .sum();
    kl + penalty
}

fn gradient_fidelity() -> Outcome {
    let config = ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, d_mlp: 16, vocab_size: vocab(), max_seq_len: 32 };
    let model = Model::init(config, 21).unwrap().cast::<f64>();
    let data = Task::Gt.generate(4, 22).unwrap();
    let c = GateConstants::default();
    let n = config.node_count();
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let la: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.5)).collect();
    // finite differences are meaningless across the clamp kinks
    let stretched = |a: f64, u: f64| sigmoid(((u / (1.0 - u)).ln() + a) / c.beta) * (c.zeta - c.gamma) + c.gamma;
    let u: Vec<f64> = la
        .iter()
        .map(|&a| loop {
            let u: f64 = rng.random_range(0.02..0.98);
            let near = |v: f64| v.abs() < 1e-2 || (v - 1.0).abs() < 1e-2;
            if ![a - h, a, a + h].iter().any(|&x| near(stretched(x, u))) {
                break u;
            }
        })
        .collect();
    let lambdas = Lambdas::default();
    let prepared = prepare_examples(&model, &data).unwrap();
    let refs: Vec<&PreparedExample<f64>> = prepared.iter().collect();
    let (_, grad) = mask_objective(&model, &refs, &la, Some(&logistic(&u)), &c, &lambdas, 0.0).unwrap();
    let (mut worst_rel, mut worst_abs, mut largest) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for i in 0..n {
        let (mut plus, mut minus) = (la.clone(), la.clone());
        plus[i] += h;
        minus[i] -= h;
        let fd = (scalar_loss(&model, &data, &plus, &u, &lambdas) - scalar_loss(&model, &data, &minus, &u, &lambdas)) / (2.0 * h);
        let diff = (grad[i] - fd).abs();
        worst_abs = worst_abs.max(diff);
        largest = largest.max(fd.abs());
        if diff >= 1e-7 {
            let rel = diff / fd.abs();
            worst_rel = worst_rel.max(rel);
            failures += (rel >= 1e-4) as usize;
        }
    }
    outcome(
        failures == 0 && largest > 1e-3,
        format!("{n} gates, largest |grad| {largest:.2e}, worst abs error {worst_abs:.1e}, worst relative {worst_rel:.1e}, {failures} over tolerance"),
    )
}

fn identity_contracts() -> Outcome {
    let config = ModelConfig::toy(vocab());
    let model = Model::init(config, 31).unwrap();
    let mut worst_kl = 0.0f64;
    let mut scores_equal = true;
    let mut worst_zero = 0.0f64;
    for task in [Task::Gt, Task::Ioi, Task::Gp] {
        let data = task.generate(20, 32).unwrap();
        let prepared = prepare_examples(&model, &data).unwrap();
        let full = evaluate_prepared(&model, &prepared, &Circuit::full(&config), 0).unwrap();
        let base = base_report(&config, &prepared, 0).unwrap();
        worst_kl = worst_kl.max(full.kl_divergence);
        scores_equal &= full.task_score().map(f64::to_bits) == base.task_score().map(f64::to_bits);
        let zeros = vec![0.0f32; config.node_count()];
        for e in &data {
            let s = run_with_gates(&model, &zeros, &e.clean, &e.corrupt).unwrap();
            let corrupt = logits(&model, &e.corrupt).unwrap();
            for (a, b) in s.clean_logits.row(e.answer_position).iter().zip(corrupt.row(e.answer_position)) {
                worst_zero = worst_zero.max((a - b).abs() as f64);
            }
        }
    }
    outcome(
        worst_kl < 1e-9 && scores_equal && worst_zero < 1e-5,
        format!("full-circuit KL {worst_kl:.1e}, scores bit-equal {scores_equal}, all-off max logit gap {worst_zero:.1e}"),
    )
}

fn hierarchy() -> Outcome {
    let config = ModelConfig::toy(vocab());
    let layout = NodeLayout::new(&config);
    let c = GateConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut violations, mut non_idempotent) = (0usize, 0usize);
    for _ in 0..1000 {
        let threshold = c.threshold() as f32;
        let spread: f32 = rng.random_range(0.5..6.0);
        let la: Vec<f32> = (0..layout.len()).map(|_| threshold + rng.random_range(-spread..spread)).collect();
        let masks = MaskSet::from_values(&config, c, la).unwrap();
        let circuit = extract(&masks);
        let bits = circuit.bits();
        violations += (0..bits.len()).filter(|&i| layout.parent_index(i).is_some_and(|p| bits[i] && !bits[p])).count();
        let raw: Vec<bool> = masks.log_alpha.iter().map(|&v| binarize(v as f64, &c)).collect();
        let once = enforce_hierarchy(&raw, |i| layout.parent_index(i));
        non_idempotent += (enforce_hierarchy(&once, |i| layout.parent_index(i)) != once) as usize;
    }
    outcome(violations == 0 && non_idempotent == 0, format!("{violations} violations, {non_idempotent} non-idempotent"))
}

fn micro_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::toy(Task::Gt);
    c.model = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_mlp: 32, vocab_size: vocab(), max_seq_len: 64 };
    c.train.base.epochs = 5;
    c.train.mask.scale_lambdas = true;
    c
}

fn trained(c: &ExperimentConfig) -> (Model, circuitscope::training::Datasets, f64) {
    let data = c.datasets().unwrap();
    let r =
        base_train(Model::init(c.model, c.train.seed).unwrap(), &data.base_training(), &data.validation, &c.train, 0).unwrap();
    (r.model, data, r.final_score)
}

fn oracle_agreement() -> Outcome {
    let c = micro_experiment();
    let (model, data, _) = trained(&c);
    let masks = discover(&model, &data.train, &data.validation, &c.train).unwrap().masks;
    let circuit = extract(&masks);
    let nodes = coarse_node_set(model.config());
    let prepared = prepare_examples(&model, &data.test).unwrap();
    let coarse = coarse_projection(&circuit, &nodes).unwrap();
    let kl = circuit_kl(&model, &prepared, &coarse).unwrap();
    let kept = active_coarse(&circuit, &nodes).len();
    let oracle = exhaustive_search_prepared(&model, &prepared, &nodes, DEFAULT_EPSILON).unwrap();
    outcome(
        kl <= DEFAULT_EPSILON && oracle.feasible && kept <= 2 * oracle.minimal_size,
        format!("coarse KL {kl:.4}, {kept} coarse nodes, exhaustive minimum {}", oracle.minimal_size),
    )
}

fn toy_discovery() -> Outcome {
    let c = ExperimentConfig::toy(Task::Gt);
    let (model, data, validation_score) = trained(&c);
    if validation_score <= 0.5 {
        return outcome(false, format!("base GT score {validation_score:.3} did not exceed 0.5"));
    }
    let masks = discover(&model, &data.train, &data.validation, &c.train).unwrap().masks;
    let prepared = prepare_examples(&model, &data.test).unwrap();
    let base = base_report(model.config(), &prepared, 0).unwrap();
    let m = evaluate_prepared(&model, &prepared, &extract(&masks), 0).unwrap();
    let sparsity = |g: Granularity| m.families.iter().find(|f| f.granularity == g).unwrap().sparsity;
    let neuron = [Granularity::AttnNeuron, Granularity::MlpHidden, Granularity::MlpOutput].map(sparsity);
    let (b, s) = (base.gt_score.unwrap(), m.gt_score.unwrap());
    let pass = neuron.iter().all(|&x| x >= 0.5) && m.kl_divergence <= 0.1 && (b - s).abs() <= 0.05;
    outcome(
        pass,
        format!(
            "neuron sparsity {:.0}%/{:.0}%/{:.0}%, KL {:.4}, GT score {s:.3} vs base {b:.3}",
            neuron[0] * 100.0,
            neuron[1] * 100.0,
            neuron[2] * 100.0,
            m.kl_divergence
        ),
    )
}

/// Counts residual-stream edges by simulating read and write times: the
/// embedding writes first, each layer's heads read then write, then its
/// MLP, and the unembedding reads last.
fn brute_force_edges(layers: usize, heads: usize) -> u64 {
    let mut parts: Vec<(u32, u32)> = vec![(0, 1)];
    for l in 0..layers as u32 {
        parts.extend(std::iter::repeat_n((4 * l + 2, 4 * l + 3), heads));
        parts.push((4 * l + 4, 4 * l + 5));
    }
    parts.push((4 * layers as u32 + 6, u32::MAX));
    let mut edges = 0;
    for (i, a) in parts.iter().enumerate() {
        for (j, b) in parts.iter().enumerate() {
            edges += (i != j && a.1 < b.0) as u64;
        }
    }
    edges
}

fn edge_accounting() -> Outcome {
    let mut mismatches = Vec::new();
    for l in 1..=3 {
        for h in 1..=3 {
            let config = ModelConfig { n_layers: l, n_heads: h, d_model: 12, d_mlp: 8, vocab_size: 5, max_seq_len: 4 };
            let got = edge_count(&vec![true; config.node_count()], &config).unwrap().total;
            if got != brute_force_edges(l, h) {
                mismatches.push(format!("L{l}H{h}"));
            }
        }
    }
    let fixture = brute_force_edges(2, 2);
    let sparsity = FamilyStats::new(Granularity::Head, 21, 144).sparsity;
    let pct = format!("{:.1}", sparsity * 100.0);
    outcome(
        mismatches.is_empty() && fixture == 26 && pct == "85.4" && sparsity == 1.0 - 21.0 / 144.0,
        format!("mismatches {mismatches:?}, L2H2 edges {fixture}, 21/144 heads -> {pct}% sparsity"),
    )
}

fn determinism() -> Outcome {
    let mut c = ExperimentConfig::toy(Task::Gt);
    c.train.base.epochs = 1;
    c.train.mask.epochs = 3;
    let data = c.datasets().unwrap();
    let model = Model::init(c.model, c.train.seed).unwrap();
    let run = || {
        let masks = discover(&model, &data.train, &data.validation, &c.train).unwrap().masks;
        let mut ck = Checkpoint::new(c.model);
        ck.put_masks(&masks).unwrap();
        ck.to_bytes().unwrap()
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("{} bytes, identical {}", a.len(), a == b))
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 8] = [
        ("1 gate distribution", gate_distribution, Duration::from_secs(10)),
        ("2 gradient fidelity", gradient_fidelity, Duration::from_secs(60)),
        ("3 identity and endpoint contracts", identity_contracts, Duration::MAX),
        ("4 hierarchy", hierarchy, Duration::MAX),
        ("5 oracle agreement", oracle_agreement, Duration::from_secs(600)),
        ("6 toy discovery efficacy", toy_discovery, Duration::from_secs(1200)),
        ("7 edge accounting", edge_accounting, Duration::MAX),
        ("8 determinism", determinism, Duration::MAX),
    ];
    let start = Instant::now();
    let mut all = true;
    let mut report = |name: &str, pass: bool, detail: &str| {
        all &= pass;
        println!("{} criterion {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    for (name, f, budget) in criteria {
        let t = Instant::now();
        let o = f();
        let elapsed = t.elapsed();
        let in_budget = elapsed < budget;
        let detail = format!("{} ({:.1} s{})", o.detail, elapsed.as_secs_f64(), if in_budget { "" } else { ", over budget" });
        report(name, o.pass && in_budget, &detail);
    }
    let total = start.elapsed();
    report("9 suite runtime", total < Duration::from_secs(45 * 60), &format!("{:.1} s total", total.as_secs_f64()));
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
