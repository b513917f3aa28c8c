//! Reverse-mode differentiation over a define-by-run tape.
//!
//! Values come in two kinds. A [`Var::Const`] is an eagerly computed tensor
//! with no history; any primitive applied only to constants yields another
//! constant and leaves no trace on the tape. A [`Var::Node`] is a tape entry
//! that depends on at least one trainable parameter. The tape therefore holds
//! exactly the subgraph between the parameters and whatever is computed from
//! them, and frozen weights never receive gradient storage.
//!
//! ```
//! use circuitscope::engine::{ParamId, Tape};
//! use circuitscope::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let m = tape.param(ParamId(0), Tensor::scalar(0.3));
//! let c = tape.constant(Tensor::scalar(4.0));
//! let loss = tape.mul(&m, &c).unwrap();
//! let grads = tape.backward(&loss, 1.0).unwrap();
//! assert_eq!(grads.get(ParamId(0)).unwrap().item(), 4.0);
//! ```

pub(crate) mod kernels;

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tape/parameter mismatch: {0}")]
    TapeMismatch(String),
}

type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Identifies a trainable leaf. Several leaves may share an id; their
/// gradients are summed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub enum Var<T: Real = f32> {
    Const(Arc<Tensor<T>>),
    Node(usize),
}

impl<T: Real> Var<T> {
    pub fn is_tracked(&self) -> bool {
        matches!(self, Var::Node(_))
    }
}

impl<T: Real> From<Tensor<T>> for Var<T> {
    fn from(t: Tensor<T>) -> Self {
        Var::Const(Arc::new(t))
    }
}

impl<T: Real> From<Arc<Tensor<T>>> for Var<T> {
    fn from(t: Arc<Tensor<T>>) -> Self {
        Var::Const(t)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Param(ParamId),
    MatMul(Var<T>, Var<T>),
    Transpose(Var<T>),
    Add(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Affine { x: Var<T>, scale: T, shift: T },
    Gather { table: Var<T>, ids: Arc<[usize]> },
    LayerNorm { x: Var<T>, gain: Var<T>, bias: Var<T>, eps: T },
    Gelu(Var<T>),
    Softmax { x: Var<T>, causal: bool },
    LogSoftmax(Var<T>),
    Sigmoid(Var<T>),
    Log(Var<T>),
    Clamp { x: Var<T>, lo: T, hi: T },
    SliceRows { x: Var<T>, start: usize, len: usize },
    SliceCols { x: Var<T>, start: usize, len: usize },
    ConcatCols(Vec<Var<T>>),
    Sum(Var<T>),
    Pick { x: Var<T>, idx: Arc<[usize]> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Sum(_) => "sum",
            Op::Pick { .. } => "pick",
        }
    }

    fn inputs(&self) -> Vec<&Var<T>> {
        match self {
            Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(x)
            | Op::Gelu(x)
            | Op::LogSoftmax(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Affine { x, .. }
            | Op::Softmax { x, .. }
            | Op::Clamp { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pick { x, .. } => vec![x],
            Op::Gather { table, .. } => vec![table],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::ConcatCols(parts) => parts.iter().collect(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of the tracked primitives of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to each trainable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real = f32> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn take(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.by_param.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.by_param.iter()
    }
}

/// Runs `build` on a fresh tape and returns the values of its outputs
/// together with the tape for a later backward sweep.
pub fn forward<T, F>(build: F) -> Result<(Vec<Tensor<T>>, Tape<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>) -> Result<Vec<Var<T>>>,
{
    let mut tape = Tape::new();
    let outputs = build(&mut tape)?;
    let values = outputs.iter().map(|v| tape.value(v).clone()).collect();
    Ok((values, tape))
}

fn shape_err(op: &'static str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { op, detail }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Ok(Broadcast::Row);
    }
    Err(shape_err(op, format!("cannot broadcast {b:?} onto {a:?}")))
}

fn matrix_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.rank() {
        1 | 2 => Ok((t.rows(), t.cols())),
        r => Err(shape_err(op, format!("expected rank 1 or 2, got rank {r}"))),
    }
}

/// Computes the output of `op` from its input values.
fn evaluate<'a, T: Real>(op: &'a Op<T>, get: impl Fn(&'a Var<T>) -> &'a Tensor<T>) -> Result<Tensor<T>> {
    let name = op.name();
    let out = match op {
        Op::Param(_) => unreachable!("params carry their own value"),
        Op::MatMul(a, b) => {
            let (a, b) = (get(a), get(b));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![T::zero(); m * n];
            kernels::matmul_acc(a.data(), b.data(), &mut c, m, k, n);
            Tensor::new(vec![m, n], c)?
        }
        Op::Transpose(x) => {
            let x = get(x);
            if x.rank() != 2 {
                return Err(shape_err(name, format!("{:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            Tensor::new(vec![c, r], kernels::transpose(x.data(), r, c))?
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (get(a), get(b));
            let kind = broadcast_kind(name, a.shape(), b.shape())?;
            let is_add = matches!(op, Op::Add(..));
            let f = |x: T, y: T| if is_add { x + y } else { x * y };
            let bd = b.data();
            let data: Vec<T> = match kind {
                Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Broadcast::Scalar => a.data().iter().map(|&x| f(x, bd[0])).collect(),
                Broadcast::Row => {
                    let c = bd.len();
                    a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect()
                }
            };
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::Affine { x, scale, shift } => {
            let (s, b) = (*scale, *shift);
            get(x).map(|v| s * v + b)
        }
        Op::Gather { table, ids } => {
            let table = get(table);
            if table.rank() != 2 {
                return Err(shape_err(name, format!("table {:?}", table.shape())));
            }
            let (rows, cols) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids.iter() {
                if id >= rows {
                    return Err(shape_err(name, format!("index {id} >= {rows}")));
                }
                data.extend_from_slice(table.row(id));
            }
            Tensor::new(vec![ids.len(), cols], data)?
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (x, gain, bias) = (get(x), get(gain), get(bias));
            let (rows, cols) = matrix_dims(name, x)?;
            if gain.numel() != cols || bias.numel() != cols {
                return Err(shape_err(name, format!("affine params vs {cols} columns")));
            }
            let stats = kernels::layer_norm_stats(x.data(), rows, cols, *eps);
            let mut data = Vec::with_capacity(x.numel());
            for (i, (mean, inv)) in stats.into_iter().enumerate() {
                for j in 0..cols {
                    let xhat = (x.data()[i * cols + j] - mean) * inv;
                    data.push(xhat * gain.data()[j] + bias.data()[j]);
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Gelu(x) => get(x).map(kernels::gelu),
        Op::Sigmoid(x) => get(x).map(kernels::sigmoid),
        Op::Log(x) => get(x).map(|v| v.ln()),
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            get(x).map(|v| v.max(lo).min(hi))
        }
        Op::Softmax { x, causal } => {
            let x = get(x);
            let (rows, cols) = matrix_dims(name, x)?;
            Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), rows, cols, *causal))?
        }
        Op::LogSoftmax(x) => {
            let x = get(x);
            let (rows, cols) = matrix_dims(name, x)?;
            Tensor::new(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), rows, cols))?
        }
        Op::SliceRows { x, start, len } => {
            let x = get(x);
            if x.rank() != 2 || start + len > x.shape()[0] {
                return Err(shape_err(name, format!("rows {start}+{len} of {:?}", x.shape())));
            }
            let c = x.shape()[1];
            Tensor::new(vec![*len, c], x.data()[start * c..(start + len) * c].to_vec())?
        }
        Op::SliceCols { x, start, len } => {
            let x = get(x);
            if x.rank() != 2 || start + len > x.shape()[1] {
                return Err(shape_err(name, format!("cols {start}+{len} of {:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, *len], data)?
        }
        Op::ConcatCols(parts) => {
            let parts: Vec<&Tensor<T>> = parts.iter().map(&get).collect();
            let Some(first) = parts.first() else {
                return Err(shape_err(name, "no inputs".into()));
            };
            let rows = first.rows();
            if parts.iter().any(|p| p.rank() != 2 || p.shape()[0] != rows) {
                return Err(shape_err(name, "inputs must be rank 2 with equal rows".into()));
            }
            let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in &parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::new(vec![rows, total], data)?
        }
        Op::Sum(x) => Tensor::scalar(get(x).data().iter().copied().sum()),
        Op::Pick { x, idx } => {
            let x = get(x);
            let (rows, cols) = matrix_dims(name, x)?;
            if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
                return Err(shape_err(name, format!("{} indices into {:?}", idx.len(), x.shape())));
            }
            Tensor::vector(idx.iter().enumerate().map(|(i, &j)| x.data()[i * cols + j]).collect())
        }
    };
    if !out.is_finite() {
        return Err(EngineError::NonFinite { op: name });
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of tracked entries.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value<'a>(&'a self, v: &'a Var<T>) -> &'a Tensor<T> {
        match v {
            Var::Const(t) => t,
            Var::Node(i) => &self.nodes[*i].value,
        }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var::Const(Arc::new(t))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var<T> {
        self.nodes.push(Node { value, op: Op::Param(id) });
        Var::Node(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op<T>) -> Result<Var<T>> {
        let value = {
            let nodes = &self.nodes;
            evaluate(&op, |v| match v {
                Var::Const(t) => t,
                Var::Node(i) => &nodes[*i].value,
            })?
        };
        if op.inputs().iter().any(|v| v.is_tracked()) {
            self.nodes.push(Node { value, op });
            Ok(Var::Node(self.nodes.len() - 1))
        } else {
            Ok(Var::Const(Arc::new(value)))
        }
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::MatMul(a.clone(), b.clone()))
    }

    pub fn transpose(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Transpose(x.clone()))
    }

    /// Elementwise sum; `b` may also be a scalar or a row vector broadcast
    /// over the rows of `a`.
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Add(a.clone(), b.clone()))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Mul(a.clone(), b.clone()))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: &Var<T>, scale: T, shift: T) -> Result<Var<T>> {
        self.apply(Op::Affine { x: x.clone(), scale, shift })
    }

    pub fn scale(&mut self, x: &Var<T>, s: T) -> Result<Var<T>> {
        self.affine(x, s, T::zero())
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: &Var<T>, ids: &[usize]) -> Result<Var<T>> {
        self.apply(Op::Gather { table: table.clone(), ids: ids.into() })
    }

    pub fn layer_norm(&mut self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>, eps: T) -> Result<Var<T>> {
        self.apply(Op::LayerNorm { x: x.clone(), gain: gain.clone(), bias: bias.clone(), eps })
    }

    pub fn gelu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Gelu(x.clone()))
    }

    pub fn softmax(&mut self, x: &Var<T>, causal: bool) -> Result<Var<T>> {
        self.apply(Op::Softmax { x: x.clone(), causal })
    }

    pub fn log_softmax(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::LogSoftmax(x.clone()))
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Sigmoid(x.clone()))
    }

    pub fn log(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Log(x.clone()))
    }

    pub fn clamp(&mut self, x: &Var<T>, lo: T, hi: T) -> Result<Var<T>> {
        self.apply(Op::Clamp { x: x.clone(), lo, hi })
    }

    pub fn slice_rows(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        self.apply(Op::SliceRows { x: x.clone(), start, len })
    }

    pub fn slice_cols(&mut self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        self.apply(Op::SliceCols { x: x.clone(), start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var<T>]) -> Result<Var<T>> {
        self.apply(Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.apply(Op::Sum(x.clone()))
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let n = T::from_usize(self.value(x).numel()).unwrap();
        let s = self.sum(x)?;
        self.scale(&s, T::one() / n)
    }

    /// Selects `x[i, idx[i]]` for every row `i`.
    pub fn pick(&mut self, x: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        self.apply(Op::Pick { x: x.clone(), idx: idx.into() })
    }

    /// Recomputes every tracked entry from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Param(_) => node.value.clone(),
                _ => {
                    let done = &out;
                    evaluate(&node.op, |v| match v {
                        Var::Const(t) => t,
                        Var::Node(i) => &done[*i],
                    })?
                }
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Recorded values in tape order, for comparison against [`Tape::replay`].
    pub fn recorded(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Back-propagates `seed · ∂output` to every trainable leaf. `output`
    /// must hold a single value.
    pub fn backward(&self, output: &Var<T>, seed: T) -> Result<Gradients<T>> {
        let root = match output {
            Var::Const(_) => return Ok(Gradients::default()),
            Var::Node(i) => *i,
        };
        let Some(node) = self.nodes.get(root) else {
            return Err(EngineError::TapeMismatch(format!("output node {root} not on a tape of {} entries", self.nodes.len())));
        };
        if node.value.numel() != 1 {
            return Err(EngineError::TapeMismatch(format!("backward needs a scalar output, got shape {:?}", node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(node.value.shape().to_vec(), seed));
        let mut out = Gradients::default();

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => add_into(acc.data_mut(), g.data()),
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                op => self.backprop(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op<T>, y: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if a.is_tracked() {
                    let mut da = Tensor::zeros(vec![m, k]);
                    kernels::matmul_nt_acc(gd, bv.data(), da.data_mut(), m, n, k);
                    accumulate(grads, a, da);
                }
                if b.is_tracked() {
                    let mut db = Tensor::zeros(vec![k, n]);
                    kernels::matmul_tn_acc(av.data(), gd, db.data_mut(), m, k, n);
                    accumulate(grads, b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (g.shape()[0], g.shape()[1]);
                accumulate(grads, x, Tensor::new(vec![c, r], kernels::transpose(gd, r, c))?);
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let is_add = matches!(op, Op::Add(..));
                let (av, bv) = (self.value(a), self.value(b));
                let kind = broadcast_kind("backward", av.shape(), bv.shape())?;
                let bd = bv.data();
                let bcast = |i: usize| match kind {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % bd.len()],
                };
                if a.is_tracked() {
                    let da = if is_add {
                        g.clone()
                    } else {
                        let data = gd.iter().enumerate().map(|(i, &gi)| gi * bcast(i)).collect();
                        Tensor::new(av.shape().to_vec(), data)?
                    };
                    accumulate(grads, a, da);
                }
                if b.is_tracked() {
                    let mut db = Tensor::zeros(bv.shape().to_vec());
                    {
                        let dbd = db.data_mut();
                        let width = dbd.len();
                        for (i, &gi) in gd.iter().enumerate() {
                            let contrib = if is_add { gi } else { gi * av.data()[i] };
                            let slot = match kind {
                                Broadcast::Same => i,
                                Broadcast::Scalar => 0,
                                Broadcast::Row => i % width,
                            };
                            dbd[slot] = dbd[slot] + contrib;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Affine { x, scale, .. } => {
                let s = *scale;
                accumulate(grads, x, g.map(|v| v * s));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(table);
                let cols = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                let dtd = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dtd[id * cols..(id + 1) * cols], &gd[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, table, dt);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(x);
                let gain_v = self.value(gain);
                let (rows, cols) = (xv.rows(), xv.cols());
                let n = T::from_usize(cols).unwrap();
                let stats = kernels::layer_norm_stats(xv.data(), rows, cols, *eps);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for (i, &(mean, inv)) in stats.iter().enumerate() {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..cols {
                        let gij = gd[i * cols + j];
                        xhat[j] = (xv.data()[i * cols + j] - mean) * inv;
                        dxhat[j] = gij * gain_v.data()[j];
                        dgain[j] = dgain[j] + gij * xhat[j];
                        dbias[j] = dbias[j] + gij;
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * xhat[j];
                    }
                    for j in 0..cols {
                        dx[i * cols + j] = inv / n * (n * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                if x.is_tracked() {
                    accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if gain.is_tracked() {
                    accumulate(grads, gain, Tensor::new(gain_v.shape().to_vec(), dgain)?);
                }
                if bias.is_tracked() {
                    let shape = self.value(bias).shape().to_vec();
                    accumulate(grads, bias, Tensor::new(shape, dbias)?);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(x);
                let data = xv.data().iter().zip(gd).map(|(&v, &gi)| gi * kernels::gelu_grad(v)).collect();
                accumulate(grads, x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Softmax { x, .. } => {
                let (rows, cols) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for i in 0..rows {
                    let r = i * cols..(i + 1) * cols;
                    let dot: T = yd[r.clone()].iter().zip(&gd[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        dx[j] = yd[j] * (gd[j] - dot);
                    }
                }
                accumulate(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax(x) => {
                let (rows, cols) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![T::zero(); yd.len()];
                for i in 0..rows {
                    let r = i * cols..(i + 1) * cols;
                    let total: T = gd[r.clone()].iter().copied().sum();
                    for j in r {
                        dx[j] = gd[j] - yd[j].exp() * total;
                    }
                }
                accumulate(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Sigmoid(x) => {
                let data = y.data().iter().zip(gd).map(|(&s, &gi)| gi * s * (T::one() - s)).collect();
                accumulate(grads, x, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::Log(x) => {
                let xv = self.value(x);
                let data = xv.data().iter().zip(gd).map(|(&v, &gi)| gi / v).collect();
                accumulate(grads, x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(x);
                let data = xv.data().iter().zip(gd).map(|(&v, &gi)| if v > *lo && v < *hi { gi } else { T::zero() }).collect();
                accumulate(grads, x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SliceRows { x, start, .. } => {
                let xv = self.value(x);
                let c = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).shape()[1];
                    if p.is_tracked() {
                        let mut data = Vec::with_capacity(rows * w);
                        for i in 0..rows {
                            data.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, Tensor::new(vec![rows, w], data)?);
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                accumulate(grads, x, Tensor::full(shape, gd[0]));
            }
            Op::Pick { x, idx } => {
                let xv = self.value(x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (i, &j) in idx.iter().enumerate() {
                    dx.data_mut()[i * cols + j] = gd[i];
                }
                accumulate(grads, x, dx);
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], target: &Var<T>, g: Tensor<T>) {
    let Var::Node(i) = target else { return };
    match &mut grads[*i] {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        slot @ None => *slot = Some(g),
    }
}
