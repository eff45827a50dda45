//! Dense row-major arrays and a dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every training step. Values enter the tape
//! either as constants (inputs, frozen weights) or as parameters drawn from a
//! [`ParamStore`]; every primitive appends one node whose inputs precede it,
//! so the node vector is already in topological order. [`Tape::backward`]
//! walks it once in reverse.
//!
//! Gradients are accumulated additively into the parameter store and are only
//! cleared by [`ParamStore::zero_grad`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to probabilities before taking logarithms in the loss helpers.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}

/// A dense n-dimensional array of `f64` values stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Ok(Tensor::new(raw.shape, raw.values)?.with_requires_grad(raw.requires_grad))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err("tensor", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            );
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return dim_err("from_rows", "no rows");
        };
        let cols = first.len();
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("from_rows", "ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Owns every trainable tensor of a model together with a readable name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    LogFloor(Var, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    GradReverse(Var, f64),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Adjoints produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }
}

/// Recording of primitive applications for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_with_logits(z: f64, t: f64) -> f64 {
    // -[t ln σ(z) + (1-t) ln(1-σ(z))] in a form that never overflows
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that does not require a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            values: t.values.clone(),
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter leaf; its gradient is routed back to `store`
    /// by [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape.clone(),
            values: t.values.clone(),
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.values.len() != 1 {
            return Err(TensorError::Usage(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        shape2(&self.nodes[v.0].shape)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 {
            return dim_err("matmul", format!("operands must be matrices, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return dim_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]"));
        }
        let (av, bv) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += x * b);
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Adds a bias vector of length `n` to every row of an `[m x n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.nodes[x.0].shape.len() != 2 || self.nodes[bias.0].values.len() != n {
            return dim_err(
                "add_bias",
                format!(
                    "input {:?} with bias {:?}",
                    self.nodes[x.0].shape, self.nodes[bias.0].shape
                ),
            );
        }
        let b = &self.nodes[bias.0].values;
        let mut out = self.nodes[x.0].values.clone();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        self.push("add_bias", vec![m, n], out, Op::AddBias(x, bias))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return dim_err(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            );
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(name, shape, out, op)
    }

    fn map(
        &mut self,
        name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let out = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Elementwise product with a constant array of the same size; no
    /// gradient flows into the constant.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.nodes[a.0].values.len() {
            return dim_err(
                "mul_const",
                format!("{} constants for shape {:?}", c.len(), self.nodes[a.0].shape),
            );
        }
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&c)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("mul_const", shape, out, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    /// Natural log of `max(x, floor)`. Entries at or below the floor get a
    /// zero gradient.
    pub fn log(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map("log", a, Op::LogFloor(a, floor), |x| x.max(floor).ln())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].values.iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].values;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let mut out = self.nodes[a.0].values.clone();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let shape = if self.nodes[a.0].shape.len() == 2 {
            self.nodes[a.0].shape.clone()
        } else {
            vec![m, k]
        };
        self.push("softmax_rows", shape, out, Op::SoftmaxRows(a))
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the way back.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_reverse" });
        }
        self.map("grad_reverse", a, Op::GradReverse(a, lambda), |x| x)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols", "no inputs");
        };
        let m = self.dims(first).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return dim_err("concat_cols", "row counts differ");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].values[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], out, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > m {
            return dim_err("slice_rows", format!("rows {start}..{end} of {m}"));
        }
        let out = self.nodes[a.0].values[start * n..end * n].to_vec();
        self.push("slice_rows", vec![end - start, n], out, Op::SliceRows(a, start, end))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against
    /// constant targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        if targets.len() != self.nodes[logits.0].values.len() {
            return dim_err("bce_with_logits", "target count differs from logit count");
        }
        let out = self.nodes[logits.0]
            .values
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| bce_with_logits(z, t))
            .collect();
        let shape = self.nodes[logits.0].shape.clone();
        self.push(
            "bce_with_logits",
            shape,
            out,
            Op::BceWithLogits(logits, targets),
        )
    }

    /// Reverse pass from a scalar loss. Each recorded node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        for a in adj.iter().flatten() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Runs [`Tape::backward`] and adds every parameter leaf's gradient to
    /// the matching tensor in `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.adjoints.get(idx).and_then(|a| a.as_ref())) {
                store.get_mut(pid).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<f64>| match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        };
        let vals = |v: Var| &self.nodes[v.0].values;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let (av, bv) = (vals(*a), vals(*b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let x = av[i * k + p];
                        if x != 0.0 {
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, gv)| *o += x * gv);
                        }
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddBias(x, b) => {
                let n = self.nodes[b.0].values.len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                send(*x, g.to_vec());
                send(*b, gb);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals(*a), vals(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| c * v).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(vals(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(&node.values)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(&node.values).map(|(g, e)| g * e).collect()),
            Op::LogFloor(a, floor) => send(
                *a,
                g.iter()
                    .zip(vals(*a))
                    .map(|(g, &x)| if x > *floor { g / x } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; vals(*a).len()]),
            Op::Mean(a) => {
                let n = vals(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                let k = self.dims(*a).1;
                let mut out = vec![0.0; g.len()];
                for ((o, s), gr) in out.chunks_mut(k).zip(node.values.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    o.iter_mut()
                        .zip(s.iter().zip(gr))
                        .for_each(|(o, (s, g))| *o = s * (g - dot));
                }
                send(*a, out);
            }
            Op::GradReverse(a, lambda) => send(*a, g.iter().map(|v| -lambda * v).collect()),
            Op::ConcatCols(parts) => {
                let m = shape2(&node.shape).0;
                let total = shape2(&node.shape).1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    send(p, gp);
                }
            }
            Op::SliceRows(a, start, end) => {
                let (m, n) = self.dims(*a);
                let mut ga = vec![0.0; m * n];
                ga[start * n..end * n].copy_from_slice(g);
                send(*a, ga);
            }
            Op::BceWithLogits(z, t) => send(
                *z,
                g.iter()
                    .zip(vals(*z))
                    .zip(t)
                    .map(|((g, &z), t)| g * (sigmoid(z) - t))
                    .collect(),
            ),
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Row-wise softmax of a plain matrix, outside any tape.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax_rows" });
    }
    let k = logits.cols();
    let mut out = logits.clone();
    out.requires_grad = false;
    out.grad = None;
    for row in out.values.chunks_mut(k) {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Label for a single cross-entropy evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Label<'a> {
    Hard(usize),
    Soft(&'a [f64]),
}

/// Cross-entropy of one prediction row against a hard or soft label, with
/// prediction entries floored at [`LOG_FLOOR`] before the logarithm.
pub fn cross_entropy_row(pred: &[f64], label: Label<'_>) -> Result<f64> {
    match label {
        Label::Hard(y) => {
            let p = pred.get(y).ok_or(TensorError::LabelOutOfRange {
                label: y,
                classes: pred.len(),
            })?;
            Ok(-p.max(LOG_FLOOR).ln())
        }
        Label::Soft(q) => {
            if q.len() != pred.len() {
                return dim_err("cross_entropy_row", "soft label width differs from prediction");
            }
            Ok(-q
                .iter()
                .zip(pred)
                .map(|(q, p)| if *q == 0.0 { 0.0 } else { q * p.max(LOG_FLOOR).ln() })
                .sum::<f64>())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_values() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert_eq!(Tensor::scalar(2.0).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(&m(&[&[1.0, 2.0]]));
        let b = tape.constant(&m(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);

        let x = m(&[&[1.0, -2.0, 3.5], &[0.5, 4.0, -1.0], &[2.0, 0.0, 7.0]]);
        let i = tape.constant(&Tensor::identity(3));
        let xv = tape.constant(&x);
        let ix = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(ix), x.values());

        let z = tape.constant(&Tensor::zeros(vec![3, 3]));
        let zx = tape.matmul(z, xv).unwrap();
        assert!(tape.value(zx).iter().all(|&v| v == 0.0));

        assert!(matches!(
            tape.matmul(a, a),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5]);
        let s = softmax_rows(&m(&[&[0.0; 4]])).unwrap();
        assert_eq!(s.values(), &[0.25; 4]);
        let s = softmax_rows(&m(&[&[2f64.ln(), 0.0]])).unwrap();
        assert_abs_diff_eq!(s.values()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.values()[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(softmax_rows(&Tensor {
            shape: vec![1, 2],
            values: vec![f64::INFINITY, 0.0],
            requires_grad: false,
            grad: None
        })
        .is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_row(&[0.0, 1.0], Label::Hard(1)).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cross_entropy_row(&[0.5, 0.5], Label::Hard(0)).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let p = [0.2, 0.3, 0.5];
        let h: f64 = -p.iter().map(|p: &f64| p * p.ln()).sum::<f64>();
        assert_abs_diff_eq!(cross_entropy_row(&p, Label::Soft(&p)).unwrap(), h, epsilon = 1e-15);
        assert!(matches!(
            cross_entropy_row(&[0.5, 0.5], Label::Hard(2)),
            Err(TensorError::LabelOutOfRange { .. })
        ));
        // floor keeps -ln(0) finite
        assert_abs_diff_eq!(
            cross_entropy_row(&[1.0, 0.0], Label::Hard(1)).unwrap(),
            -LOG_FLOOR.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn relu_and_mean_gradients() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.constant(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mean = tape.mean(v).unwrap();
        assert_eq!(tape.scalar_value(mean).unwrap(), 2.0);
        let g = tape.backward(mean).unwrap();
        assert_eq!(g.get(v).unwrap(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn square_and_constant_derivatives() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(3.0).unwrap());
        let c = tape.constant(&Tensor::scalar(5.0).unwrap());
        let y = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(3.0).unwrap());
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let y = tape.mul(x, x).unwrap();
            tape.backward_into(y, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().unwrap(), &[12.0]);
        store.zero_grad();
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn grad_reverse_examples() {
        // y = (grad_reverse(x, λ))² ; dy/dx = -λ * 2x
        for (lambda, expect) in [(0.0, 0.0), (1.0, -6.0), (0.5, -3.0)] {
            let mut tape = Tape::new();
            let x = tape.constant(&Tensor::scalar(3.0).unwrap());
            let r = tape.grad_reverse(x, lambda).unwrap();
            assert_eq!(tape.value(r), &[3.0]);
            let y = tape.mul(r, r).unwrap();
            let g = tape.backward(y).unwrap();
            assert_eq!(g.get(x).unwrap(), &[expect]);
            // downstream of the reversal the gradient is untouched
            assert_eq!(g.get(r).unwrap(), &[6.0]);
        }
    }

    #[test]
    fn grad_reverse_hand_derived_chain() {
        // L = w * sigmoid(a * grl(b * x)), with x=0.7, a=1.3, b=-0.4, w=2, λ=0.8.
        // dL/da = w s(1-s) u, dL/db = -λ w s(1-s) a x where u = b x.
        let (x0, a0, b0, w0, lambda) = (0.7, 1.3, -0.4, 2.0, 0.8);
        let mut tape = Tape::new();
        let sc = |t: &mut Tape, v: f64| t.constant(&Tensor::matrix(1, 1, vec![v]).unwrap());
        let x = sc(&mut tape, x0);
        let a = sc(&mut tape, a0);
        let b = sc(&mut tape, b0);
        let u = tape.matmul(x, b).unwrap();
        let r = tape.grad_reverse(u, lambda).unwrap();
        let z = tape.matmul(r, a).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let l = tape.scale(s, w0).unwrap();
        let l = tape.sum(l).unwrap();
        let g = tape.backward(l).unwrap();
        let u0: f64 = b0 * x0;
        let s0 = 1.0 / (1.0 + (-(a0 * u0)).exp());
        let ds = w0 * s0 * (1.0 - s0);
        assert_abs_diff_eq!(g.get(a).unwrap()[0], ds * u0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.get(b).unwrap()[0], -lambda * ds * a0 * x0, epsilon = 1e-14);
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(800.0).unwrap());
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn bce_with_logits_matches_direct_formula() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::new(vec![3], vec![0.0, 2.0, -3.0]).unwrap());
        let l = tape.bce_with_logits(z, vec![1.0, 0.0, 1.0]).unwrap();
        let direct = |z: f64, t: f64| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
        };
        let v = tape.value(l);
        assert_abs_diff_eq!(v[0], std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], direct(2.0, 0.0), epsilon = 1e-14);
        assert_abs_diff_eq!(v[2], direct(-3.0, 1.0), epsilon = 1e-14);
    }
}
