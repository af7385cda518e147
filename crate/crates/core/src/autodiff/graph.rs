use std::collections::HashMap;

use super::tensor::{matmul, matmul_t, t_matmul, Tensor};
use super::{GraphError, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf { name: String, kind: LeafKind },
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    SoftmaxRows { x: Var, mask: Option<Vec<bool>> },
    LogSoftmaxRows(Var),
    Conv1dTime { x: Var, w: Var, width: usize },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Powf(..) => "powf",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Conv1dTime { .. } => "conv1d_time",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// A define-by-run tape of primitive ops.
///
/// Nodes are evaluated as they are appended, so building the graph is the
/// first forward pass. [`Graph::forward`] re-binds named leaves and replays
/// every node in insertion order, which keeps the structure (including any
/// injected random masks, stored as constants) fixed.
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, Var>,
    stale: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaves: HashMap::new(), stale: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn leaf(&mut self, name: &str, value: Tensor, kind: LeafKind) -> Result<Var, GraphError> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node: self.nodes.len(), op: "leaf", detail: name.to_string() });
        }
        let v = Var(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf { name: name.to_string(), kind }, value });
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named input leaf. A second call with the same name returns the first leaf.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<Var, GraphError> {
        self.leaf(name, value, LeafKind::Input)
    }

    /// Named parameter leaf, deduplicated by name.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var, GraphError> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        self.leaf(name, value.clone(), LeafKind::Param)
    }

    /// Parameter leaf fetched from a store.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var, GraphError> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        self.leaf(name, t.clone(), LeafKind::Param)
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    /// Names of all leaves in creation order.
    pub fn leaf_names(&self) -> Vec<(String, LeafKind)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Leaf { name, kind } => Some((name.clone(), *kind)),
                _ => None,
            })
            .collect()
    }

    /// Unnamed constant; never differentiated and never re-bound.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { op: Op::Const, value });
        v
    }

    fn push(&mut self, op: Op) -> Result<Var, GraphError> {
        let id = self.nodes.len();
        let value = eval(&op, &self.nodes).map_err(|detail| GraphError::Shape { node: id, op: op.name(), detail })?;
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node: id, op: op.name(), detail: String::new() });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Mul(a, b))
    }
    /// `a (n×m) + b (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::AddRow(a, b))
    }
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::MulRow(a, b))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, GraphError> {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, GraphError> {
        self.push(Op::AddScalar(a, s))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::MatMul(a, b))
    }
    /// `a · bᵀ`; weight matrices are stored output-major so this is the linear map.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::MatMulT(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Transpose(a))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Log(a))
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, GraphError> {
        self.push(Op::Powf(a, p))
    }
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, GraphError> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatCols(xs.to_vec()))
    }
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, GraphError> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatRows(xs.to_vec()))
    }
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        self.push(Op::SliceCols { x, start, len })
    }
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        self.push(Op::SliceRows { x, start, len })
    }
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, GraphError> {
        self.push(Op::SoftmaxRows { x, mask: None })
    }
    /// Row softmax where `mask[j] == false` columns get exactly zero weight.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var, GraphError> {
        self.push(Op::SoftmaxRows { x, mask: Some(mask) })
    }
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, GraphError> {
        self.push(Op::LogSoftmaxRows(x))
    }
    /// Same-length, zero-padded 1-D convolution along rows (time).
    ///
    /// `x` is `T × C_in`, `w` is `C_out × (C_in·width)` laid out `[o][c][k]`;
    /// the result is `T × C_out`.
    pub fn conv1d_time(&mut self, x: Var, w: Var, width: usize) -> Result<Var, GraphError> {
        self.push(Op::Conv1dTime { x, w, width })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Mean(a))
    }
    /// Column sums: `n×m → 1×m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::SumRows(a))
    }

    /// Re-binds the named leaves and replays every node.
    pub fn forward(&mut self, bindings: &[(&str, Tensor)]) -> Result<(), GraphError> {
        for (name, t) in bindings {
            self.set_leaf(name, t.clone())?;
        }
        self.replay()
    }

    /// Overwrites a leaf value. The graph must be replayed before `backward`.
    pub fn set_leaf(&mut self, name: &str, value: Tensor) -> Result<(), GraphError> {
        let v = *self.leaves.get(name).ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        let node = &mut self.nodes[v.0];
        if node.value.shape() != value.shape() {
            return Err(GraphError::Shape {
                node: v.0,
                op: "leaf",
                detail: format!("rebinding {} with shape {:?}, expected {:?}", name, value.shape(), node.value.shape()),
            });
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    pub(crate) fn replay(&mut self) -> Result<(), GraphError> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf { .. } | Op::Const) {
                continue;
            }
            let value = eval(&self.nodes[id].op, &self.nodes)
                .map_err(|detail| GraphError::Shape { node: id, op: self.nodes[id].op.name(), detail })?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite { node: id, op: self.nodes[id].op.name(), detail: String::new() });
            }
            self.nodes[id].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Reverse pass from `output` seeded with `output_grad`.
    pub fn backward(&self, output: Var, output_grad: Tensor) -> Result<Gradients, GraphError> {
        if self.stale {
            return Err(GraphError::NotEvaluated);
        }
        if self.value(output).shape() != output_grad.shape() {
            return Err(GraphError::Shape {
                node: output.0,
                op: "backward",
                detail: format!("seed {:?} vs output {:?}", output_grad.shape(), self.value(output).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(output_grad);
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            backprop(&node.op, &node.value, &g, &self.nodes, &mut grads);
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, leaves: self.leaves.clone(), shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    /// Convenience for scalar outputs: seeds the reverse pass with 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients, GraphError> {
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(GraphError::Shape { node: output.0, op: "backward", detail: format!("non-scalar output {:?}", shape) });
        }
        self.backward(output, Tensor::new(shape, vec![1.0]))
    }
}

/// Gradients of one reverse pass, addressable by node or by leaf name.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: HashMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. a node; zeros if the node does not influence the output.
    pub fn of(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn wrt(&self, name: &str) -> Option<Tensor> {
        self.leaves.get(name).map(|&v| self.of(v))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn row_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    if a.rank() != 2 || b.shape() != [1, a.cols()] {
        return Err(format!("cannot broadcast {:?} over rows of {:?}", b.shape(), a.shape()));
    }
    let m = a.cols();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % m])).collect();
    Ok(Tensor::new(a.shape().to_vec(), data))
}

fn two_d(t: &Tensor) -> Result<(usize, usize), String> {
    if t.rank() != 2 {
        return Err(format!("expected rank 2, got {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn eval(op: &Op, nodes: &[Node]) -> Result<Tensor, String> {
    let val = |v: &Var| &nodes[v.0].value;
    Ok(match op {
        Op::Leaf { .. } | Op::Const => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            same_shape(val(a), val(b))?;
            zip_with(val(a), val(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(val(a), val(b))?;
            zip_with(val(a), val(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(val(a), val(b))?;
            zip_with(val(a), val(b), |x, y| x * y)
        }
        Op::AddRow(a, b) => row_broadcast(val(a), val(b), |x, y| x + y)?,
        Op::MulRow(a, b) => row_broadcast(val(a), val(b), |x, y| x * y)?,
        Op::Scale(a, s) => val(a).map(|x| x * s),
        Op::AddScalar(a, s) => val(a).map(|x| x + s),
        Op::MatMul(a, b) => {
            let (n, k) = two_d(val(a))?;
            let (k2, m) = two_d(val(b))?;
            if k != k2 {
                return Err(format!("inner dimensions {:?} · {:?}", val(a).shape(), val(b).shape()));
            }
            Tensor::matrix(n, m, matmul(val(a).data(), val(b).data(), n, k, m))
        }
        Op::MatMulT(a, b) => {
            let (n, k) = two_d(val(a))?;
            let (m, k2) = two_d(val(b))?;
            if k != k2 {
                return Err(format!("inner dimensions {:?} · {:?}ᵀ", val(a).shape(), val(b).shape()));
            }
            Tensor::matrix(n, m, matmul_t(val(a).data(), val(b).data(), n, k, m))
        }
        Op::Transpose(a) => {
            two_d(val(a))?;
            val(a).transpose()
        }
        Op::Tanh(a) => val(a).map(f64::tanh),
        Op::Sigmoid(a) => val(a).map(sigmoid),
        Op::Exp(a) => val(a).map(f64::exp),
        Op::Log(a) => val(a).map(f64::ln),
        Op::Powf(a, p) => val(a).map(|x| x.powf(*p)),
        Op::ConcatCols(xs) => {
            let rows = val(&xs[0]).rows();
            let mut cols = 0;
            for x in xs {
                let (r, c) = two_d(val(x))?;
                if r != rows {
                    return Err(format!("row counts differ: {} vs {}", r, rows));
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for x in xs {
                    data.extend_from_slice(val(x).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::ConcatRows(xs) => {
            let cols = val(&xs[0]).cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for x in xs {
                let (r, c) = two_d(val(x))?;
                if c != cols {
                    return Err(format!("column counts differ: {} vs {}", c, cols));
                }
                rows += r;
                data.extend_from_slice(val(x).data());
            }
            Tensor::matrix(rows, cols, data)
        }
        Op::SliceCols { x, start, len } => {
            let (r, c) = two_d(val(x))?;
            if *len == 0 || start + len > c {
                return Err(format!("column slice {}..{} of {} columns", start, start + len, c));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&val(x).row_slice(i)[*start..start + len]);
            }
            Tensor::matrix(r, *len, data)
        }
        Op::SliceRows { x, start, len } => {
            let (r, c) = two_d(val(x))?;
            if *len == 0 || start + len > r {
                return Err(format!("row slice {}..{} of {} rows", start, start + len, r));
            }
            Tensor::matrix(*len, c, val(x).data()[start * c..(start + len) * c].to_vec())
        }
        Op::SoftmaxRows { x, mask } => {
            let (r, c) = two_d(val(x))?;
            if let Some(m) = mask {
                if m.len() != c {
                    return Err(format!("mask length {} for {} columns", m.len(), c));
                }
                if !m.iter().any(|&b| b) {
                    return Err("every column masked".to_string());
                }
            }
            let mut out = val(x).clone();
            for i in 0..r {
                softmax_in_place(out.row_slice_mut(i), mask.as_deref());
            }
            out
        }
        Op::LogSoftmaxRows(x) => {
            let (r, _) = two_d(val(x))?;
            let mut out = val(x).clone();
            for i in 0..r {
                let row = out.row_slice_mut(i);
                let lse = logsumexp(row);
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        }
        Op::Conv1dTime { x, w, width } => {
            let (t, cin) = two_d(val(x))?;
            let (cout, wk) = two_d(val(w))?;
            if width % 2 == 0 || wk != cin * width {
                return Err(format!("kernel {:?} incompatible with {} input channels and width {}", val(w).shape(), cin, width));
            }
            let pad = width / 2;
            let (xd, wd) = (val(x).data(), val(w).data());
            let mut out = vec![0.0; t * cout];
            for ti in 0..t {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for k in 0..*width {
                        let src = ti + k;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..cin {
                            acc += wd[o * wk + c * width + k] * xd[s * cin + c];
                        }
                    }
                    out[ti * cout + o] = acc;
                }
            }
            Tensor::matrix(t, cout, out)
        }
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
        Op::Mean(a) => Tensor::scalar(val(a).sum() / val(a).len() as f64),
        Op::SumRows(a) => {
            let (r, c) = two_d(val(a))?;
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, &v) in out.iter_mut().zip(val(a).row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        }
    })
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(op: &Op, y: &Tensor, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf { .. } | Op::Const => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, zip_with(g, val(b), |x, y| x * y));
            accumulate(grads, *b, zip_with(g, val(a), |x, y| x * y));
        }
        Op::AddRow(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, column_sums(g));
        }
        Op::MulRow(a, b) => {
            accumulate(grads, *a, row_broadcast(g, val(b), |x, y| x * y).expect("validated"));
            accumulate(grads, *b, column_sums(&zip_with(g, val(a), |x, y| x * y)));
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
        Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (n, k) = (val(a).rows(), val(a).cols());
            let m = val(b).cols();
            accumulate(grads, *a, Tensor::matrix(n, k, matmul_t(g.data(), val(b).data(), n, m, k)));
            accumulate(grads, *b, Tensor::matrix(k, m, t_matmul(val(a).data(), g.data(), n, k, m)));
        }
        Op::MatMulT(a, b) => {
            let (n, k) = (val(a).rows(), val(a).cols());
            let m = val(b).rows();
            accumulate(grads, *a, Tensor::matrix(n, k, matmul(g.data(), val(b).data(), n, m, k)));
            accumulate(grads, *b, Tensor::matrix(m, k, t_matmul(g.data(), val(a).data(), n, m, k)));
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Tanh(a) => accumulate(grads, *a, zip_with(g, y, |gi, yi| gi * (1.0 - yi * yi))),
        Op::Sigmoid(a) => accumulate(grads, *a, zip_with(g, y, |gi, yi| gi * yi * (1.0 - yi))),
        Op::Exp(a) => accumulate(grads, *a, zip_with(g, y, |gi, yi| gi * yi)),
        Op::Log(a) => accumulate(grads, *a, zip_with(g, val(a), |gi, xi| gi / xi)),
        Op::Powf(a, p) => accumulate(grads, *a, zip_with(g, val(a), |gi, xi| gi * p * xi.powf(p - 1.0))),
        Op::ConcatCols(xs) => {
            let rows = g.rows();
            let mut offset = 0;
            for x in xs {
                let c = val(x).cols();
                let mut data = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    data.extend_from_slice(&g.row_slice(r)[offset..offset + c]);
                }
                accumulate(grads, *x, Tensor::matrix(rows, c, data));
                offset += c;
            }
        }
        Op::ConcatRows(xs) => {
            let cols = g.cols();
            let mut offset = 0;
            for x in xs {
                let r = val(x).rows();
                accumulate(grads, *x, Tensor::matrix(r, cols, g.data()[offset * cols..(offset + r) * cols].to_vec()));
                offset += r;
            }
        }
        Op::SliceCols { x, start, len } => {
            let mut gx = Tensor::zeros(val(x).shape());
            for r in 0..g.rows() {
                gx.row_slice_mut(r)[*start..start + len].copy_from_slice(g.row_slice(r));
            }
            accumulate(grads, *x, gx);
        }
        Op::SliceRows { x, start, len } => {
            let mut gx = Tensor::zeros(val(x).shape());
            let c = g.cols();
            gx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
            accumulate(grads, *x, gx);
        }
        Op::SoftmaxRows { x, .. } => {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let yr = y.row_slice(r);
                let dot: f64 = yr.iter().zip(g.row_slice(r)).map(|(a, b)| a * b).sum();
                for (o, (&yi, &gi)) in gx.row_slice_mut(r).iter_mut().zip(yr.iter().zip(g.row_slice(r))) {
                    *o = yi * (gi - dot);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::LogSoftmaxRows(x) => {
            let mut gx = g.clone();
            for r in 0..g.rows() {
                let gsum: f64 = g.row_slice(r).iter().sum();
                for (o, &yi) in gx.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                    *o -= yi.exp() * gsum;
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::Conv1dTime { x, w, width } => {
            let (t, cin) = (val(x).rows(), val(x).cols());
            let (cout, wk) = (val(w).rows(), val(w).cols());
            let pad = width / 2;
            let (xd, wd, gd) = (val(x).data(), val(w).data(), g.data());
            let mut gx = vec![0.0; t * cin];
            let mut gw = vec![0.0; cout * wk];
            for ti in 0..t {
                for o in 0..cout {
                    let go = gd[ti * cout + o];
                    if go == 0.0 {
                        continue;
                    }
                    for k in 0..*width {
                        let src = ti + k;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for c in 0..cin {
                            gw[o * wk + c * width + k] += go * xd[s * cin + c];
                            gx[s * cin + c] += go * wd[o * wk + c * width + k];
                        }
                    }
                }
            }
            accumulate(grads, *x, Tensor::matrix(t, cin, gx));
            accumulate(grads, *w, Tensor::matrix(cout, wk, gw));
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(a).shape(), g.item())),
        Op::Mean(a) => {
            let n = val(a).len() as f64;
            accumulate(grads, *a, Tensor::full(val(a).shape(), g.item() / n))
        }
        Op::SumRows(a) => {
            let (r, c) = (val(a).rows(), val(a).cols());
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                data.extend_from_slice(g.data());
            }
            accumulate(grads, *a, Tensor::matrix(r, c, data));
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let m = row.iter().enumerate().filter(|(j, _)| valid(*j)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - m).exp();
            z += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= z);
}
