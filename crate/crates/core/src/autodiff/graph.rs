use std::borrow::Cow;

use super::{Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives. Matrix primitives expect rank-2 operands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// `(m×k)·(k×n)`.
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `(m×n) + (1×n)`, the row vector broadcast over every row.
    AddRow,
    Tanh,
    Sigmoid,
    Exp,
    Square,
    Scale(f64),
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Sum of all entries, shape `[1]`.
    Sum,
    Mean,
    /// Softmax over all entries, computed with max subtraction.
    Softmax,
    /// Concatenation of any number of rank-2 inputs along `axis` (0 = rows, 1 = columns).
    Concat {
        axis: usize,
    },
    /// Half-open range `start..end` along `axis` of a rank-2 input.
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Exp => "exp",
            Primitive::Square => "square",
            Primitive::Scale(_) => "scale",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Softmax => "softmax",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose",
        }
    }
}

struct Node<'a> {
    op: Option<Primitive>,
    inputs: (u32, u32),
    value: Cow<'a, Tensor>,
    tracks: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
///
/// Leaves may borrow their tensors (`leaf_ref`), which keeps per-record graphs
/// from copying model parameters.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    edges: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            edges: Vec::with_capacity(512),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an owned leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracks = t.requires_grad();
        self.push_leaf(Cow::Owned(t), tracks)
    }

    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(t), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(Cow::Owned(t), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, tracks: bool) -> Var {
        let start = self.edges.len() as u32;
        self.nodes.push(Node {
            op: None,
            inputs: (start, 0),
            value,
            tracks,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Value of `v` with its gradient attached.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let grad = self.grad(v)?.to_vec();
        let mut t = self.value(v).clone();
        t.set_grad(grad).ok()?;
        Some(t)
    }

    /// Evaluates `op` on `inputs` and records the node.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            forward(op, &vals)?
        };
        let tracks = inputs.iter().any(|v| self.nodes[v.0].tracks);
        let start = self.edges.len() as u32;
        self.edges.extend_from_slice(inputs);
        self.nodes.push(Node {
            op: Some(op),
            inputs: (start, inputs.len() as u32),
            value: Cow::Owned(value),
            tracks,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::AddRow, &[a, row])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose, &[a])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards every tracked node reachable from `loss` holds its
    /// gradient; tracked leaves that do not influence `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op else { continue };
            if !node.tracks {
                continue;
            }
            let Some(upstream) = grads[idx].as_ref() else {
                continue;
            };
            let (start, n) = node.inputs;
            let inputs = &self.edges[start as usize..(start + n) as usize];
            let in_vals: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            let wants: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].tracks).collect();
            let contributions = backward_op(op, &in_vals, &node.value, upstream, &wants);
            for (input, contrib) in inputs.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.tracks && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

fn mismatch(op: Primitive, vals: &[&Tensor]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: vals.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn expect_arity(op: Primitive, vals: &[&Tensor], n: usize) -> Result<(), TensorError> {
    if vals.len() != n {
        return Err(TensorError::Arity {
            op: op.name(),
            expected: n,
            found: vals.len(),
        });
    }
    Ok(())
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn forward(op: Primitive, vals: &[&Tensor]) -> Result<Tensor, TensorError> {
    use Primitive::*;
    match op {
        MatMul => {
            expect_arity(op, vals, 2)?;
            let (a, b) = (vals[0], vals[1]);
            if !is_matrix(a) || !is_matrix(b) || a.cols() != b.rows() {
                return Err(mismatch(op, vals));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))
        }
        Add | Sub | Mul => {
            expect_arity(op, vals, 2)?;
            let (a, b) = (vals[0], vals[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, vals));
            }
            Ok(match op {
                Add => zip_binary(a, b, |x, y| x + y),
                Sub => zip_binary(a, b, |x, y| x - y),
                _ => zip_binary(a, b, |x, y| x * y),
            })
        }
        AddRow => {
            expect_arity(op, vals, 2)?;
            let (a, r) = (vals[0], vals[1]);
            if !is_matrix(a) || r.numel() != a.cols() || r.rows() != 1 {
                return Err(mismatch(op, vals));
            }
            let n = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + r.data()[i % n])
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Tanh | Sigmoid | Exp | Square | Scale(_) | Clamp { .. } => {
            expect_arity(op, vals, 1)?;
            let a = vals[0];
            Ok(match op {
                Tanh => map_unary(a, f64::tanh),
                Sigmoid => map_unary(a, sigmoid),
                Exp => map_unary(a, f64::exp),
                Square => map_unary(a, |x| x * x),
                Scale(s) => map_unary(a, |x| x * s),
                Clamp { lo, hi } => {
                    if lo > hi {
                        return Err(TensorError::InvalidArgument {
                            op: op.name(),
                            reason: format!("lo {lo} > hi {hi}"),
                        });
                    }
                    map_unary(a, |x| x.max(lo).min(hi))
                }
                _ => unreachable!(),
            })
        }
        Sum | Mean => {
            expect_arity(op, vals, 1)?;
            let s: f64 = vals[0].data().iter().sum();
            let v = if op == Sum {
                s
            } else {
                s / vals[0].numel() as f64
            };
            Ok(Tensor::scalar(v))
        }
        Softmax => {
            expect_arity(op, vals, 1)?;
            let a = vals[0];
            let max = a.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = a.data().iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            Tensor::new(
                a.shape().to_vec(),
                exps.into_iter().map(|e| e / z).collect(),
            )
        }
        Concat { axis } => {
            if vals.is_empty() {
                return Err(TensorError::Arity {
                    op: op.name(),
                    expected: 1,
                    found: 0,
                });
            }
            if vals.iter().any(|t| !is_matrix(t)) || axis > 1 {
                return Err(mismatch(op, vals));
            }
            if axis == 0 {
                let cols = vals[0].cols();
                if vals.iter().any(|t| t.cols() != cols) {
                    return Err(mismatch(op, vals));
                }
                let rows = vals.iter().map(|t| t.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for t in vals {
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, data)
            } else {
                let rows = vals[0].rows();
                if vals.iter().any(|t| t.rows() != rows) {
                    return Err(mismatch(op, vals));
                }
                let cols = vals.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for t in vals {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
        }
        Slice { axis, start, end } => {
            expect_arity(op, vals, 1)?;
            let a = vals[0];
            let extent = if axis == 0 { a.rows() } else { a.cols() };
            if !is_matrix(a) || axis > 1 || start >= end || end > extent {
                return Err(TensorError::InvalidArgument {
                    op: op.name(),
                    reason: format!(
                        "range {start}..{end} on axis {axis} of shape {:?}",
                        a.shape()
                    ),
                });
            }
            if axis == 0 {
                let c = a.cols();
                Tensor::matrix(end - start, c, a.data()[start * c..end * c].to_vec())
            } else {
                let mut data = Vec::with_capacity(a.rows() * (end - start));
                for r in 0..a.rows() {
                    data.extend_from_slice(&a.row(r)[start..end]);
                }
                Tensor::matrix(a.rows(), end - start, data)
            }
        }
        Transpose => {
            expect_arity(op, vals, 1)?;
            let a = vals[0];
            if !is_matrix(a) {
                return Err(mismatch(op, vals));
            }
            let (m, n) = (a.rows(), a.cols());
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::matrix(n, m, data)
        }
    }
}

/// Vector-Jacobian products of `op` for each input flagged in `wants`.
fn backward_op(
    op: Primitive,
    vals: &[&Tensor],
    out: &Tensor,
    dy: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    use Primitive::*;
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..dy.len()).map(f).collect() };
    match op {
        MatMul => {
            let (a, b) = (vals[0], vals[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let da = wants[0].then(|| matmul_nt(dy, b.data(), m, n, k));
            let db = wants[1].then(|| matmul_tn(a.data(), dy, m, k, n));
            vec![da, db]
        }
        Add => vec![wants[0].then(|| dy.to_vec()), wants[1].then(|| dy.to_vec())],
        Sub => vec![
            wants[0].then(|| dy.to_vec()),
            wants[1].then(|| dy.iter().map(|g| -g).collect()),
        ],
        Mul => {
            let (a, b) = (vals[0].data(), vals[1].data());
            vec![
                wants[0].then(|| elementwise(&|i| dy[i] * b[i])),
                wants[1].then(|| elementwise(&|i| dy[i] * a[i])),
            ]
        }
        AddRow => {
            let n = vals[0].cols();
            let db = wants[1].then(|| {
                let mut acc = vec![0.0; n];
                for (i, g) in dy.iter().enumerate() {
                    acc[i % n] += g;
                }
                acc
            });
            vec![wants[0].then(|| dy.to_vec()), db]
        }
        Tanh => {
            let y = out.data();
            vec![Some(elementwise(&|i| dy[i] * (1.0 - y[i] * y[i])))]
        }
        Sigmoid => {
            let y = out.data();
            vec![Some(elementwise(&|i| dy[i] * y[i] * (1.0 - y[i])))]
        }
        Exp => {
            let y = out.data();
            vec![Some(elementwise(&|i| dy[i] * y[i]))]
        }
        Square => {
            let x = vals[0].data();
            vec![Some(elementwise(&|i| 2.0 * x[i] * dy[i]))]
        }
        Scale(s) => vec![Some(elementwise(&|i| dy[i] * s))],
        Clamp { lo, hi } => {
            let x = vals[0].data();
            vec![Some(elementwise(&|i| {
                if x[i] >= lo && x[i] <= hi {
                    dy[i]
                } else {
                    0.0
                }
            }))]
        }
        Sum => vec![Some(vec![dy[0]; vals[0].numel()])],
        Mean => {
            let n = vals[0].numel();
            vec![Some(vec![dy[0] / n as f64; n])]
        }
        Softmax => {
            let y = out.data();
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            vec![Some(elementwise(&|i| y[i] * (dy[i] - dot)))]
        }
        Concat { axis } => {
            let mut grads = Vec::with_capacity(vals.len());
            if axis == 0 {
                let mut offset = 0;
                for (t, &want) in vals.iter().zip(wants) {
                    let n = t.numel();
                    grads.push(want.then(|| dy[offset..offset + n].to_vec()));
                    offset += n;
                }
            } else {
                let total = out.cols();
                let mut col = 0;
                for (t, &want) in vals.iter().zip(wants) {
                    let c = t.cols();
                    grads.push(want.then(|| {
                        let mut g = Vec::with_capacity(t.numel());
                        for r in 0..t.rows() {
                            g.extend_from_slice(&dy[r * total + col..r * total + col + c]);
                        }
                        g
                    }));
                    col += c;
                }
            }
            grads
        }
        Slice { axis, start, end } => {
            let a = vals[0];
            let mut g = vec![0.0; a.numel()];
            let c = a.cols();
            if axis == 0 {
                g[start * c..end * c].copy_from_slice(dy);
            } else {
                let w = end - start;
                for r in 0..a.rows() {
                    g[r * c + start..r * c + end].copy_from_slice(&dy[r * w..(r + 1) * w]);
                }
            }
            vec![Some(g)]
        }
        Transpose => {
            let a = vals[0];
            let (m, n) = (a.rows(), a.cols());
            // dy is n×m
            let mut g = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    g[i * n + j] = dy[j * m + i];
                }
            }
            vec![Some(g)]
        }
    }
}
