use super::array::Array;
use super::kernels;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitive together with its non-differentiable attributes.
///
/// Elementwise binary ops accept equal shapes or one rank-0 operand; all
/// other broadcasting must go through [`Primitive::Broadcast`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[.., m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    MatMul,
    Add,
    Sub,
    Mul,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Normalization over the last axis, without affine parameters.
    LayerNorm {
        eps: f64,
    },
    /// Tanh-approximated GELU.
    Gelu,
    Sigmoid,
    Log,
    Exp,
    /// Clamp into `[lo, hi]`; gradient is zero at and beyond the bounds.
    Clip {
        lo: f64,
        hi: f64,
    },
    /// Row lookup in a `[vocab, d]` table; output is `batch_shape ++ [d]`.
    Embedding {
        ids: Vec<usize>,
        batch_shape: Vec<usize>,
    },
    /// Swap the last two axes.
    Transpose,
    Reshape {
        shape: Vec<usize>,
    },
    /// Sum of all entries, rank-0 output.
    Sum,
    /// `scale * x + shift`.
    Affine {
        scale: f64,
        shift: f64,
    },
    /// Fix one coordinate of `axis`, dropping that axis.
    Select {
        axis: usize,
        index: usize,
    },
    /// One entry per row of the last axis: `out[r] = x[r, indices[r]]`.
    TakeAlongLast {
        indices: Vec<usize>,
    },
    /// Repeat an array whose shape is a suffix of `shape`.
    Broadcast {
        shape: Vec<usize>,
    },
    /// Pick entries of a rank-1 array.
    Gather {
        indices: Vec<usize>,
    },
    /// `sum_i w[i] * x_i`; inputs are `w` (rank 1, length n) then n arrays.
    WeightedSum,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Clip { .. } => "clip",
            Primitive::Embedding { .. } => "embedding",
            Primitive::Transpose => "transpose",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Sum => "sum",
            Primitive::Affine { .. } => "affine",
            Primitive::Select { .. } => "select",
            Primitive::TakeAlongLast { .. } => "take_along_last",
            Primitive::Broadcast { .. } => "broadcast",
            Primitive::Gather { .. } => "gather",
            Primitive::WeightedSum => "weighted_sum",
        }
    }
}

struct Node {
    prim: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Array,
    requires_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Values are computed eagerly. Leaves created with [`Tape::constant`] never
/// receive gradient, and neither does anything computed only from them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.adjoints[id.0].as_ref()
    }

    /// Adjoint of `id`, zero when the node has no path to the loss.
    pub fn wrt(&self, id: NodeId) -> Array {
        self.adjoints[id.0]
            .clone()
            .unwrap_or_else(|| Array::zeros(&self.shapes[id.0]))
    }
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

    fn push_leaf(&mut self, value: Array, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Array) -> Result<NodeId> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Result<NodeId> {
        self.push_leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Evaluate `prim` on recorded inputs and record the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Array> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            forward(&prim, &vals)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Array::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(prim) = &node.prim else { continue };
            let Some(dout) = adjoints[i].take() else {
                continue;
            };
            let need: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let vals: Vec<&Array> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let grads = vjp(prim, &vals, &node.value, &dout, &need);
            for (input, g) in node.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    match &mut adjoints[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            adjoints[i] = Some(dout);
        }
        Ok(Gradients {
            adjoints,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[x])
    }
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x])
    }
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Gelu, &[x])
    }
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(Primitive::Clip { lo, hi }, &[x])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], batch_shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Embedding {
                ids: ids.to_vec(),
                batch_shape: batch_shape.to_vec(),
            },
            &[table],
        )
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        self.apply(Primitive::Select { axis, index }, &[x])
    }
    pub fn take_along_last(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::TakeAlongLast {
                indices: indices.to_vec(),
            },
            &[x],
        )
    }
    pub fn broadcast(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Broadcast { shape: shape.to_vec() }, &[x])
    }
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Gather {
                indices: indices.to_vec(),
            },
            &[x],
        )
    }
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let mut inputs = Vec::with_capacity(items.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(items);
        self.apply(Primitive::WeightedSum, &inputs)
    }
}

fn arity(prim: &Primitive, got: usize) -> Result<()> {
    let want = match prim {
        Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => 2,
        Primitive::WeightedSum => {
            if got >= 1 {
                return Ok(());
            }
            1
        }
        _ => 1,
    };
    if got != want {
        return Err(Error::Shape {
            op: prim.name(),
            shapes: format!("expected {want} inputs, got {got}"),
        });
    }
    Ok(())
}

fn binary_shape(op: &'static str, a: &Array, b: &Array) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(shape_err(op, &[a.shape(), b.shape()]))
    }
}

fn binary(op: &'static str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    let shape = binary_shape(op, a, b)?;
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.is_scalar() {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    Array::new(shape, data)
}

/// Layout of a matmul: `Flat` treats all leading axes of `a` as rows.
enum MatMulLayout {
    Flat { m: usize, k: usize, n: usize },
    Batched { b: usize, m: usize, k: usize, n: usize },
}

fn matmul_layout(a: &Array, b: &Array) -> Result<(MatMulLayout, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    let err = || shape_err("matmul", &[sa, sb]);
    if sa.len() < 2 {
        return Err(err());
    }
    match sb.len() {
        2 => {
            let k = sa[sa.len() - 1];
            if k != sb[0] {
                return Err(err());
            }
            let m = a.len() / k.max(1);
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            Ok((MatMulLayout::Flat { m, k, n: sb[1] }, out))
        }
        3 if sa.len() == 3 => {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(err());
            }
            Ok((
                MatMulLayout::Batched {
                    b: sa[0],
                    m: sa[1],
                    k: sa[2],
                    n: sb[2],
                },
                vec![sa[0], sa[1], sb[2]],
            ))
        }
        _ => Err(err()),
    }
}

fn softmax_rows(x: &Array) -> Array {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for v in &mut out[start..start + d] {
            *v /= s;
        }
    }
    Array::new(x.shape().to_vec(), out).expect("softmax shape")
}

fn log_softmax_rows(x: &Array) -> Array {
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Array::new(x.shape().to_vec(), out).expect("log_softmax shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last2(x: &Array) -> Array {
    let s = x.shape();
    let r = s.len();
    let (m, n) = (s[r - 2], s[r - 1]);
    let batches = x.len() / (m * n).max(1);
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for b in 0..batches {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Array::new(shape, out).expect("transpose shape")
}

pub(crate) fn forward(prim: &Primitive, inputs: &[&Array]) -> Result<Array> {
    arity(prim, inputs.len())?;
    let x = inputs[0];
    match prim {
        Primitive::MatMul => {
            let b = inputs[1];
            let (layout, shape) = matmul_layout(x, b)?;
            let mut out = vec![0.0; shape.iter().product()];
            match layout {
                MatMulLayout::Flat { m, k, n } => {
                    kernels::gemm(m, k, n, x.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
                }
                MatMulLayout::Batched { b: nb, m, k, n } => {
                    for i in 0..nb {
                        kernels::gemm(
                            m,
                            k,
                            n,
                            &x.data()[i * m * k..(i + 1) * m * k],
                            (k, 1),
                            &b.data()[i * k * n..(i + 1) * k * n],
                            (n, 1),
                            &mut out[i * m * n..(i + 1) * m * n],
                            0.0,
                        );
                    }
                }
            }
            Array::new(shape, out)
        }
        Primitive::Add => binary("add", x, inputs[1], |a, b| a + b),
        Primitive::Sub => binary("sub", x, inputs[1], |a, b| a - b),
        Primitive::Mul => binary("mul", x, inputs[1], |a, b| a * b),
        Primitive::Softmax | Primitive::LogSoftmax | Primitive::LayerNorm { .. } if x.rank() == 0 => {
            Err(shape_err(prim.name(), &[x.shape()]))
        }
        Primitive::Softmax => Ok(softmax_rows(x)),
        Primitive::LogSoftmax => Ok(log_softmax_rows(x)),
        Primitive::LayerNorm { eps } => {
            let d = x.last_dim() as f64;
            let mut out = Vec::with_capacity(x.len());
            for row in x.rows() {
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mean) * inv));
            }
            Array::new(x.shape().to_vec(), out)
        }
        Primitive::Gelu => Ok(x.map(gelu)),
        Primitive::Sigmoid => Ok(x.map(sigmoid)),
        Primitive::Log => Ok(x.map(f64::ln)),
        Primitive::Exp => Ok(x.map(f64::exp)),
        Primitive::Clip { lo, hi } => {
            if lo > hi {
                return Err(Error::Shape {
                    op: "clip",
                    shapes: format!("empty interval [{lo}, {hi}]"),
                });
            }
            Ok(x.map(|v| v.clamp(*lo, *hi)))
        }
        Primitive::Embedding { ids, batch_shape } => {
            if x.rank() != 2 || batch_shape.iter().product::<usize>() != ids.len() {
                return Err(shape_err("embedding", &[x.shape(), batch_shape]));
            }
            let (vocab, d) = (x.shape()[0], x.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::TokenOutOfRange { id, vocab });
                }
                out.extend_from_slice(&x.data()[id * d..(id + 1) * d]);
            }
            let mut shape = batch_shape.clone();
            shape.push(d);
            Array::new(shape, out)
        }
        Primitive::Transpose => {
            if x.rank() < 2 {
                return Err(shape_err("transpose", &[x.shape()]));
            }
            Ok(transpose_last2(x))
        }
        Primitive::Reshape { shape } => x.clone().reshaped(shape),
        Primitive::Sum => Ok(Array::scalar(x.sum())),
        Primitive::Affine { scale, shift } => Ok(x.map(|v| scale * v + shift)),
        Primitive::Select { axis, index } => {
            if *axis >= x.rank() || *index >= x.shape()[*axis] {
                return Err(Error::Shape {
                    op: "select",
                    shapes: format!("axis {axis} index {index} on {:?}", x.shape()),
                });
            }
            let (outer, n, inner) = outer_inner(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = (o * n + index) * inner;
                out.extend_from_slice(&x.data()[base..base + inner]);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(*axis);
            Array::new(shape, out)
        }
        Primitive::TakeAlongLast { indices } => {
            let v = x.last_dim();
            if x.rank() == 0 || x.len() / v != indices.len() {
                return Err(Error::Shape {
                    op: "take_along_last",
                    shapes: format!("{} indices for {:?}", indices.len(), x.shape()),
                });
            }
            let mut out = Vec::with_capacity(indices.len());
            for (row, &i) in x.rows().zip(indices) {
                if i >= v {
                    return Err(Error::Shape {
                        op: "take_along_last",
                        shapes: format!("index {i} for last axis {v}"),
                    });
                }
                out.push(row[i]);
            }
            Array::new(x.shape()[..x.rank() - 1].to_vec(), out)
        }
        Primitive::Broadcast { shape } => {
            let r = x.rank();
            if r > shape.len() || &shape[shape.len() - r..] != x.shape() {
                return Err(shape_err("broadcast", &[x.shape(), shape]));
            }
            let reps: usize = shape[..shape.len() - r].iter().product();
            let mut out = Vec::with_capacity(reps * x.len());
            for _ in 0..reps {
                out.extend_from_slice(x.data());
            }
            Array::new(shape.clone(), out)
        }
        Primitive::Gather { indices } => {
            if x.rank() != 1 || indices.iter().any(|&i| i >= x.len()) {
                return Err(Error::Shape {
                    op: "gather",
                    shapes: format!("indices into {:?}", x.shape()),
                });
            }
            Ok(Array::from_vec(indices.iter().map(|&i| x.data()[i]).collect()))
        }
        Primitive::WeightedSum => {
            let w = x;
            let items = &inputs[1..];
            if w.rank() != 1 || w.len() != items.len() || items.is_empty() {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    shapes: format!("weights {:?} for {} items", w.shape(), items.len()),
                });
            }
            let shape = items[0].shape();
            let mut out = vec![0.0; items[0].len()];
            for (&wi, item) in w.data().iter().zip(items) {
                if item.shape() != shape {
                    return Err(shape_err("weighted_sum", &[shape, item.shape()]));
                }
                for (o, v) in out.iter_mut().zip(item.data()) {
                    *o += wi * v;
                }
            }
            Array::new(shape.to_vec(), out)
        }
    }
}

/// Reduce `g` (shaped like the output) onto an operand that may be scalar.
fn unbroadcast(g: Array, operand: &Array) -> Array {
    if operand.is_scalar() && !g.is_scalar() {
        Array::scalar(g.sum())
    } else {
        g
    }
}

fn scaled_by(other: &Array, g: &Array) -> Array {
    if other.is_scalar() {
        let s = other.item();
        g.map(|v| v * s)
    } else if g.shape() == other.shape() {
        g.zip_map(other, |a, b| a * b).expect("same shape")
    } else {
        // out was scalar-broadcast from this operand's perspective
        let s = g.item();
        other.map(|v| v * s)
    }
}

fn vjp(prim: &Primitive, inputs: &[&Array], out: &Array, dout: &Array, need: &[bool]) -> Vec<Option<Array>> {
    let x = inputs[0];
    let one = |g: Array| vec![if need[0] { Some(g) } else { None }];
    match prim {
        Primitive::MatMul => {
            let b = inputs[1];
            let (layout, _) = matmul_layout(x, b).expect("validated in forward");
            let mut da = need[0].then(|| vec![0.0; x.len()]);
            let mut db = need[1].then(|| vec![0.0; b.len()]);
            let g = dout.data();
            match layout {
                MatMulLayout::Flat { m, k, n } => {
                    if let Some(da) = da.as_mut() {
                        kernels::gemm(m, n, k, g, (n, 1), b.data(), (1, n), da, 0.0);
                    }
                    if let Some(db) = db.as_mut() {
                        kernels::gemm(k, m, n, x.data(), (1, k), g, (n, 1), db, 0.0);
                    }
                }
                MatMulLayout::Batched { b: nb, m, k, n } => {
                    for i in 0..nb {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        if let Some(da) = da.as_mut() {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                gi,
                                (n, 1),
                                &b.data()[i * k * n..(i + 1) * k * n],
                                (1, n),
                                &mut da[i * m * k..(i + 1) * m * k],
                                0.0,
                            );
                        }
                        if let Some(db) = db.as_mut() {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &x.data()[i * m * k..(i + 1) * m * k],
                                (1, k),
                                gi,
                                (n, 1),
                                &mut db[i * k * n..(i + 1) * k * n],
                                0.0,
                            );
                        }
                    }
                }
            }
            vec![
                da.map(|d| Array::new(x.shape().to_vec(), d).expect("shape")),
                db.map(|d| Array::new(b.shape().to_vec(), d).expect("shape")),
            ]
        }
        Primitive::Add => vec![
            need[0].then(|| unbroadcast(dout.clone(), x)),
            need[1].then(|| unbroadcast(dout.clone(), inputs[1])),
        ],
        Primitive::Sub => vec![
            need[0].then(|| unbroadcast(dout.clone(), x)),
            need[1].then(|| unbroadcast(dout.map(|v| -v), inputs[1])),
        ],
        Primitive::Mul => {
            let b = inputs[1];
            vec![
                need[0].then(|| unbroadcast(scaled_by(b, dout), x)),
                need[1].then(|| unbroadcast(scaled_by(x, dout), b)),
            ]
        }
        Primitive::Softmax => {
            let d = out.last_dim();
            let mut g = Vec::with_capacity(out.len());
            for (y, dy) in out.rows().zip(dout.data().chunks_exact(d)) {
                let s: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                g.extend(y.iter().zip(dy).map(|(yi, dyi)| yi * (dyi - s)));
            }
            one(Array::new(out.shape().to_vec(), g).expect("shape"))
        }
        Primitive::LogSoftmax => {
            let d = out.last_dim();
            let mut g = Vec::with_capacity(out.len());
            for (y, dy) in out.rows().zip(dout.data().chunks_exact(d)) {
                let s: f64 = dy.iter().sum();
                g.extend(y.iter().zip(dy).map(|(yi, dyi)| dyi - yi.exp() * s));
            }
            one(Array::new(out.shape().to_vec(), g).expect("shape"))
        }
        Primitive::LayerNorm { eps } => {
            let d = x.last_dim();
            let n = d as f64;
            let mut g = Vec::with_capacity(x.len());
            for ((xr, yr), dy) in x.rows().zip(out.rows()).zip(dout.data().chunks_exact(d)) {
                let mean = xr.iter().sum::<f64>() / n;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let mdy = dy.iter().sum::<f64>() / n;
                let mdyy = dy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                g.extend(dy.iter().zip(yr).map(|(dyi, yi)| inv * (dyi - mdy - yi * mdyy)));
            }
            one(Array::new(x.shape().to_vec(), g).expect("shape"))
        }
        Primitive::Gelu => one(x.zip_map(dout, |v, d| d * gelu_grad(v)).expect("shape")),
        Primitive::Sigmoid => one(out.zip_map(dout, |y, d| d * y * (1.0 - y)).expect("shape")),
        Primitive::Log => one(x.zip_map(dout, |v, d| d / v).expect("shape")),
        Primitive::Exp => one(out.zip_map(dout, |y, d| d * y).expect("shape")),
        Primitive::Clip { lo, hi } => one(x
            .zip_map(dout, |v, d| if v > *lo && v < *hi { d } else { 0.0 })
            .expect("shape")),
        Primitive::Embedding { ids, .. } => {
            let d = x.shape()[1];
            let mut g = Array::zeros(x.shape());
            let gd = g.data_mut();
            for (row, &id) in dout.data().chunks_exact(d).zip(ids) {
                for (a, b) in gd[id * d..(id + 1) * d].iter_mut().zip(row) {
                    *a += b;
                }
            }
            one(g)
        }
        Primitive::Transpose => one(transpose_last2(dout)),
        Primitive::Reshape { .. } => one(dout.clone().reshaped(x.shape()).expect("shape")),
        Primitive::Sum => {
            let s = dout.item();
            one(Array::full(x.shape(), s))
        }
        Primitive::Affine { scale, .. } => one(dout.map(|v| v * scale)),
        Primitive::Select { axis, index } => {
            let (outer, n, inner) = outer_inner(x.shape(), *axis);
            let mut g = Array::zeros(x.shape());
            let gd = g.data_mut();
            for o in 0..outer {
                let base = (o * n + index) * inner;
                gd[base..base + inner].copy_from_slice(&dout.data()[o * inner..(o + 1) * inner]);
            }
            one(g)
        }
        Primitive::TakeAlongLast { indices } => {
            let v = x.last_dim();
            let mut g = Array::zeros(x.shape());
            let gd = g.data_mut();
            for (r, (&i, &d)) in indices.iter().zip(dout.data()).enumerate() {
                gd[r * v + i] += d;
            }
            one(g)
        }
        Primitive::Broadcast { .. } => {
            let mut g = vec![0.0; x.len()];
            for chunk in dout.data().chunks_exact(x.len().max(1)) {
                for (a, b) in g.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            one(Array::new(x.shape().to_vec(), g).expect("shape"))
        }
        Primitive::Gather { indices } => {
            let mut g = Array::zeros(x.shape());
            let gd = g.data_mut();
            for (&i, &d) in indices.iter().zip(dout.data()) {
                gd[i] += d;
            }
            one(g)
        }
        Primitive::WeightedSum => {
            let items = &inputs[1..];
            let mut grads = Vec::with_capacity(inputs.len());
            grads.push(need[0].then(|| Array::from_vec(items.iter().map(|it| it.dot(dout)).collect())));
            for (i, _) in items.iter().enumerate() {
                let wi = x.data()[i];
                grads.push(need[i + 1].then(|| dout.map(|v| v * wi)));
            }
            grads
        }
    }
}
