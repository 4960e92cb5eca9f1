//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! tape order is a topological order and the graph is acyclic by construction.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CausalMask {
        x: Var,
        offset: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    BroadcastTo(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    faults: Faults,
}

/// Deliberately wrong backward rules, used to show that gradient checking
/// catches them.
#[derive(Debug, Default, Clone, Copy)]
pub struct Faults {
    pub tanh_backward_sign: bool,
}

/// Gradients produced by [`Graph::backward`], one per leaf that requires grad.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps each flat index of `out` to the flat index of a tensor with shape
/// `src` broadcast against it. `None` means the mapping is the identity.
fn broadcast_index(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    let n_out = numel(out);
    let n_src = numel(src);
    if n_src == n_out {
        return None;
    }
    let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Some((0..n_out).map(|o| o % n_src.max(1)).collect());
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        res.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(res)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            faults: Faults::default(),
        }
    }

    #[doc(hidden)]
    pub fn inject_faults(&mut self, faults: Faults) {
        self.faults = faults;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the value of `x` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| mismatch(op, sa, sb))?;
        let ia = broadcast_index(sa, &out);
        let ib = broadcast_index(sb, &out);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..numel(&out))
            .map(|i| f(da[at(&ia, i)], db[at(&ib, i)]))
            .collect();
        Ok((Tensor::new(&out, data)?, self.any_grad(&[a, b])))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, f), rg)
    }

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for rank-2 operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((m, k), (br, bc)) = match (&sa[..], &sb[..]) {
            ([m, k], [r, c]) => ((*m, *k), (*r, *c)),
            _ => return Err(mismatch(op, &sa, &sb)),
        };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch(op, &sa, &sb));
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::ZERO; m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                self.value(a).data(),
                k as isize,
                1,
                self.value(b).data(),
                rsb,
                csb,
                T::ZERO,
                &mut out,
                n as isize,
                1,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn last_dim(&self, x: Var) -> (usize, usize) {
        let shape = self.shape(x);
        let cols = *shape.last().unwrap();
        (numel(shape) / cols, cols)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for r in 0..rows {
            softmax_row(&mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(src.shape(), out).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, cols) = self.last_dim(x);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(src.shape(), out).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Sets entry `(i, j)` of a rank-2 score matrix to `-inf` whenever
    /// `j > offset + i`, so query `i` sees the first `offset` keys plus
    /// keys up to its own position.
    pub fn causal_mask(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (q, k) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..q {
            for j in (offset + i + 1).min(k)..k {
                out[i * k + j] = T::NEG_INFINITY;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&[q, k], out)?, Op::CausalMask { x, offset }, rg))
    }

    /// Layer normalisation over the last axis followed by the affine map
    /// `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.last_dim(x);
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_usize(cols);
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![T::ZERO; rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / n;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / n;
            let rstd = T::ONE / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * gd[c] + bd[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(self.shape(x), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.requires_grad(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        let rg = self.requires_grad(x);
        self.push(value, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.requires_grad(x);
        self.push(value, Op::Log(x), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "empty index list".into(),
            });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor::new(&[ids.len(), cols], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?);
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Broadcasts `x` to `shape` following the usual trailing-axis rules.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x);
        match broadcast_shape(src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(mismatch("broadcast_to", src, shape)),
        }
        let map = broadcast_index(src, shape);
        let d = self.value(x).data();
        let data = (0..numel(shape)).map(|i| d[at(&map, i)]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastTo(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let n = T::from_usize(self.value(x).numel());
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), rg)
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let n = T::from_usize(len);
        for v in &mut out {
            *v = *v / n;
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Cross-entropy between softmax(`logits` rows) and integer `targets`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(mismatch("cross_entropy", &[rows, cols], &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut loss = T::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            let row = &src[r * cols..(r + 1) * cols];
            loss += log_sum_exp(row) - row[t];
            softmax_row(&mut probs[r * cols..(r + 1) * cols]);
        }
        let scale = match reduction {
            Reduction::Sum => T::ONE,
            Reduction::Mean => T::ONE / T::from_usize(rows),
        };
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Returns gradients for every leaf created with `requires_grad`; leaves
    /// that do not influence the loss get all-zero gradients. The graph itself
    /// is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let data = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::ZERO; n.value.numel()]);
                    Some(Tensor::new(n.value.shape(), data).unwrap())
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::ONE
                } else {
                    T::ONE
                };
                if let Some(buf) = self.grad_buf(grads, *a) {
                    let map = broadcast_index(self.shape(*a), out_shape);
                    for (o, &gv) in g.iter().enumerate() {
                        buf[at(&map, o)] += gv;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    let map = broadcast_index(self.shape(*b), out_shape);
                    for (o, &gv) in g.iter().enumerate() {
                        buf[at(&map, o)] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let ma = broadcast_index(self.shape(*a), out_shape);
                let mb = broadcast_index(self.shape(*b), out_shape);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.grad_buf(grads, *a) {
                    for (o, &gv) in g.iter().enumerate() {
                        buf[at(&ma, o)] += gv * db[at(&mb, o)];
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *b) {
                    for (o, &gv) in g.iter().enumerate() {
                        buf[at(&mb, o)] += gv * da[at(&ma, o)];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv * *f;
                    }
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = out_shape[1];
                if let Some(buf) = self.grad_buf(grads, *a) {
                    // dA[m,k] += dC[m,n] . op(B)^T
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            g,
                            n as isize,
                            1,
                            self.value(*b).data(),
                            rs,
                            cs,
                            T::ONE,
                            buf,
                            k as isize,
                            1,
                        );
                    }
                }
                let a_data = self.value(*a).data();
                if let Some(buf) = self.grad_buf(grads, *b) {
                    unsafe {
                        if *trans_b {
                            // dB[n,k] += dC^T[n,m] . A[m,k]
                            T::gemm(
                                n,
                                m,
                                k,
                                T::ONE,
                                g,
                                1,
                                n as isize,
                                a_data,
                                k as isize,
                                1,
                                T::ONE,
                                buf,
                                k as isize,
                                1,
                            );
                        } else {
                            // dB[k,n] += A^T[k,m] . dC[m,n]
                            T::gemm(
                                k,
                                m,
                                n,
                                T::ONE,
                                a_data,
                                1,
                                k as isize,
                                g,
                                n as isize,
                                1,
                                T::ONE,
                                buf,
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *out_shape.last().unwrap();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((y, gy), dx) in out
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(buf.chunks_mut(cols))
                    {
                        let mut dot = T::ZERO;
                        for (&yv, &gv) in y.iter().zip(gy) {
                            dot += yv * gv;
                        }
                        for c in 0..cols {
                            dx[c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = *out_shape.last().unwrap();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((y, gy), dx) in out
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(buf.chunks_mut(cols))
                    {
                        let mut total = T::ZERO;
                        for &gv in gy {
                            total += gv;
                        }
                        for c in 0..cols {
                            dx[c] += gy[c] - y[c].exp() * total;
                        }
                    }
                }
            }
            Op::CausalMask { x, offset } => {
                let k = out_shape[1];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (idx, &gv) in g.iter().enumerate() {
                        let (r, c) = (idx / k, idx % k);
                        if c <= offset + r {
                            buf[idx] += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let cols = *out_shape.last().unwrap();
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let n = T::from_usize(cols);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..mean.len() {
                        let row = &xd[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let mut sum_d = T::ZERO;
                        let mut sum_dx = T::ZERO;
                        for c in 0..cols {
                            let xhat = (row[c] - mean[r]) * rstd[r];
                            let d = gy[c] * gd[c];
                            sum_d += d;
                            sum_dx += d * xhat;
                        }
                        for c in 0..cols {
                            let xhat = (row[c] - mean[r]) * rstd[r];
                            let d = gy[c] * gd[c];
                            buf[r * cols + c] += rstd[r] * (d - sum_d / n - xhat * sum_dx / n);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *gamma) {
                    for r in 0..mean.len() {
                        for c in 0..cols {
                            let xhat = (xd[r * cols + c] - mean[r]) * rstd[r];
                            buf[c] += g[r * cols + c] * xhat;
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *beta) {
                    for r in 0..mean.len() {
                        for c in 0..cols {
                            buf[c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *b += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Tanh(x) => {
                let sign = if self.faults.tanh_backward_sign {
                    -T::ONE
                } else {
                    T::ONE
                };
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((b, &gv), &y) in buf.iter_mut().zip(g).zip(out) {
                        *b += sign * gv * (T::ONE - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((b, &gv), &y) in buf.iter_mut().zip(g).zip(out) {
                        *b += gv * y;
                    }
                }
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        *b += gv / xv;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = out_shape[1];
                if let Some(buf) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            buf[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if let Some(buf) = self.grad_buf(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (b, &gv) in buf[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *b += gv;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = out_shape[*axis];
                let full = in_shape[*axis];
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (b, &gv) in buf[base..base + len * inner].iter_mut().zip(src) {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                }
            }
            Op::BroadcastTo(x) => {
                let map = broadcast_index(self.shape(*x), out_shape);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (o, &gv) in g.iter().enumerate() {
                        buf[at(&map, o)] += gv;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                let n = T::from_usize(self.value(*x).numel());
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for b in buf.iter_mut() {
                        *b += g[0] / n;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let len = in_shape[*axis];
                let n = T::from_usize(len);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i] / n;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                scale,
            } => {
                let cols = self.shape(*logits)[1];
                let s = g[0] * *scale;
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == t { T::ONE } else { T::ZERO };
                            buf[r * cols + c] += s * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, or `None` when `v` does not need one.
    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; node.value.numel()]))
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = T::NEG_INFINITY;
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut total = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = T::NEG_INFINITY;
    for &v in row {
        max = max.max(v);
    }
    let mut total = T::ZERO;
    for &v in row {
        total += (v - max).exp();
    }
    max + total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_vector_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 8], 0.7));
        let gamma = g.constant(Tensor::full(&[8], 1.0));
        let beta = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let bad = g.constant(Tensor::zeros(&[4, 4]));
        match g.matmul(a, bad) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[3], &[5.0, 6.0, 7.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_tensor_gradients_sum() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[1], &[3.0]));
        let a = g.scale(w, 2.0);
        let b = g.scale(w, 5.0);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_never_receive_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2], &[3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(
            g.backward(w),
            Err(TensorError::NonScalarLoss(shape)) if shape == vec![2]
        ));
    }

    #[test]
    fn causal_mask_hides_future_keys() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let m = g.causal_mask(x, 1).unwrap();
        let p = g.softmax(m);
        let v = g.value(p).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.0, 0.0]);
        assert!((v[4] - 1.0 / 3.0).abs() < 1e-6 && v[7] == 0.0);
    }

    #[test]
    fn broadcast_index_general_case() {
        // [3,1] against [3,2]: middle-axis broadcast, not a suffix.
        let map = broadcast_index(&[3, 1], &[3, 2]).unwrap();
        assert_eq!(map, vec![0, 0, 1, 1, 2, 2]);
        let map = broadcast_index(&[2], &[3, 2]).unwrap();
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[1, 3], Reduction::Mean).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
}
