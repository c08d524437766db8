use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, axpy, dot};
use super::{Float, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// One independent attention problem inside a batched attention call:
/// query rows `q_start..q_start+q_len` attend to key/value rows
/// `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    segments: Vec<Segment>,
    heads: usize,
}

impl AttentionLayout {
    pub fn new(segments: Vec<Segment>, heads: usize) -> Self {
        Self { segments, heads }
    }

    /// `groups` blocks of `q_per` queries, block `i` attending to the key
    /// range `keys[i]`.
    pub fn blocks(q_per: usize, keys: &[(usize, usize)], heads: usize) -> Self {
        let segments = keys
            .iter()
            .enumerate()
            .map(|(i, &(k_start, k_len))| Segment {
                q_start: i * q_per,
                q_len: q_per,
                k_start,
                k_len,
            })
            .collect();
        Self { segments, heads }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn prob_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.q_len * s.k_len * self.heads)
            .sum()
    }
}

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, F),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Gather { src: usize, index: Vec<usize> },
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanAxis { src: usize, axis: usize },
    SegmentMean { src: usize, segments: Vec<(usize, usize)> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, inv_std: Vec<F> },
    Gelu(usize),
    Relu(usize),
    L2Normalize { x: usize, norms: Vec<F> },
    RowNorm(usize),
    Softmax { x: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
    Attention { q: usize, k: usize, v: usize, layout: Rc<AttentionLayout>, probs: Vec<F> },
}

struct Node<F> {
    value: Rc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<F> {
    graph: u64,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

/// Single-use computation tape. Values are computed eagerly as ops are
/// recorded; [`Graph::backward`] may run once.
pub struct Graph<F: Float> {
    id: u64,
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: bool,
    consumed: Cell<bool>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
            consumed: Cell::new(false),
        }
    }

    /// Rejects NaN/Inf at every op boundary.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        let n = self.nodes.borrow().len();
        for v in vars {
            if v.graph != self.id || v.index >= n {
                return Err(TensorError::Detached);
            }
        }
        Ok(())
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<F>>> {
        self.nodes.borrow()
    }

    fn push(&self, name: &'static str, value: Tensor<F>, op: Op<F>, parents: &[usize]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: nodes.len() - 1,
        })
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let nodes = self.nodes();
        let shape = nodes[v.index].value.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                reason: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = {
            let nodes = self.nodes();
            kernels::matmul(nodes[a.index].value.data(), nodes[b.index].value.data(), m, k, n)
        };
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul(a.index, b.index), &[a.index, b.index])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let (m, n) = self.rank2("transpose", a)?;
        let out = {
            let nodes = self.nodes();
            transpose_data(nodes[a.index].value.data(), m, n)
        };
        self.push("transpose", Tensor::new([n, m], out)?, Op::Transpose(a.index), &[a.index])
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        self.check(&[a, b])?;
        let nodes = self.nodes();
        let (sa, sb) = (nodes[a.index].value.shape(), nodes[b.index].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        let nodes = self.nodes();
        nodes[a.index]
            .value
            .data()
            .iter()
            .zip(nodes[b.index].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", Tensor::new(shape, out)?, Op::Add(a.index, b.index), &[a.index, b.index])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", Tensor::new(shape, out)?, Op::Sub(a.index, b.index), &[a.index, b.index])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a.index, b.index), &[a.index, b.index])
    }

    /// Adds a length-n row to every row of `a` (leading-axis broadcast).
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.check(&[a, bias])?;
        let (shape, out) = {
            let nodes = self.nodes();
            let (av, bv) = (&nodes[a.index].value, &nodes[bias.index].value);
            let (_, n) = av.dims2();
            if bv.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let mut out = av.data().to_vec();
            for row in out.chunks_mut(n) {
                for (x, &b) in row.iter_mut().zip(bv.data()) {
                    *x += b;
                }
            }
            (av.shape().to_vec(), out)
        };
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(a.index, bias.index), &[a.index, bias.index])
    }

    pub fn scale(&self, a: Var, c: F) -> Result<Var> {
        self.check(&[a])?;
        let t = self.nodes()[a.index].value.map(|x| x * c);
        self.push("scale", t, Op::Scale(a.index, c), &[a.index])
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let t = self.nodes()[a.index].value.map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(a.index), &[a.index])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let t = self.nodes()[a.index].value.map(|x| x.max(F::zero()));
        self.push("relu", t, Op::Relu(a.index), &[a.index])
    }

    // ---- shape ----------------------------------------------------------

    /// Concatenates rank-1 tensors (axis 0) or matrices (axis 0 or 1).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: "no inputs".into(),
            });
        }
        let (shape, out) = {
            let nodes = self.nodes();
            let first = nodes[parts[0].index].value.shape().to_vec();
            let rank = first.len();
            if rank == 0 || rank > 2 || axis >= rank {
                return Err(TensorError::Axis {
                    op: "concat",
                    axis,
                    shape: first,
                });
            }
            for p in &parts[1..] {
                let s = nodes[p.index].value.shape();
                let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.index].value.shape()[axis]).sum();
            let mut shape = first.clone();
            shape[axis] = total;
            let mut out = Vec::with_capacity(shape.iter().product());
            if rank == 1 || axis == 0 {
                for p in parts {
                    out.extend_from_slice(nodes[p.index].value.data());
                }
            } else {
                for r in 0..first[0] {
                    for p in parts {
                        out.extend_from_slice(nodes[p.index].value.row(r));
                    }
                }
            }
            (shape, out)
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Contiguous range `start..start+len` along `axis` of a vector or matrix.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let (shape, out) = {
            let nodes = self.nodes();
            let v = &nodes[a.index].value;
            let s = v.shape();
            if s.is_empty() || s.len() > 2 || axis >= s.len() {
                return Err(TensorError::Axis {
                    op: "slice",
                    axis,
                    shape: s.to_vec(),
                });
            }
            if len == 0 || start + len > s[axis] {
                return Err(TensorError::Index {
                    op: "slice",
                    index: start + len,
                    extent: s[axis],
                });
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            let out = if s.len() == 1 {
                v.data()[start..start + len].to_vec()
            } else if axis == 0 {
                v.data()[start * s[1]..(start + len) * s[1]].to_vec()
            } else {
                v.rows().flat_map(|r| r[start..start + len].iter().copied()).collect()
            };
            (shape, out)
        };
        self.push("slice", Tensor::new(shape, out)?, Op::Slice { src: a.index, axis, start }, &[a.index])
    }

    /// Selects rows (with repetition allowed). Gradients scatter-add back.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let out = {
            let nodes = self.nodes();
            let v = &nodes[a.index].value;
            let (rows, cols) = v.dims2();
            let mut out = Vec::with_capacity(index.len() * cols);
            for &i in index {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        extent: rows,
                    });
                }
                out.extend_from_slice(v.row(i));
            }
            Tensor::new([index.len(), cols], out)?
        };
        self.push("gather_rows", out, Op::Gather { src: a.index, index: index.to_vec() }, &[a.index])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let t = (*self.nodes()[a.index].value).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a.index), &[a.index])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.nodes()[a.index].value.sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(a.index), &[a.index])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let m = {
            let nodes = self.nodes();
            let v = &nodes[a.index].value;
            v.sum() / F::of(v.numel() as f64)
        };
        self.push("mean", Tensor::scalar(m), Op::MeanAll(a.index), &[a.index])
    }

    /// Mean over one axis of a matrix; the reduced axis is dropped.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        self.check(&[a])?;
        let (r, c) = self.rank2("mean_axis", a)?;
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "mean_axis",
                axis,
                shape: vec![r, c],
            });
        }
        let out = {
            let nodes = self.nodes();
            let v = &nodes[a.index].value;
            if axis == 0 {
                let mut acc = vec![F::zero(); c];
                for row in v.rows() {
                    axpy(F::one(), row, &mut acc);
                }
                let inv = F::one() / F::of(r as f64);
                Tensor::vector(acc.into_iter().map(|x| x * inv).collect())
            } else {
                let inv = F::one() / F::of(c as f64);
                Tensor::vector(v.rows().map(|row| row.iter().copied().sum::<F>() * inv).collect())
            }
        };
        self.push("mean_axis", out, Op::MeanAxis { src: a.index, axis }, &[a.index])
    }

    /// Row means over contiguous `(start, len)` row segments → [S × cols].
    pub fn segment_mean(&self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        self.check(&[a])?;
        let out = {
            let nodes = self.nodes();
            let v = &nodes[a.index].value;
            let (rows, cols) = v.dims2();
            let mut out = vec![F::zero(); segments.len() * cols];
            for (s, &(start, len)) in segments.iter().enumerate() {
                if len == 0 || start + len > rows {
                    return Err(TensorError::Index {
                        op: "segment_mean",
                        index: start + len,
                        extent: rows,
                    });
                }
                let dst = &mut out[s * cols..(s + 1) * cols];
                for r in start..start + len {
                    axpy(F::one(), v.row(r), dst);
                }
                let inv = F::one() / F::of(len as f64);
                dst.iter_mut().for_each(|x| *x *= inv);
            }
            Tensor::new([segments.len(), cols], out)?
        };
        self.push("segment_mean", out, Op::SegmentMean { src: a.index, segments: segments.to_vec() }, &[a.index])
    }

    // ---- normalization / activations -----------------------------------

    /// Layer norm over the last axis with per-feature affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let (t, xhat, inv_std) = {
            let nodes = self.nodes();
            let xv = &nodes[x.index].value;
            let (g, b) = (&nodes[gamma.index].value, &nodes[beta.index].value);
            let (rows, n) = xv.dims2();
            if g.numel() != n || b.numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let eps = F::of(LAYER_NORM_EPS);
            let nf = F::of(n as f64);
            let mut xhat = Vec::with_capacity(rows * n);
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(rows * n);
            for row in xv.rows() {
                let mean = row.iter().copied().sum::<F>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                let inv = F::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..n {
                    let h = (row[j] - mean) * inv;
                    xhat.push(h);
                    out.push(g.data()[j] * h + b.data()[j]);
                }
            }
            (Tensor::new(xv.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                xhat,
                inv_std,
            },
            &[x.index, gamma.index, beta.index],
        )
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let (t, norms) = {
            let nodes = self.nodes();
            let xv = &nodes[x.index].value;
            let mut out = Vec::with_capacity(xv.numel());
            let mut norms = Vec::new();
            for row in xv.rows() {
                let n = dot(row, row).sqrt();
                if n == F::zero() {
                    return Err(TensorError::Invalid {
                        op: "l2_normalize",
                        reason: "zero-norm row".into(),
                    });
                }
                norms.push(n);
                out.extend(row.iter().map(|&v| v / n));
            }
            (Tensor::new(xv.shape().to_vec(), out)?, norms)
        };
        self.push("l2_normalize", t, Op::L2Normalize { x: x.index, norms }, &[x.index])
    }

    /// Euclidean norm of each row → vector of length rows.
    pub fn row_norm(&self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let t = {
            let nodes = self.nodes();
            Tensor::vector(nodes[x.index].value.rows().map(|r| dot(r, r).sqrt()).collect())
        };
        self.push("row_norm", t, Op::RowNorm(x.index), &[x.index])
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let t = {
            let nodes = self.nodes();
            let xv = &nodes[x.index].value;
            let shape = xv.shape();
            if axis >= shape.len() {
                return Err(TensorError::Axis {
                    op: "softmax",
                    axis,
                    shape: shape.to_vec(),
                });
            }
            let (outer, n, inner) = lane_dims(shape, axis);
            let mut out = xv.data().to_vec();
            let mut lane = vec![F::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..n {
                        lane[j] = out[(o * n + j) * inner + i];
                    }
                    kernels::softmax_in_place(&mut lane);
                    for j in 0..n {
                        out[(o * n + j) * inner + i] = lane[j];
                    }
                }
            }
            Tensor::new(shape.to_vec(), out)?
        };
        self.push("softmax", t, Op::Softmax { x: x.index, axis }, &[x.index])
    }

    /// Mean over rows of −log softmax(logits)[row, target].
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let (rows, cols) = self.rank2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len()],
            });
        }
        let (loss, probs) = {
            let nodes = self.nodes();
            let lv = &nodes[logits.index].value;
            let mut probs = Vec::with_capacity(rows * cols);
            let mut total = F::zero();
            for (r, row) in lv.rows().enumerate() {
                let t = targets[r];
                if t >= cols {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: cols,
                    });
                }
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = sum.ln();
                total += lse - (row[t] - max);
                probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
            }
            (total / F::of(rows as f64), probs)
        };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.index],
        )
    }

    /// Batched multi-head scaled dot-product attention,
    /// softmax(Q Kᵀ / √d_head) V, evaluated independently per segment.
    pub fn attention(&self, q: Var, k: Var, v: Var, layout: &Rc<AttentionLayout>) -> Result<Var> {
        self.check(&[q, k, v])?;
        let (mq, d) = self.rank2("attention", q)?;
        let (mk, dk) = self.rank2("attention", k)?;
        let (mv, dv) = self.rank2("attention", v)?;
        if dk != d || dv != d || mv != mk {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: vec![mq, d],
                rhs: vec![mk, dk],
            });
        }
        let h = layout.heads;
        if h == 0 || d % h != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                reason: format!("width {d} not divisible by {h} heads"),
            });
        }
        for s in &layout.segments {
            if s.k_len == 0 {
                return Err(TensorError::Invalid {
                    op: "attention",
                    reason: "segment with no keys".into(),
                });
            }
            if s.q_start + s.q_len > mq || s.k_start + s.k_len > mk {
                return Err(TensorError::Index {
                    op: "attention",
                    index: (s.q_start + s.q_len).max(s.k_start + s.k_len),
                    extent: mq.min(mk),
                });
            }
        }
        let dh = d / h;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (out, probs) = {
            let nodes = self.nodes();
            let (qd, kd, vd) = (
                nodes[q.index].value.data(),
                nodes[k.index].value.data(),
                nodes[v.index].value.data(),
            );
            let mut out = vec![F::zero(); mq * d];
            let mut probs = Vec::with_capacity(layout.prob_len());
            for s in &layout.segments {
                for head in 0..h {
                    let off = head * dh;
                    for i in s.q_start..s.q_start + s.q_len {
                        let qi = &qd[i * d + off..i * d + off + dh];
                        let base = probs.len();
                        for j in s.k_start..s.k_start + s.k_len {
                            probs.push(dot(qi, &kd[j * d + off..j * d + off + dh]) * scale);
                        }
                        let p = &mut probs[base..];
                        kernels::softmax_in_place(p);
                        let orow = &mut out[i * d + off..i * d + off + dh];
                        for (jj, j) in (s.k_start..s.k_start + s.k_len).enumerate() {
                            axpy(p[jj], &vd[j * d + off..j * d + off + dh], orow);
                        }
                    }
                }
            }
            (out, probs)
        };
        self.push(
            "attention",
            Tensor::new([mq, d], out)?,
            Op::Attention {
                q: q.index,
                k: k.index,
                v: v.index,
                layout: Rc::clone(layout),
                probs,
            },
            &[q.index, k.index, v.index],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Every leaf created with
    /// `requires_grad` receives a gradient (zero if unreachable).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        self.check(&[loss])?;
        if self.consumed.get() {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let nodes = self.nodes();
        let lv = &nodes[loss.index].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.consumed.set(true);

        let n = nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.index] = Some(vec![F::one()]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }
}

fn transpose_data<F: Float>(a: &[F], m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Adds `contribution` (built lazily) into the gradient slot of `target`.
fn accumulate<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    target: usize,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[target].requires_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![F::zero(); nodes[target].value.numel()]);
    f(slot);
}

fn backprop_node<F: Float>(nodes: &[Node<F>], node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let val = |i: usize| -> &Tensor<F> { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2();
            let (_, n) = val(*b).dims2();
            accumulate(nodes, grads, *a, |ga| kernels::matmul_nt_acc(g, val(*b).data(), m, n, k, ga));
            accumulate(nodes, grads, *b, |gb| kernels::matmul_tn_acc(val(*a).data(), g, m, k, n, gb));
        }
        Op::Transpose(a) => {
            let (m, n) = val(*a).dims2();
            let gt = transpose_data(g, n, m);
            accumulate(nodes, grads, *a, |ga| axpy(F::one(), &gt, ga));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| axpy(F::one(), g, ga));
            accumulate(nodes, grads, *b, |gb| axpy(F::one(), g, gb));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| axpy(F::one(), g, ga));
            accumulate(nodes, grads, *b, |gb| axpy(-F::one(), g, gb));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                    *x += gi * bi;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                    *x += gi * ai;
                }
            });
        }
        Op::AddRow(a, bias) => {
            accumulate(nodes, grads, *a, |ga| axpy(F::one(), g, ga));
            let n = val(*bias).numel();
            accumulate(nodes, grads, *bias, |gb| {
                for row in g.chunks(n) {
                    axpy(F::one(), row, gb);
                }
            });
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |ga| axpy(*c, g, ga)),
        Op::Concat { parts, axis } => {
            let out_shape = node.value.shape();
            if out_shape.len() == 1 || *axis == 0 {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    accumulate(nodes, grads, p, |gp| axpy(F::one(), &g[off..off + len], gp));
                    off += len;
                }
            } else {
                let total = out_shape[1];
                let mut col = 0;
                for &p in parts {
                    let (rows, w) = val(p).dims2();
                    accumulate(nodes, grads, p, |gp| {
                        for r in 0..rows {
                            axpy(F::one(), &g[r * total + col..r * total + col + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    });
                    col += w;
                }
            }
        }
        Op::Slice { src, axis, start } => {
            let s = val(*src).shape().to_vec();
            let out_shape = node.value.shape();
            accumulate(nodes, grads, *src, |gs| {
                if s.len() == 1 {
                    axpy(F::one(), g, &mut gs[*start..*start + g.len()]);
                } else if *axis == 0 {
                    axpy(F::one(), g, &mut gs[start * s[1]..start * s[1] + g.len()]);
                } else {
                    let w = out_shape[1];
                    for r in 0..s[0] {
                        axpy(F::one(), &g[r * w..(r + 1) * w], &mut gs[r * s[1] + start..r * s[1] + start + w]);
                    }
                }
            });
        }
        Op::Gather { src, index } => {
            let (_, cols) = val(*src).dims2();
            accumulate(nodes, grads, *src, |gs| {
                for (r, &i) in index.iter().enumerate() {
                    axpy(F::one(), &g[r * cols..(r + 1) * cols], &mut gs[i * cols..(i + 1) * cols]);
                }
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |ga| axpy(F::one(), g, ga)),
        Op::SumAll(a) => accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::MeanAll(a) => {
            let c = g[0] / F::of(val(*a).numel() as f64);
            accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += c));
        }
        Op::MeanAxis { src, axis } => {
            let (r, c) = val(*src).dims2();
            accumulate(nodes, grads, *src, |gs| {
                if *axis == 0 {
                    let inv = F::one() / F::of(r as f64);
                    for row in gs.chunks_mut(c) {
                        axpy(inv, g, row);
                    }
                } else {
                    let inv = F::one() / F::of(c as f64);
                    for (row, &gi) in gs.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi * inv);
                    }
                }
            });
        }
        Op::SegmentMean { src, segments } => {
            let (_, cols) = val(*src).dims2();
            accumulate(nodes, grads, *src, |gs| {
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = F::one() / F::of(len as f64);
                    let gsrc = &g[s * cols..(s + 1) * cols];
                    for r in start..start + len {
                        axpy(inv, gsrc, &mut gs[r * cols..(r + 1) * cols]);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let gam = val(*gamma).data();
            let n = gam.len();
            accumulate(nodes, grads, *gamma, |gg| {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            });
            accumulate(nodes, grads, *beta, |gb| {
                for grow in g.chunks(n) {
                    axpy(F::one(), grow, gb);
                }
            });
            accumulate(nodes, grads, *x, |gx| {
                let nf = F::of(n as f64);
                let mut gh = vec![F::zero(); n];
                for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    for j in 0..n {
                        gh[j] = grow[j] * gam[j];
                    }
                    let sum_gh: F = gh.iter().copied().sum();
                    let sum_ghh = dot(&gh, hrow);
                    let c = inv_std[r] / nf;
                    let dst = &mut gx[r * n..(r + 1) * n];
                    for j in 0..n {
                        dst[j] += c * (nf * gh[j] - sum_gh - hrow[j] * sum_ghh);
                    }
                }
            });
        }
        Op::Gelu(a) => accumulate(nodes, grads, *a, |ga| {
            for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                *x += gi * kernels::gelu_grad(ai);
            }
        }),
        Op::Relu(a) => accumulate(nodes, grads, *a, |ga| {
            for ((x, &gi), &ai) in ga.iter_mut().zip(g).zip(val(*a).data()) {
                if ai > F::zero() {
                    *x += gi;
                }
            }
        }),
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let (_, c) = node.value.dims2();
            accumulate(nodes, grads, *x, |gx| {
                for (r, &nrm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let gy = dot(gr, yr);
                    let dst = &mut gx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] += (gr[j] - yr[j] * gy) / nrm;
                    }
                }
            });
        }
        Op::RowNorm(x) => {
            let xv = val(*x);
            let (_, c) = xv.dims2();
            let norms = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for (r, row) in xv.rows().enumerate() {
                    if norms[r] > F::zero() {
                        axpy(g[r] / norms[r], row, &mut gx[r * c..(r + 1) * c]);
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = lane_dims(node.value.shape(), *axis);
            accumulate(nodes, grads, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let s: F = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (rows, cols) = val(*logits).dims2();
            let c = g[0] / F::of(rows as f64);
            accumulate(nodes, grads, *logits, |gl| {
                for r in 0..rows {
                    for j in 0..cols {
                        gl[r * cols + j] += c * probs[r * cols + j];
                    }
                    gl[r * cols + targets[r]] -= c;
                }
            });
        }
        Op::Attention { q, k, v, layout, probs } => {
            attention_backward(nodes, grads, g, *q, *k, *v, layout, probs);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    q: usize,
    k: usize,
    v: usize,
    layout: &AttentionLayout,
    probs: &[F],
) {
    let (qd, kd, vd) = (nodes[q].value.data(), nodes[k].value.data(), nodes[v].value.data());
    let (_, d) = nodes[q].value.dims2();
    let h = layout.heads;
    let dh = d / h;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let mut gq = vec![F::zero(); qd.len()];
    let mut gk = vec![F::zero(); kd.len()];
    let mut gv = vec![F::zero(); vd.len()];
    let mut ds = Vec::new();
    let mut pos = 0;
    for s in &layout.segments {
        for head in 0..h {
            let off = head * dh;
            for i in s.q_start..s.q_start + s.q_len {
                let p = &probs[pos..pos + s.k_len];
                pos += s.k_len;
                let gi = &g[i * d + off..i * d + off + dh];
                ds.clear();
                for (jj, j) in (s.k_start..s.k_start + s.k_len).enumerate() {
                    ds.push(dot(gi, &vd[j * d + off..j * d + off + dh]));
                    axpy(p[jj], gi, &mut gv[j * d + off..j * d + off + dh]);
                }
                let weighted: F = ds.iter().zip(p).map(|(&a, &b)| a * b).sum();
                let qi = &qd[i * d + off..i * d + off + dh];
                for (jj, j) in (s.k_start..s.k_start + s.k_len).enumerate() {
                    let dsc = p[jj] * (ds[jj] - weighted) * scale;
                    axpy(dsc, &kd[j * d + off..j * d + off + dh], &mut gq[i * d + off..i * d + off + dh]);
                    axpy(dsc, qi, &mut gk[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    accumulate(nodes, grads, q, |x| axpy(F::one(), &gq, x));
    accumulate(nodes, grads, k, |x| axpy(F::one(), &gk, x));
    accumulate(nodes, grads, v, |x| axpy(F::one(), &gv, x));
}
