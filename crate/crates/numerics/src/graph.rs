//! Tape-style recording of tensor operations.
//!
//! A [`Graph`] is created per forward pass. Every primitive appends a node
//! holding its output value and enough saved state to run its vector-Jacobian
//! product. [`Graph::backward`] walks the tape once in reverse; a graph can
//! only be differentiated once.
//!
//! Broadcasting is deliberately narrow: binary ops accept a right operand
//! whose shape is a suffix of the left operand's shape (bias vectors, per-head
//! tables); everything else must match exactly.

use rand::Rng;

use crate::error::{invalid, shape_err, NumericsError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Swish,
    Exp,
    Log,
    Softplus,
    Square,
    Neg,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: T },
    ScaleRows { a: Var, factors: Vec<T> },
    MulConst { a: Var, factors: Vec<T> },
    Unary { a: Var, kind: Unary },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { a: Var, rstd: Vec<T> },
    Gather { a: Var, indices: Vec<usize>, row: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sum { a: Var },
    SumLast { a: Var },
    Cumsum { a: Var },
    Conv1d { x: Var, w: Var, cfg: Conv1dSpec, cols: Vec<T> },
    LstmCell { gates: Var, c_prev: Var, acts: Vec<T> },
    GaussianLogits { centers: Var, ranges: Var },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Geometry of a 1-D convolution over the time axis of `[B, T, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    /// Stride 1 with output length equal to input length.
    pub fn same(kernel: usize) -> Self {
        let pad_left = (kernel - 1) / 2;
        Conv1dSpec { stride: 1, pad_left, pad_right: kernel - 1 - pad_left, groups: 1 }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        if padded < kernel {
            0
        } else {
            (padded - kernel) / self.stride + 1
        }
    }
}

/// One forward recording.
pub struct Graph<'s, T: Scalar> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<T>>>,
    training: bool,
    differentiated: bool,
}

fn suffix_repeat(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, training: bool) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grads: Vec::new(),
            training,
            differentiated: false,
        }
    }

    /// A graph with no parameters, for pure tensor computations.
    pub fn detached(training: bool) -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grads: Vec::new(),
            training,
            differentiated: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.expect("param node without store").get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    /// Gradient of the loss w.r.t. `v`, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ------------------------------------------------------------------
    // Leaves
    // ------------------------------------------------------------------

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (queried via [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; one node per parameter per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` for 2-D operands, `op` being an optional transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("need 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err("matmul", format!("lhs {sa:?} (t={ta}) vs rhs {sb:?} (t={tb})"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), ta, self.data(b), tb, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n, ta, tb }, ng))
    }

    /// Batched `op(a) @ op(b)` over the leading axis of 3-D operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("batch_matmul", format!("need [G,m,k] x [G,k,n], got {sa:?} and {sb:?}"));
        }
        let g = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("batch_matmul", format!("lhs {sa:?} (t={ta}) vs rhs {sb:?} (t={tb})"));
        }
        let mut out = vec![T::zero(); g * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..g {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[i * m * k..(i + 1) * m * k],
                    ta,
                    &db[i * k * n..(i + 1) * k * n],
                    tb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[g, m, n], out)?, Op::BatchMatMul { a, b, g, m, k, n, ta, tb }, ng))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match suffix_repeat(sa, sb) {
            Some(rep) => Ok((rep, self.value(b).len())),
            None => shape_err(name, format!("rhs {sb:?} is not a suffix of lhs {sa:?}")),
        }
    }

    /// `a + b`, with `b` broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, nb) = self.binary(a, b, "add")?;
        let db = self.data(b);
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x + db[i % nb]).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, nb) = self.binary(a, b, "sub")?;
        let db = self.data(b);
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x - db[i % nb]).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    /// Elementwise product, with `b` broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, nb) = self.binary(a, b, "mul")?;
        let db = self.data(b);
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x * db[i % nb]).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x + c).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::AddScalar { a }, ng)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::MulScalar { a, c }, ng)
    }

    /// Multiplies each last-axis row by a constant factor (e.g. a frame mask).
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let row = *shape.last().unwrap_or(&1);
        if row == 0 || self.value(a).len() / row != factors.len() {
            return shape_err("scale_rows", format!("{} factors for shape {shape:?}", factors.len()));
        }
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| x * factors[i / row]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScaleRows { a, factors }, ng))
    }

    /// Elementwise product with a constant tensor of identical size.
    pub fn mul_const(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        if factors.len() != self.value(a).len() {
            return shape_err(
                "mul_const",
                format!("{} factors for shape {:?}", factors.len(), self.shape(a)),
            );
        }
        let out: Vec<T> = self.data(a).iter().zip(&factors).map(|(&x, &f)| x * f).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst { a, factors }, ng))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Relu => |x: T| x.max(T::zero()),
            Unary::Swish => |x: T| x * sigmoid(x),
            Unary::Exp => |x: T| x.exp(),
            Unary::Log => |x: T| x.ln(),
            Unary::Softplus => softplus,
            Unary::Square => |x: T| x * x,
            Unary::Neg => |x: T| -x,
        };
        let out: Vec<T> = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        let ng = self.ng(a);
        self.push(t, Op::Unary { a, kind }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Swish)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Inverted dropout governed by the graph's training flag. With the flag
    /// off (or `p == 0`) the input handle itself is returned.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.training {
            return Ok(a);
        }
        self.dropout_always(a, p, rng)
    }

    /// Dropout that ignores the training flag (pre-net style).
    pub fn dropout_always<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid("dropout", format!("probability {p} outside [0, 1)"));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        self.mul_const(a, mask)
    }

    /// Replaces cells where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: T) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return shape_err(
                "masked_fill",
                format!("mask of {} for shape {:?}", mask.len(), self.shape(a)),
            );
        }
        let out: Vec<T> = self.data(a).iter().zip(&mask).map(|(&x, &m)| if m { value } else { x }).collect();
        let t = Tensor::new(self.shape(a), out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MaskedFill { a, mask }, ng))
    }

    // ------------------------------------------------------------------
    // Normalizations
    // ------------------------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().unwrap_or(&0);
        if k == 0 {
            return shape_err("softmax", format!("empty last axis in {shape:?}"));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(k) {
            softmax_row(row, None);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, ng))
    }

    /// Softmax over the last axis of `[B, ..., K]` where `key_valid[b * K + k]`
    /// says whether key `k` of batch item `b` participates. Invalid keys get
    /// weight exactly zero; an item with no valid key is an error.
    pub fn masked_softmax(&mut self, a: Var, key_valid: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return shape_err("masked_softmax", format!("need [B, .., K], got {shape:?}"));
        }
        let (b, k) = (shape[0], shape[shape.len() - 1]);
        if key_valid.len() != b * k {
            return shape_err("masked_softmax", format!("mask of {} for shape {shape:?}", key_valid.len()));
        }
        for i in 0..b {
            if !key_valid[i * k..(i + 1) * k].iter().any(|&v| v) {
                return invalid("masked_softmax", format!("batch item {i} has no valid key"));
            }
        }
        let rows_per_item = self.value(a).len() / (b * k).max(1);
        let mut out = self.data(a).to_vec();
        for (r, row) in out.chunks_mut(k).enumerate() {
            let item = r / rows_per_item.max(1);
            softmax_row(row, Some(&key_valid[item * k..(item + 1) * k]));
        }
        let ng = self.ng(a);
        // Backward is the plain softmax VJP: masked outputs are zero.
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a }, ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().unwrap_or(&0);
        if k == 0 {
            return shape_err("log_softmax", format!("empty last axis in {shape:?}"));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { a }, ng))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return shape_err("layer_norm", format!("empty last axis in {shape:?}"));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut out = self.data(a).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * r);
            rstd.push(r);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LayerNorm { a, rstd }, ng))
    }

    // ------------------------------------------------------------------
    // Indexing and layout
    // ------------------------------------------------------------------

    /// Gathers last-axis rows of `a` (viewed as `[R, row]`) by index; output
    /// is `[indices.len(), row]`. Embedding lookup is `gather_rows(table, ids)`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let row = *shape.last().unwrap_or(&0);
        let rows = if row == 0 { 0 } else { self.value(a).len() / row };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return invalid("gather_rows", format!("index {bad} out of range for {rows} rows"));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in &indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let t = Tensor::new(&[indices.len(), row], out)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Gather { a, indices, row }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat", "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return shape_err("concat", format!("{s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Slice { a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(a), &shape, perm);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    // ------------------------------------------------------------------
    // Reductions
    // ------------------------------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return shape_err("sum_last", format!("need at least 2 axes, got {shape:?}"));
        }
        let k = shape[shape.len() - 1];
        let out: Vec<T> = if k == 0 {
            vec![T::zero(); shape[..shape.len() - 1].iter().product()]
        } else {
            self.data(a).chunks(k).map(|r| r.iter().copied().sum()).collect()
        };
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape[..shape.len() - 1], out)?, Op::SumLast { a }, ng))
    }

    /// Inclusive prefix sum over the last axis.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().unwrap_or(&0);
        let mut out = self.data(a).to_vec();
        if k > 0 {
            for row in out.chunks_mut(k) {
                for i in 1..k {
                    let prev = row[i - 1];
                    row[i] += prev;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Cumsum { a }, ng))
    }

    // ------------------------------------------------------------------
    // Fused blocks
    // ------------------------------------------------------------------

    /// 1-D convolution over time. `x`: `[B, T, C_in]`; `w`:
    /// `[K, C_in / groups, C_out]`; output `[B, T_out, C_out]` (no bias).
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 {
            return shape_err("conv1d", format!("need x [B,T,C] and w [K,Cin/g,Cout], got {sx:?}, {sw:?}"));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cpg, cout) = (sw[0], sw[1], sw[2]);
        let g = spec.groups;
        if g == 0 || spec.stride == 0 || cin % g != 0 || cout % g != 0 || cin / g != cpg {
            return shape_err(
                "conv1d",
                format!("x {sx:?}, w {sw:?}, groups {g}: expected w[1] = {}", cin / g.max(1)),
            );
        }
        let to = spec.output_len(t, k);
        if to == 0 {
            return shape_err("conv1d", format!("input length {t} too short for kernel {k}"));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![T::zero(); b * to * cout];
        let mut cols = Vec::new();
        if g == 1 {
            let kc = k * cin;
            cols = vec![T::zero(); b * to * kc];
            for bi in 0..b {
                for ti in 0..to {
                    let row = &mut cols[(bi * to + ti) * kc..(bi * to + ti + 1) * kc];
                    for ki in 0..k {
                        let src = (ti * spec.stride + ki) as isize - spec.pad_left as isize;
                        if src >= 0 && (src as usize) < t {
                            let s = (bi * t + src as usize) * cin;
                            row[ki * cin..(ki + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                        }
                    }
                }
            }
            T::gemm(b * to, kc, cout, T::one(), &cols, false, wd, false, T::zero(), &mut out);
        } else {
            let opg = cout / g;
            for bi in 0..b {
                for ti in 0..to {
                    let orow = &mut out[(bi * to + ti) * cout..(bi * to + ti + 1) * cout];
                    for ki in 0..k {
                        let src = (ti * spec.stride + ki) as isize - spec.pad_left as isize;
                        if src < 0 || src as usize >= t {
                            continue;
                        }
                        let xrow = &xd[(bi * t + src as usize) * cin..(bi * t + src as usize + 1) * cin];
                        for (o, ov) in orow.iter_mut().enumerate() {
                            let grp = o / opg;
                            for ci in 0..cpg {
                                *ov += xrow[grp * cpg + ci] * wd[(ki * cpg + ci) * cout + o];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(&[b, to, cout], out)?, Op::Conv1d { x, w, cfg: spec, cols }, ng))
    }

    /// LSTM cell nonlinearity. `gates`: `[B, 4H]` pre-activations in
    /// (input, forget, cell, output) order; `c_prev`: `[B, H]`.
    /// Output `[B, 2H]` holds `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (sg, sc) = (self.shape(gates).to_vec(), self.shape(c_prev).to_vec());
        if sg.len() != 2 || sc.len() != 2 || sg[0] != sc[0] || sg[1] != 4 * sc[1] {
            return shape_err("lstm_cell", format!("gates {sg:?} vs cell {sc:?}"));
        }
        let (b, h) = (sc[0], sc[1]);
        let gd = self.data(gates);
        let cd = self.data(c_prev);
        let mut out = vec![T::zero(); b * 2 * h];
        // acts per row: i, f, g, o, tanh(c)
        let mut acts = vec![T::zero(); b * 5 * h];
        for r in 0..b {
            let gr = &gd[r * 4 * h..(r + 1) * 4 * h];
            let ar = &mut acts[r * 5 * h..(r + 1) * 5 * h];
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let gg = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let c = f * cd[r * h + j] + i * gg;
                let tc = c.tanh();
                ar[j] = i;
                ar[h + j] = f;
                ar[2 * h + j] = gg;
                ar[3 * h + j] = o;
                ar[4 * h + j] = tc;
                out[r * 2 * h + j] = o * tc;
                out[r * 2 * h + h + j] = c;
            }
        }
        let ng = self.ng(gates) || self.ng(c_prev);
        Ok(self.push(Tensor::new(&[b, 2 * h], out)?, Op::LstmCell { gates, c_prev, acts }, ng))
    }

    /// Gaussian alignment logits `-(t + 0.5 - c)^2 / (2 r^2)` for output
    /// frames `t = 0..frames`. `centers`, `ranges`: `[B, L]`; output `[B, frames, L]`.
    pub fn gaussian_logits(&mut self, centers: Var, ranges: Var, frames: usize) -> Result<Var> {
        let (sc, sr) = (self.shape(centers).to_vec(), self.shape(ranges).to_vec());
        if sc.len() != 2 || sc != sr {
            return shape_err("gaussian_logits", format!("centers {sc:?} vs ranges {sr:?}"));
        }
        let (b, l) = (sc[0], sc[1]);
        let (cd, rd) = (self.data(centers), self.data(ranges));
        let half = T::from_f64(0.5);
        let mut out = vec![T::zero(); b * frames * l];
        for bi in 0..b {
            for t in 0..frames {
                let pos = T::from_f64(t as f64) + half;
                for i in 0..l {
                    let d = pos - cd[bi * l + i];
                    let r = rd[bi * l + i];
                    out[(bi * frames + t) * l + i] = -(d * d) / (T::from_f64(2.0) * r * r);
                }
            }
        }
        let ng = self.ng(centers) || self.ng(ranges);
        Ok(self.push(Tensor::new(&[b, frames, l], out)?, Op::GaussianLogits { centers, ranges }, ng))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse pass from a one-element loss. Returns per-parameter gradients;
    /// gradients of tracked inputs are available through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(NumericsError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut params = vec![None; self.param_vars.len()];
        for (pi, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                params[pi] = grads[v.0].clone();
            }
        }
        self.grads = grads;
        Ok(Gradients(params))
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n, ta, tb } => {
                if self.ng(a) {
                    let bd = self.data(b);
                    acc(grads, a, m * k, |ga| {
                        if !ta {
                            T::gemm(m, n, k, T::one(), gout, false, bd, !tb, T::one(), ga);
                        } else {
                            T::gemm(k, n, m, T::one(), bd, tb, gout, true, T::one(), ga);
                        }
                    });
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    acc(grads, b, k * n, |gb| {
                        if !tb {
                            T::gemm(k, m, n, T::one(), ad, !ta, gout, false, T::one(), gb);
                        } else {
                            T::gemm(n, m, k, T::one(), gout, true, ad, ta, T::one(), gb);
                        }
                    });
                }
            }
            &Op::BatchMatMul { a, b, g, m, k, n, ta, tb } => {
                if self.ng(a) {
                    let bd = self.data(b);
                    acc(grads, a, g * m * k, |ga| {
                        for i in 0..g {
                            let go = &gout[i * m * n..(i + 1) * m * n];
                            let bb = &bd[i * k * n..(i + 1) * k * n];
                            let gaa = &mut ga[i * m * k..(i + 1) * m * k];
                            if !ta {
                                T::gemm(m, n, k, T::one(), go, false, bb, !tb, T::one(), gaa);
                            } else {
                                T::gemm(k, n, m, T::one(), bb, tb, go, true, T::one(), gaa);
                            }
                        }
                    });
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    acc(grads, b, g * k * n, |gb| {
                        for i in 0..g {
                            let go = &gout[i * m * n..(i + 1) * m * n];
                            let aa = &ad[i * m * k..(i + 1) * m * k];
                            let gbb = &mut gb[i * k * n..(i + 1) * k * n];
                            if !tb {
                                T::gemm(k, m, n, T::one(), aa, !ta, go, false, T::one(), gbb);
                            } else {
                                T::gemm(n, m, k, T::one(), go, true, aa, ta, T::one(), gbb);
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.ng(a) {
                    acc(grads, a, gout.len(), |ga| add_into(ga, gout));
                }
                if self.ng(b) {
                    let nb = self.value(b).len();
                    acc(grads, b, nb, |gb| {
                        for (i, &g) in gout.iter().enumerate() {
                            gb[i % nb] += sign * g;
                        }
                    });
                }
            }
            &Op::Mul { a, b } => {
                let nb = self.value(b).len();
                if self.ng(a) {
                    let bd = self.data(b);
                    acc(grads, a, gout.len(), |ga| {
                        for (i, (x, &g)) in ga.iter_mut().zip(gout).enumerate() {
                            *x += g * bd[i % nb];
                        }
                    });
                }
                if self.ng(b) {
                    let ad = self.data(a);
                    acc(grads, b, nb, |gb| {
                        for (i, &g) in gout.iter().enumerate() {
                            gb[i % nb] += g * ad[i];
                        }
                    });
                }
            }
            &Op::AddScalar { a } => acc(grads, a, gout.len(), |ga| add_into(ga, gout)),
            &Op::MulScalar { a, c } => acc(grads, a, gout.len(), |ga| {
                ga.iter_mut().zip(gout).for_each(|(x, &g)| *x += g * c)
            }),
            Op::ScaleRows { a, factors } => {
                let row = gout.len() / factors.len().max(1);
                acc(grads, *a, gout.len(), |ga| {
                    for (i, (x, &g)) in ga.iter_mut().zip(gout).enumerate() {
                        *x += g * factors[i / row];
                    }
                })
            }
            Op::MulConst { a, factors } => acc(grads, *a, gout.len(), |ga| {
                for ((x, &g), &f) in ga.iter_mut().zip(gout).zip(factors) {
                    *x += g * f;
                }
            }),
            &Op::Unary { a, kind } => {
                let x = self.data(a);
                let y = out.expect("value").data();
                acc(grads, a, gout.len(), |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Tanh => T::one() - y[i] * y[i],
                            Unary::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Swish => {
                                let s = sigmoid(x[i]);
                                s * (T::one() + x[i] * (T::one() - s))
                            }
                            Unary::Exp => y[i],
                            Unary::Log => T::one() / x[i],
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Square => T::from_f64(2.0) * x[i],
                            Unary::Neg => -T::one(),
                        };
                        ga[i] += gout[i] * d;
                    }
                })
            }
            &Op::Softmax { a } => {
                let y = out.expect("value").data();
                let k = *self.shape(a).last().unwrap();
                acc(grads, a, gout.len(), |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                        let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                        for j in 0..k {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                })
            }
            &Op::LogSoftmax { a } => {
                let y = out.expect("value").data();
                let k = *self.shape(a).last().unwrap();
                acc(grads, a, gout.len(), |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(k).zip(y.chunks(k)).zip(gout.chunks(k)) {
                        let s: T = dr.iter().copied().sum();
                        for j in 0..k {
                            gr[j] += dr[j] - yr[j].exp() * s;
                        }
                    }
                })
            }
            Op::LayerNorm { a, rstd } => {
                let y = out.expect("value").data();
                let d = *self.shape(*a).last().unwrap();
                let dn = T::from_f64(d as f64);
                acc(grads, *a, gout.len(), |ga| {
                    for (r, ((gr, yr), dr)) in ga.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)).enumerate() {
                        let mean_d = dr.iter().copied().sum::<T>() / dn;
                        let mean_dy = yr.iter().zip(dr).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for j in 0..d {
                            gr[j] += rstd[r] * (dr[j] - mean_d - yr[j] * mean_dy);
                        }
                    }
                })
            }
            Op::Gather { a, indices, row } => {
                let n = self.value(*a).len();
                acc(grads, *a, n, |ga| {
                    for (o, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * row..(i + 1) * row], &gout[o * row..(o + 1) * row]);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let shape = out.expect("value").shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        acc(grads, p, outer * len, |gp| {
                            for o in 0..outer {
                                add_into(
                                    &mut gp[o * len..(o + 1) * len],
                                    &gout[o * total + offset..o * total + offset + len],
                                );
                            }
                        });
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let shape = self.shape(a);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[axis];
                let len = out.expect("value").shape()[axis];
                let n = self.value(a).len();
                acc(grads, a, n, |ga| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut ga[base..base + len * inner], &gout[o * len * inner..(o + 1) * len * inner]);
                    }
                })
            }
            &Op::Reshape { a } => acc(grads, a, gout.len(), |ga| add_into(ga, gout)),
            Op::Permute { a, perm } => {
                let out_shape = out.expect("value").shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gout, out_shape, &inv);
                acc(grads, *a, back.len(), |ga| add_into(ga, &back))
            }
            Op::MaskedFill { a, mask } => acc(grads, *a, gout.len(), |ga| {
                for ((x, &g), &m) in ga.iter_mut().zip(gout).zip(mask) {
                    if !m {
                        *x += g;
                    }
                }
            }),
            &Op::Sum { a } => {
                let n = self.value(a).len();
                acc(grads, a, n, |ga| ga.iter_mut().for_each(|x| *x += gout[0]))
            }
            &Op::SumLast { a } => {
                let n = self.value(a).len();
                let k = *self.shape(a).last().unwrap();
                acc(grads, a, n, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += gout[i / k];
                    }
                })
            }
            &Op::Cumsum { a } => {
                let k = *self.shape(a).last().unwrap();
                acc(grads, a, gout.len(), |ga| {
                    for (gr, dr) in ga.chunks_mut(k).zip(gout.chunks(k)) {
                        let mut run = T::zero();
                        for j in (0..k).rev() {
                            run += dr[j];
                            gr[j] += run;
                        }
                    }
                })
            }
            Op::Conv1d { x, w, cfg, cols } => self.conv1d_backward(*x, *w, *cfg, cols, gout, grads),
            Op::LstmCell { gates, c_prev, acts } => {
                let h = self.shape(*c_prev)[1];
                let b = self.shape(*c_prev)[0];
                let cp = self.data(*c_prev);
                let mut dg = vec![T::zero(); b * 4 * h];
                let mut dcp = vec![T::zero(); b * h];
                for r in 0..b {
                    let ar = &acts[r * 5 * h..(r + 1) * 5 * h];
                    for j in 0..h {
                        let (i, f, g, o, tc) = (ar[j], ar[h + j], ar[2 * h + j], ar[3 * h + j], ar[4 * h + j]);
                        let dh = gout[r * 2 * h + j];
                        let dc = gout[r * 2 * h + h + j] + dh * o * (T::one() - tc * tc);
                        dg[r * 4 * h + j] = dc * g * i * (T::one() - i);
                        dg[r * 4 * h + h + j] = dc * cp[r * h + j] * f * (T::one() - f);
                        dg[r * 4 * h + 2 * h + j] = dc * i * (T::one() - g * g);
                        dg[r * 4 * h + 3 * h + j] = dh * tc * o * (T::one() - o);
                        dcp[r * h + j] = dc * f;
                    }
                }
                if self.ng(*gates) {
                    acc(grads, *gates, dg.len(), |x| add_into(x, &dg));
                }
                if self.ng(*c_prev) {
                    acc(grads, *c_prev, dcp.len(), |x| add_into(x, &dcp));
                }
            }
            &Op::GaussianLogits { centers, ranges } => {
                let s = out.expect("value").shape();
                let (b, frames, l) = (s[0], s[1], s[2]);
                let (cd, rd) = (self.data(centers), self.data(ranges));
                let half = T::from_f64(0.5);
                let mut dc = vec![T::zero(); b * l];
                let mut dr = vec![T::zero(); b * l];
                for bi in 0..b {
                    for t in 0..frames {
                        let pos = T::from_f64(t as f64) + half;
                        for i in 0..l {
                            let g = gout[(bi * frames + t) * l + i];
                            let d = pos - cd[bi * l + i];
                            let r = rd[bi * l + i];
                            dc[bi * l + i] += g * d / (r * r);
                            dr[bi * l + i] += g * d * d / (r * r * r);
                        }
                    }
                }
                if self.ng(centers) {
                    acc(grads, centers, dc.len(), |x| add_into(x, &dc));
                }
                if self.ng(ranges) {
                    acc(grads, ranges, dr.len(), |x| add_into(x, &dr));
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        spec: Conv1dSpec,
        cols: &[T],
        gout: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (k, cpg, cout) = (sw[0], sw[1], sw[2]);
        let to = spec.output_len(t, k);
        let wd = self.data(w);
        if spec.groups == 1 {
            let kc = k * cin;
            if self.ng(w) {
                acc(grads, w, kc * cout, |gw| {
                    T::gemm(kc, b * to, cout, T::one(), cols, true, gout, false, T::one(), gw)
                });
            }
            if self.ng(x) {
                let mut dcols = vec![T::zero(); b * to * kc];
                T::gemm(b * to, cout, kc, T::one(), gout, false, wd, true, T::zero(), &mut dcols);
                acc(grads, x, b * t * cin, |gx| {
                    for bi in 0..b {
                        for ti in 0..to {
                            let row = &dcols[(bi * to + ti) * kc..(bi * to + ti + 1) * kc];
                            for ki in 0..k {
                                let src = (ti * spec.stride + ki) as isize - spec.pad_left as isize;
                                if src >= 0 && (src as usize) < t {
                                    let s = (bi * t + src as usize) * cin;
                                    add_into(&mut gx[s..s + cin], &row[ki * cin..(ki + 1) * cin]);
                                }
                            }
                        }
                    }
                });
            }
            return;
        }
        let opg = cout / spec.groups;
        let xd = self.data(x);
        let mut gx = vec![T::zero(); if self.ng(x) { b * t * cin } else { 0 }];
        let mut gw = vec![T::zero(); if self.ng(w) { k * cpg * cout } else { 0 }];
        for bi in 0..b {
            for ti in 0..to {
                let grow = &gout[(bi * to + ti) * cout..(bi * to + ti + 1) * cout];
                for ki in 0..k {
                    let src = (ti * spec.stride + ki) as isize - spec.pad_left as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let base = (bi * t + src as usize) * cin;
                    for (o, &g) in grow.iter().enumerate() {
                        let grp = o / opg;
                        for ci in 0..cpg {
                            let xi = base + grp * cpg + ci;
                            let wi = (ki * cpg + ci) * cout + o;
                            if !gx.is_empty() {
                                gx[xi] += g * wd[wi];
                            }
                            if !gw.is_empty() {
                                gw[wi] += g * xd[xi];
                            }
                        }
                    }
                }
            }
        }
        if !gx.is_empty() {
            acc(grads, x, gx.len(), |d| add_into(d, &gx));
        }
        if !gw.is_empty() {
            acc(grads, w, gw.len(), |d| add_into(d, &gw));
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn softmax_row<T: Scalar>(row: &mut [T], valid: Option<&[bool]>) {
    let ok = |j: usize| valid.map_or(true, |v| v[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::<f64>::detached(false);
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::<f32>::detached(false);
        let x = g.constant(Tensor::full(&[2, 5], 3.25f32));
        let y = g.layer_norm(x, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_padding_conv_keeps_length() {
        let mut g = Graph::<f32>::detached(false);
        let x = g.constant(Tensor::zeros(&[1, 100, 2]));
        let w = g.constant(Tensor::zeros(&[32, 2, 3]));
        let y = g.conv1d(x, w, Conv1dSpec::same(32)).unwrap();
        assert_eq!(g.shape(y), &[1, 100, 3]);
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut g = Graph::<f32>::detached(false);
        let x = g.constant(Tensor::from_fn(&[4, 4], |i| i as f32));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn masked_softmax_zeroes_invalid_keys() {
        let mut g = Graph::<f64>::detached(false);
        let x = g.constant(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let y = g.masked_softmax(x, &[true, true, false, false, true, false]).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(&v[3..], &[0.0, 1.0, 0.0]);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        let bad = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(g.masked_softmax(bad, &[false, false]).is_err());
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut g = Graph::<f32>::detached(false);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn backward_twice_is_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, true);
        let x = g.input(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), NumericsError::BackwardTwice);
    }

    #[test]
    fn linear_form_gradient_equals_input() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let _unused = store.add("unused", t(&[2], &[1.0, 1.0])).unwrap();
        let mut g = Graph::new(&store, true);
        let wv = g.param(w);
        let x = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(grads.get(_unused).is_none());
    }

    #[test]
    fn uniform_cross_entropy_gradient_is_closed_form() {
        let k = 5;
        let mut g = Graph::<f64>::detached(true);
        let logits = g.input(Tensor::zeros(&[1, k]));
        let lp = g.log_softmax(logits).unwrap();
        let mut onehot = vec![0.0; k];
        onehot[2] = -1.0;
        let picked = g.mul_const(lp, onehot).unwrap();
        let loss = g.sum(picked);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        for (j, &v) in grad.iter().enumerate() {
            let expect = 1.0 / k as f64 - if j == 2 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips() {
        let mut g = Graph::<f64>::detached(false);
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(g.value(y).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }
}
