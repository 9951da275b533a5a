//! The reverse-mode autodiff tape.
//!
//! Every differentiable operation is a method on [`Tape`]. An operation
//! records a node when at least one input is tracked: either it carries a
//! node id from an earlier operation on the same tape, or it is a leaf
//! tensor flagged with `requires_grad` (leaves are registered on first
//! use, keyed by buffer identity, so a parameter used twice accumulates
//! into a single gradient).
//!
//! Node ids are assigned in program order, so every input id is smaller
//! than the id of the node it feeds; [`Tape::backward`] is a single
//! reverse sweep over that order. A tape belongs to one training step on
//! one thread and can be replayed: running `backward` twice yields
//! bit-identical gradients.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{GnnError, Result};
use crate::graph::CsrView;
use crate::tensor::{Real, Tensor};

/// Position of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction flavors shared by `reduce` and the segment reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Exp,
    Square,
    Rsqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Recorded operation plus whatever it saved for the backward pass.
enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_data: Arc<Vec<T>>,
        b_data: Arc<Vec<T>>,
        p: usize,
        q: usize,
        r: usize,
    },
    AddBias {
        x: Option<NodeId>,
        b: Option<NodeId>,
        d: usize,
        n: usize,
    },
    Unary {
        kind: UnaryKind,
        slope: f64,
        x: Option<NodeId>,
        x_data: Arc<Vec<T>>,
        y_data: Arc<Vec<T>>,
    },
    Binary {
        kind: BinaryKind,
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_data: Arc<Vec<T>>,
        b_data: Arc<Vec<T>>,
    },
    Affine {
        x: Option<NodeId>,
        mul: f64,
    },
    Reduce {
        kind: ReduceKind,
        axis: Option<usize>,
        x: Option<NodeId>,
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    GatherCols {
        x: Option<NodeId>,
        index: Arc<Vec<usize>>,
        d: usize,
    },
    ScatterAdd {
        src: Option<NodeId>,
        index: Arc<Vec<usize>>,
        d: usize,
        n_out: usize,
    },
    SegmentMax {
        src: Option<NodeId>,
        /// Winning source column per (row, segment), row-major `[d, n_out]`.
        argmax: Vec<Option<usize>>,
        d: usize,
        n_out: usize,
    },
    ScaleRows {
        x: Option<NodeId>,
        s: Option<NodeId>,
        x_data: Arc<Vec<T>>,
        s_data: Arc<Vec<T>>,
    },
    ScaleCols {
        x: Option<NodeId>,
        s: Option<NodeId>,
        x_data: Arc<Vec<T>>,
        s_data: Arc<Vec<T>>,
    },
    ScaleScalar {
        x: Option<NodeId>,
        s: Option<NodeId>,
        x_data: Arc<Vec<T>>,
        s_data: Arc<Vec<T>>,
    },
    ExpandRows {
        x: Option<NodeId>,
        times: usize,
        rows_in: usize,
    },
    MeanHeads {
        x: Option<NodeId>,
        heads: usize,
        dh: usize,
    },
    Reshape {
        x: Option<NodeId>,
    },
    Spmm {
        x: Option<NodeId>,
        scale: Option<NodeId>,
        csr: Arc<CsrView>,
        x_data: Arc<Vec<T>>,
        scale_data: Option<Arc<Vec<T>>>,
        d: usize,
    },
    EdgeSoftmax {
        logits: Option<NodeId>,
        targets: Arc<Vec<usize>>,
        num_nodes: usize,
        y_data: Arc<Vec<T>>,
    },
    HeadScores {
        z: Option<NodeId>,
        att: Option<NodeId>,
        z_data: Arc<Vec<T>>,
        att_data: Arc<Vec<T>>,
        heads: usize,
        dh: usize,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Relu => "relu",
                UnaryKind::LeakyRelu => "leaky_relu",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Exp => "exp",
                UnaryKind::Square => "square",
                UnaryKind::Rsqrt => "rsqrt",
            },
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Affine { .. } => "affine",
            Op::Reduce { .. } => "reduce",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::SegmentMax { .. } => "segment_max",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScaleCols { .. } => "scale_cols",
            Op::ScaleScalar { .. } => "scale_scalar",
            Op::ExpandRows { .. } => "expand_rows",
            Op::MeanHeads { .. } => "mean_heads",
            Op::Reshape { .. } => "reshape",
            Op::Spmm { .. } => "spmm",
            Op::EdgeSoftmax { .. } => "edge_softmax",
            Op::HeadScores { .. } => "head_scores",
        }
    }
}

struct TapeNode<T: Real> {
    shape: Vec<usize>,
    op: Op<T>,
}

/// Append-only record of one step's differentiable operations.
pub struct Tape<T: Real> {
    nodes: Vec<TapeNode<T>>,
    leaf_by_buffer: HashMap<usize, NodeId>,
    min_kink_gap: f64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_by_buffer: HashMap::new(),
            min_kink_gap: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations, in program order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Smallest |x| seen at a relu/leaky-relu input so far. Gradient
    /// checks use this to reject instances too close to a kink.
    pub fn min_kink_gap(&self) -> f64 {
        self.min_kink_gap
    }

    fn push(&mut self, shape: Vec<usize>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { shape, op });
        id
    }

    /// Node id for an input: its own node, or a fresh leaf when it is a
    /// differentiation target, or `None` for a constant.
    fn input_id(&mut self, t: &Tensor<T>) -> Option<NodeId> {
        if let Some(id) = t.node_id() {
            debug_assert!(id.0 < self.nodes.len(), "tensor from a different tape");
            return Some(id);
        }
        if t.requires_grad_flag() {
            let key = t.buffer_id();
            if let Some(&id) = self.leaf_by_buffer.get(&key) {
                return Some(id);
            }
            let id = self.push(t.shape().to_vec(), Op::Leaf);
            self.leaf_by_buffer.insert(key, id);
            return Some(id);
        }
        None
    }

    // ── dense ops ───────────────────────────────────────────────────

    /// Matrix product `[p,q] x [q,r] -> [p,r]`.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(GnnError::Dimension(format!(
                "matmul expects [p,q] x [q,r], got {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![T::zero(); p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = ad[i * q + k];
                let brow = &bd[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        let t = Tensor::from_vec(vec![p, r], out)?;
        if ia.is_some() || ib.is_some() {
            let id = self.push(
                vec![p, r],
                Op::MatMul {
                    a: ia,
                    b: ib,
                    a_data: a.data_arc(),
                    b_data: b.data_arc(),
                    p,
                    q,
                    r,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Broadcast-adds a length-`d` bias to every column of a `[d,n]` tensor.
    pub fn add_bias(&mut self, x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || b.rank() != 1 || x.shape()[0] != b.shape()[0] {
            return Err(GnnError::Dimension(format!(
                "add_bias expects [d,n] and [d], got {:?} and {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let (d, n) = (x.shape()[0], x.shape()[1]);
        let (xd, bd) = (x.data(), b.data());
        let mut out = vec![T::zero(); d * n];
        for i in 0..d {
            let bi = bd[i];
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + bi;
            }
        }
        let (ix, ib) = (self.input_id(x), self.input_id(b));
        let t = Tensor::from_vec(vec![d, n], out)?;
        if ix.is_some() || ib.is_some() {
            let id = self.push(vec![d, n], Op::AddBias { x: ix, b: ib, d, n });
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    fn unary(&mut self, kind: UnaryKind, slope: f64, x: &Tensor<T>) -> Result<Tensor<T>> {
        if matches!(kind, UnaryKind::Relu | UnaryKind::LeakyRelu) {
            for v in x.data() {
                let gap = v.as_f64().abs();
                if gap < self.min_kink_gap {
                    self.min_kink_gap = gap;
                }
            }
        }
        let s = T::from_f64(slope);
        let half = T::from_f64(0.5);
        let y: Vec<T> = x
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => {
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::LeakyRelu => {
                    if v > T::zero() {
                        v
                    } else {
                        s * v
                    }
                }
                UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Square => v * v,
                UnaryKind::Rsqrt => {
                    let _ = half;
                    T::one() / v.sqrt()
                }
            })
            .collect();
        let ix = self.input_id(x);
        let t = Tensor::from_vec(x.shape().to_vec(), y)?;
        if ix.is_some() {
            let id = self.push(
                x.shape().to_vec(),
                Op::Unary {
                    kind,
                    slope,
                    x: ix,
                    x_data: x.data_arc(),
                    y_data: t.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Pointwise max(x, 0). The derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Relu, 0.0, x)
    }

    /// Pointwise x for x > 0, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: &Tensor<T>, slope: f64) -> Result<Tensor<T>> {
        self.unary(UnaryKind::LeakyRelu, slope, x)
    }

    pub fn sigmoid(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Sigmoid, 0.0, x)
    }

    pub fn tanh(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Tanh, 0.0, x)
    }

    pub fn exp(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Exp, 0.0, x)
    }

    pub fn square(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Square, 0.0, x)
    }

    /// Pointwise `x^(-1/2)`.
    pub fn rsqrt(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.unary(UnaryKind::Rsqrt, 0.0, x)
    }

    fn binary(&mut self, kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(GnnError::Dimension(format!(
                "elementwise {:?} expects equal shapes, got {:?} and {:?}",
                kind,
                a.shape(),
                b.shape()
            )));
        }
        let y: Vec<T> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&u, &v)| match kind {
                BinaryKind::Add => u + v,
                BinaryKind::Sub => u - v,
                BinaryKind::Mul => u * v,
            })
            .collect();
        let (ia, ib) = (self.input_id(a), self.input_id(b));
        let t = Tensor::from_vec(a.shape().to_vec(), y)?;
        if ia.is_some() || ib.is_some() {
            let id = self.push(
                a.shape().to_vec(),
                Op::Binary {
                    kind,
                    a: ia,
                    b: ib,
                    a_data: a.data_arc(),
                    b_data: b.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Pointwise `mul * x + add` with scalar constants.
    pub fn affine(&mut self, x: &Tensor<T>, mul: f64, add: f64) -> Result<Tensor<T>> {
        let (m, c) = (T::from_f64(mul), T::from_f64(add));
        let y: Vec<T> = x.data().iter().map(|&v| m * v + c).collect();
        let ix = self.input_id(x);
        let t = Tensor::from_vec(x.shape().to_vec(), y)?;
        if ix.is_some() {
            let id = self.push(x.shape().to_vec(), Op::Affine { x: ix, mul });
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Reduces over all elements (`axis: None`, yielding a rank-0 tensor)
    /// or along one axis. Empty sums and means are 0 by convention; an
    /// empty max is a domain error. Max ties resolve to the first
    /// occurrence.
    pub fn reduce(
        &mut self,
        x: &Tensor<T>,
        kind: ReduceKind,
        axis: Option<usize>,
    ) -> Result<Tensor<T>> {
        if let Some(ax) = axis {
            if ax >= x.rank() {
                return Err(GnnError::Contract(format!(
                    "reduce axis {} out of range for rank {}",
                    ax,
                    x.rank()
                )));
            }
        }
        let xd = x.data();
        let mut argmax: Vec<usize> = Vec::new();
        let (out_shape, out) = match axis {
            None => {
                let mut acc;
                match kind {
                    ReduceKind::Sum => {
                        acc = T::zero();
                        for &v in xd {
                            acc += v;
                        }
                    }
                    ReduceKind::Mean => {
                        acc = T::zero();
                        for &v in xd {
                            acc += v;
                        }
                        if !xd.is_empty() {
                            acc /= T::from_f64(xd.len() as f64);
                        }
                    }
                    ReduceKind::Max => {
                        if xd.is_empty() {
                            return Err(GnnError::Domain(
                                "max reduction over an empty tensor".into(),
                            ));
                        }
                        let mut best = 0usize;
                        for (i, &v) in xd.iter().enumerate() {
                            if v > xd[best] {
                                best = i;
                            }
                        }
                        argmax.push(best);
                        acc = xd[best];
                    }
                }
                (vec![], vec![acc])
            }
            Some(ax) => {
                let shape = x.shape();
                let outer: usize = shape[..ax].iter().product();
                let len = shape[ax];
                let inner: usize = shape[ax + 1..].iter().product();
                if matches!(kind, ReduceKind::Max) && len == 0 {
                    return Err(GnnError::Domain(
                        "max reduction over an empty axis".into(),
                    ));
                }
                let mut out = vec![T::zero(); outer * inner];
                if matches!(kind, ReduceKind::Max) {
                    argmax = vec![0; outer * inner];
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let oi = o * inner + i;
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let mut acc = T::zero();
                                for j in 0..len {
                                    acc += xd[(o * len + j) * inner + i];
                                }
                                if matches!(kind, ReduceKind::Mean) && len > 0 {
                                    acc /= T::from_f64(len as f64);
                                }
                                out[oi] = acc;
                            }
                            ReduceKind::Max => {
                                let mut best = (o * len) * inner + i;
                                for j in 1..len {
                                    let p = (o * len + j) * inner + i;
                                    if xd[p] > xd[best] {
                                        best = p;
                                    }
                                }
                                argmax[oi] = best;
                                out[oi] = xd[best];
                            }
                        }
                    }
                }
                let mut os: Vec<usize> = shape.to_vec();
                os.remove(ax);
                (os, out)
            }
        };
        let ix = self.input_id(x);
        let t = Tensor::from_vec(out_shape.clone(), out)?;
        if ix.is_some() {
            let id = self.push(
                out_shape,
                Op::Reduce {
                    kind,
                    axis,
                    x: ix,
                    in_shape: x.shape().to_vec(),
                    argmax,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    // ── indexed ops ─────────────────────────────────────────────────

    /// Column `j` of the output is column `index[j]` of `x`. Duplicate
    /// indices are allowed; the backward pass is `scatter_add`.
    pub fn gather_columns(&mut self, x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
        self.gather_columns_arc(x, Arc::new(index.to_vec()))
    }

    pub(crate) fn gather_columns_arc(
        &mut self,
        x: &Tensor<T>,
        index: Arc<Vec<usize>>,
    ) -> Result<Tensor<T>> {
        if x.rank() != 2 {
            return Err(GnnError::Dimension(format!(
                "gather_columns expects a rank-2 tensor, got {:?}",
                x.shape()
            )));
        }
        let (d, n) = (x.shape()[0], x.shape()[1]);
        for (pos, &c) in index.iter().enumerate() {
            if c >= n {
                return Err(GnnError::Index(format!(
                    "gather_columns: index {} at position {} out of range for {} columns",
                    c, pos, n
                )));
            }
        }
        let k = index.len();
        let xd = x.data();
        let mut out = vec![T::zero(); d * k];
        for i in 0..d {
            let row = &xd[i * n..(i + 1) * n];
            let orow = &mut out[i * k..(i + 1) * k];
            for (j, &c) in index.iter().enumerate() {
                orow[j] = row[c];
            }
        }
        let ix = self.input_id(x);
        let t = Tensor::from_vec(vec![d, k], out)?;
        if ix.is_some() {
            let id = self.push(vec![d, k], Op::GatherCols { x: ix, index, d });
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Output column `t` is the sum of source columns `j` with
    /// `index[j] == t`; untargeted columns are zero. The backward pass
    /// is `gather_columns`.
    pub fn scatter_add(
        &mut self,
        src: &Tensor<T>,
        index: &[usize],
        num_out: usize,
    ) -> Result<Tensor<T>> {
        self.scatter_add_arc(src, Arc::new(index.to_vec()), num_out)
    }

    pub(crate) fn scatter_add_arc(
        &mut self,
        src: &Tensor<T>,
        index: Arc<Vec<usize>>,
        num_out: usize,
    ) -> Result<Tensor<T>> {
        let (d, k) = self.check_segment_args(src, &index, num_out, "scatter_add")?;
        let sd = src.data();
        let mut out = vec![T::zero(); d * num_out];
        for i in 0..d {
            let row = &sd[i * k..(i + 1) * k];
            let orow = &mut out[i * num_out..(i + 1) * num_out];
            for (j, &t) in index.iter().enumerate() {
                orow[t] += row[j];
            }
        }
        let isrc = self.input_id(src);
        let t = Tensor::from_vec(vec![d, num_out], out)?;
        if isrc.is_some() {
            let id = self.push(
                vec![d, num_out],
                Op::ScatterAdd {
                    src: isrc,
                    index,
                    d,
                    n_out: num_out,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Per-row maximum over the source columns of each segment; empty
    /// segments yield 0 and ties resolve to the first occurrence.
    pub fn segment_max(
        &mut self,
        src: &Tensor<T>,
        index: Arc<Vec<usize>>,
        num_out: usize,
    ) -> Result<Tensor<T>> {
        let (d, k) = self.check_segment_args(src, &index, num_out, "segment_max")?;
        let sd = src.data();
        let mut best: Vec<Option<usize>> = vec![None; d * num_out];
        for i in 0..d {
            let row = &sd[i * k..(i + 1) * k];
            for (j, &t) in index.iter().enumerate() {
                let slot = &mut best[i * num_out + t];
                match *slot {
                    None => *slot = Some(j),
                    Some(cur) => {
                        if row[j] > row[cur] {
                            *slot = Some(j);
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); d * num_out];
        for i in 0..d {
            for t in 0..num_out {
                if let Some(j) = best[i * num_out + t] {
                    out[i * num_out + t] = sd[i * k + j];
                }
            }
        }
        let isrc = self.input_id(src);
        let t = Tensor::from_vec(vec![d, num_out], out)?;
        if isrc.is_some() {
            let id = self.push(
                vec![d, num_out],
                Op::SegmentMax {
                    src: isrc,
                    argmax: best,
                    d,
                    n_out: num_out,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    fn check_segment_args(
        &self,
        src: &Tensor<T>,
        index: &[usize],
        num_out: usize,
        what: &str,
    ) -> Result<(usize, usize)> {
        if src.rank() != 2 {
            return Err(GnnError::Dimension(format!(
                "{what} expects a rank-2 source, got {:?}",
                src.shape()
            )));
        }
        let (d, k) = (src.shape()[0], src.shape()[1]);
        if index.len() != k {
            return Err(GnnError::Dimension(format!(
                "{what}: {} source columns but {} indices",
                k,
                index.len()
            )));
        }
        for (pos, &t) in index.iter().enumerate() {
            if t >= num_out {
                return Err(GnnError::Index(format!(
                    "{what}: index {} at position {} out of range for {} outputs",
                    t, pos, num_out
                )));
            }
        }
        Ok((d, k))
    }

    // ── structured scalings ─────────────────────────────────────────

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || s.numel() != x.shape()[0] {
            return Err(GnnError::Dimension(format!(
                "scale_rows expects [d,n] and a d-element scale, got {:?} and {:?}",
                x.shape(),
                s.shape()
            )));
        }
        let (d, n) = (x.shape()[0], x.shape()[1]);
        let (xd, sd) = (x.data(), s.data());
        let mut out = vec![T::zero(); d * n];
        for i in 0..d {
            let si = sd[i];
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] * si;
            }
        }
        let (ix, is) = (self.input_id(x), self.input_id(s));
        let t = Tensor::from_vec(vec![d, n], out)?;
        if ix.is_some() || is.is_some() {
            let id = self.push(
                vec![d, n],
                Op::ScaleRows {
                    x: ix,
                    s: is,
                    x_data: x.data_arc(),
                    s_data: s.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Multiplies column `j` of `x` by `s[j]` (`s` flat with n elements).
    pub fn scale_cols(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || s.numel() != x.shape()[1] {
            return Err(GnnError::Dimension(format!(
                "scale_cols expects [d,n] and an n-element scale, got {:?} and {:?}",
                x.shape(),
                s.shape()
            )));
        }
        let (d, n) = (x.shape()[0], x.shape()[1]);
        let (xd, sd) = (x.data(), s.data());
        let mut out = vec![T::zero(); d * n];
        for i in 0..d {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] * sd[j];
            }
        }
        let (ix, is) = (self.input_id(x), self.input_id(s));
        let t = Tensor::from_vec(vec![d, n], out)?;
        if ix.is_some() || is.is_some() {
            let id = self.push(
                vec![d, n],
                Op::ScaleCols {
                    x: ix,
                    s: is,
                    x_data: x.data_arc(),
                    s_data: s.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_scalar(&mut self, x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.numel() != 1 {
            return Err(GnnError::Dimension(format!(
                "scale_scalar expects a one-element scale, got {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let y: Vec<T> = x.data().iter().map(|&v| v * sv).collect();
        let (ix, is) = (self.input_id(x), self.input_id(s));
        let t = Tensor::from_vec(x.shape().to_vec(), y)?;
        if ix.is_some() || is.is_some() {
            let id = self.push(
                x.shape().to_vec(),
                Op::ScaleScalar {
                    x: ix,
                    s: is,
                    x_data: x.data_arc(),
                    s_data: s.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Repeats each row of `x` `times` times consecutively:
    /// `[r,c] -> [r*times, c]`.
    pub fn expand_rows(&mut self, x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
        if x.rank() != 2 {
            return Err(GnnError::Dimension(format!(
                "expand_rows expects a rank-2 tensor, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let mut out = vec![T::zero(); r * times * c];
        for i in 0..r {
            for u in 0..times {
                out[(i * times + u) * c..(i * times + u + 1) * c]
                    .copy_from_slice(&xd[i * c..(i + 1) * c]);
            }
        }
        let ix = self.input_id(x);
        let t = Tensor::from_vec(vec![r * times, c], out)?;
        if ix.is_some() {
            let id = self.push(
                vec![r * times, c],
                Op::ExpandRows {
                    x: ix,
                    times,
                    rows_in: r,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Averages `heads` consecutive row blocks: `[heads*dh, c] -> [dh, c]`.
    pub fn mean_heads(&mut self, x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
        if x.rank() != 2 || heads == 0 || !x.shape()[0].is_multiple_of(heads) {
            return Err(GnnError::Dimension(format!(
                "mean_heads expects [heads*dh, c] with heads={} dividing rows, got {:?}",
                heads,
                x.shape()
            )));
        }
        let dh = x.shape()[0] / heads;
        let c = x.shape()[1];
        let xd = x.data();
        let inv = T::from_f64(1.0 / heads as f64);
        let mut out = vec![T::zero(); dh * c];
        for k in 0..heads {
            for d0 in 0..dh {
                let src = &xd[(k * dh + d0) * c..(k * dh + d0 + 1) * c];
                let dst = &mut out[d0 * c..(d0 + 1) * c];
                for j in 0..c {
                    dst[j] += src[j];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let ix = self.input_id(x);
        let t = Tensor::from_vec(vec![dh, c], out)?;
        if ix.is_some() {
            let id = self.push(vec![dh, c], Op::MeanHeads { x: ix, heads, dh });
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Tracked reshape; the data buffer is shared unchanged.
    pub fn reshape(&mut self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(GnnError::Dimension(format!(
                "reshape from {:?} to {:?} changes the element count",
                x.shape(),
                shape
            )));
        }
        let ix = self.input_id(x);
        let mut t = x.detached().reshaped(shape.clone())?;
        if ix.is_some() {
            let id = self.push(shape, Op::Reshape { x: ix });
            t = t.with_node(id);
        }
        Ok(t)
    }

    // ── graph-structured ops ────────────────────────────────────────

    /// Sparse product over an incoming-edge CSR: for each node `t`,
    /// `out[:,t] = sum over incoming edges e of scale[e] * x[:, src(e)]`.
    /// `edge_scale` (flat, one entry per edge, indexed in COO edge order)
    /// defaults to all ones.
    pub fn spmm(
        &mut self,
        csr: &Arc<CsrView>,
        x: &Tensor<T>,
        edge_scale: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = csr.num_rows();
        if x.rank() != 2 || x.shape()[1] != n {
            return Err(GnnError::Dimension(format!(
                "spmm expects features [d,{}], got {:?}",
                n,
                x.shape()
            )));
        }
        let num_edges = csr.col_idx.len();
        if let Some(s) = edge_scale {
            if s.numel() != num_edges {
                return Err(GnnError::Dimension(format!(
                    "spmm edge scale has {} entries but the graph has {} edges",
                    s.numel(),
                    num_edges
                )));
            }
        }
        let d = x.shape()[0];
        let xd = x.data();
        let mut out = vec![T::zero(); d * n];
        for t in 0..n {
            for pos in csr.row_ptr[t]..csr.row_ptr[t + 1] {
                let src = csr.col_idx[pos];
                let w = match edge_scale {
                    Some(s) => s.data()[csr.perm[pos]],
                    None => T::one(),
                };
                for i in 0..d {
                    out[i * n + t] += w * xd[i * n + src];
                }
            }
        }
        let ix = self.input_id(x);
        let is = edge_scale.and_then(|s| self.input_id(s));
        let t = Tensor::from_vec(vec![d, n], out)?;
        if ix.is_some() || is.is_some() {
            let id = self.push(
                vec![d, n],
                Op::Spmm {
                    x: ix,
                    scale: is,
                    csr: Arc::clone(csr),
                    x_data: x.data_arc(),
                    scale_data: edge_scale.map(|s| s.data_arc()),
                    d,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Softmax of per-edge logits within each target node's incoming
    /// edges, per row; stabilized by subtracting the per-segment max.
    pub fn edge_softmax(
        &mut self,
        targets: Arc<Vec<usize>>,
        num_nodes: usize,
        logits: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if logits.rank() != 2 || logits.shape()[1] != targets.len() {
            return Err(GnnError::Dimension(format!(
                "edge_softmax expects logits [h,{}], got {:?}",
                targets.len(),
                logits.shape()
            )));
        }
        for (pos, &t) in targets.iter().enumerate() {
            if t >= num_nodes {
                return Err(GnnError::Index(format!(
                    "edge_softmax: target {} at position {} out of range for {} nodes",
                    t, pos, num_nodes
                )));
            }
        }
        let (h, e_count) = (logits.shape()[0], logits.shape()[1]);
        let ld = logits.data();
        let mut out = vec![T::zero(); h * e_count];
        let mut seg_max = vec![T::neg_infinity(); num_nodes];
        let mut seg_sum = vec![T::zero(); num_nodes];
        for row in 0..h {
            let l = &ld[row * e_count..(row + 1) * e_count];
            let o = &mut out[row * e_count..(row + 1) * e_count];
            for v in seg_max.iter_mut() {
                *v = T::neg_infinity();
            }
            for (e, &t) in targets.iter().enumerate() {
                if l[e] > seg_max[t] {
                    seg_max[t] = l[e];
                }
            }
            for v in seg_sum.iter_mut() {
                *v = T::zero();
            }
            for (e, &t) in targets.iter().enumerate() {
                let w = (l[e] - seg_max[t]).exp();
                o[e] = w;
                seg_sum[t] += w;
            }
            for (e, &t) in targets.iter().enumerate() {
                o[e] /= seg_sum[t];
            }
        }
        let il = self.input_id(logits);
        let t = Tensor::from_vec(vec![h, e_count], out)?;
        if il.is_some() {
            let id = self.push(
                vec![h, e_count],
                Op::EdgeSoftmax {
                    logits: il,
                    targets,
                    num_nodes,
                    y_data: t.data_arc(),
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    /// Per-head dot products `out[k,v] = sum_d att[k,d] * z[k*dh+d, v]`,
    /// used by attention layers to score nodes.
    pub fn head_scores(
        &mut self,
        z: &Tensor<T>,
        att: &Tensor<T>,
        heads: usize,
    ) -> Result<Tensor<T>> {
        if z.rank() != 2 || att.rank() != 2 || att.shape()[0] != heads || heads == 0
            || z.shape()[0] != heads * att.shape()[1]
        {
            return Err(GnnError::Dimension(format!(
                "head_scores expects z [heads*dh, n] and att [heads, dh], got {:?} and {:?}",
                z.shape(),
                att.shape()
            )));
        }
        let dh = att.shape()[1];
        let n = z.shape()[1];
        let (zd, ad) = (z.data(), att.data());
        let mut out = vec![T::zero(); heads * n];
        for k in 0..heads {
            for d0 in 0..dh {
                let coef = ad[k * dh + d0];
                let zr = &zd[(k * dh + d0) * n..(k * dh + d0 + 1) * n];
                let orow = &mut out[k * n..(k + 1) * n];
                for v in 0..n {
                    orow[v] += coef * zr[v];
                }
            }
        }
        let (iz, ia) = (self.input_id(z), self.input_id(att));
        let t = Tensor::from_vec(vec![heads, n], out)?;
        if iz.is_some() || ia.is_some() {
            let id = self.push(
                vec![heads, n],
                Op::HeadScores {
                    z: iz,
                    att: ia,
                    z_data: z.data_arc(),
                    att_data: att.data_arc(),
                    heads,
                    dh,
                },
            );
            Ok(t.with_node(id))
        } else {
            Ok(t)
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar seed node. Gradients accumulate in
    /// node-id order, so repeated calls are bit-identical.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<T>> {
        let Some(seed_node) = self.nodes.get(seed.0) else {
            return Err(GnnError::Contract(format!(
                "backward seed {} is not on this tape",
                seed.0
            )));
        };
        let seed_numel: usize = seed_node.shape.iter().product();
        if seed_numel != 1 {
            return Err(GnnError::Contract(format!(
                "backward seed must be a scalar tensor, got shape {:?}",
                seed_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![T::one()]);

        for id in (0..=seed.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
        }

        let per_node = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|buf| {
                    Tensor::from_vec(self.nodes[id].shape.clone(), buf)
                        .expect("gradient buffer matches node shape")
                })
            })
            .collect();
        Ok(Gradients {
            per_node,
            leaf_by_buffer: self.leaf_by_buffer.clone(),
        })
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        fn slot<T: Real>(
            grads: &mut [Option<Vec<T>>],
            id: NodeId,
            len: usize,
        ) -> &mut [T] {
            grads[id.0]
                .get_or_insert_with(|| vec![T::zero(); len])
                .as_mut_slice()
        }

        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped"),
            Op::MatMul {
                a,
                b,
                a_data,
                b_data,
                p,
                q,
                r,
            } => {
                let (p, q, r) = (*p, *q, *r);
                if let Some(ia) = a {
                    let da = slot(grads, *ia, p * q);
                    for i in 0..p {
                        for j in 0..r {
                            let gij = g[i * r + j];
                            for k in 0..q {
                                da[i * q + k] += gij * b_data[k * r + j];
                            }
                        }
                    }
                }
                if let Some(ib) = b {
                    let db = slot(grads, *ib, q * r);
                    for i in 0..p {
                        for k in 0..q {
                            let aik = a_data[i * q + k];
                            for j in 0..r {
                                db[k * r + j] += aik * g[i * r + j];
                            }
                        }
                    }
                }
            }
            Op::AddBias { x, b, d, n } => {
                let (d, n) = (*d, *n);
                if let Some(ix) = x {
                    let dx = slot(grads, *ix, d * n);
                    for (dst, src) in dx.iter_mut().zip(g.iter()) {
                        *dst += *src;
                    }
                }
                if let Some(ib) = b {
                    let db = slot(grads, *ib, d);
                    for i in 0..d {
                        for j in 0..n {
                            db[i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Unary {
                kind,
                slope,
                x,
                x_data,
                y_data,
            } => {
                if let Some(ix) = x {
                    let s = T::from_f64(*slope);
                    let two = T::from_f64(2.0);
                    let neg_half = T::from_f64(-0.5);
                    let dx = slot(grads, *ix, x_data.len());
                    for i in 0..x_data.len() {
                        let factor = match kind {
                            UnaryKind::Relu => {
                                if x_data[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryKind::LeakyRelu => {
                                if x_data[i] > T::zero() {
                                    T::one()
                                } else {
                                    s
                                }
                            }
                            UnaryKind::Sigmoid => y_data[i] * (T::one() - y_data[i]),
                            UnaryKind::Tanh => T::one() - y_data[i] * y_data[i],
                            UnaryKind::Exp => y_data[i],
                            UnaryKind::Square => two * x_data[i],
                            UnaryKind::Rsqrt => neg_half * y_data[i] * y_data[i] * y_data[i],
                        };
                        dx[i] += g[i] * factor;
                    }
                }
            }
            Op::Binary {
                kind,
                a,
                b,
                a_data,
                b_data,
            } => {
                if let Some(ia) = a {
                    let da = slot(grads, *ia, a_data.len());
                    for i in 0..a_data.len() {
                        da[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * b_data[i],
                        };
                    }
                }
                if let Some(ib) = b {
                    let db = slot(grads, *ib, b_data.len());
                    for i in 0..b_data.len() {
                        db[i] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * a_data[i],
                        };
                    }
                }
            }
            Op::Affine { x, mul } => {
                if let Some(ix) = x {
                    let m = T::from_f64(*mul);
                    let len = self.nodes[ix.0].shape.iter().product();
                    let dx = slot(grads, *ix, len);
                    for i in 0..len {
                        dx[i] += m * g[i];
                    }
                }
            }
            Op::Reduce {
                kind,
                axis,
                x,
                in_shape,
                argmax,
            } => {
                let Some(ix) = x else { return };
                let len: usize = in_shape.iter().product();
                let dx = slot(grads, *ix, len);
                match axis {
                    None => match kind {
                        ReduceKind::Sum => {
                            for v in dx.iter_mut() {
                                *v += g[0];
                            }
                        }
                        ReduceKind::Mean => {
                            if len > 0 {
                                let inv = T::one() / T::from_f64(len as f64);
                                for v in dx.iter_mut() {
                                    *v += g[0] * inv;
                                }
                            }
                        }
                        ReduceKind::Max => {
                            dx[argmax[0]] += g[0];
                        }
                    },
                    Some(ax) => {
                        let outer: usize = in_shape[..*ax].iter().product();
                        let alen = in_shape[*ax];
                        let inner: usize = in_shape[*ax + 1..].iter().product();
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let inv = if matches!(kind, ReduceKind::Mean) && alen > 0 {
                                    T::one() / T::from_f64(alen as f64)
                                } else {
                                    T::one()
                                };
                                for o in 0..outer {
                                    for j in 0..alen {
                                        for i in 0..inner {
                                            dx[(o * alen + j) * inner + i] +=
                                                g[o * inner + i] * inv;
                                        }
                                    }
                                }
                            }
                            ReduceKind::Max => {
                                for (oi, &pos) in argmax.iter().enumerate() {
                                    dx[pos] += g[oi];
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherCols { x, index, d } => {
                if let Some(ix) = x {
                    let n = self.nodes[ix.0].shape[1];
                    let k = index.len();
                    let dx = slot(grads, *ix, d * n);
                    for i in 0..*d {
                        for (j, &c) in index.iter().enumerate() {
                            dx[i * n + c] += g[i * k + j];
                        }
                    }
                }
            }
            Op::ScatterAdd {
                src,
                index,
                d,
                n_out,
            } => {
                if let Some(isrc) = src {
                    let k = index.len();
                    let ds = slot(grads, *isrc, d * k);
                    for i in 0..*d {
                        for (j, &t) in index.iter().enumerate() {
                            ds[i * k + j] += g[i * n_out + t];
                        }
                    }
                }
            }
            Op::SegmentMax {
                src,
                argmax,
                d,
                n_out,
            } => {
                if let Some(isrc) = src {
                    let k = self.nodes[isrc.0].shape[1];
                    let ds = slot(grads, *isrc, d * k);
                    for i in 0..*d {
                        for t in 0..*n_out {
                            if let Some(j) = argmax[i * n_out + t] {
                                ds[i * k + j] += g[i * n_out + t];
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, s, x_data, s_data } => {
                let d = s_data.len();
                let n = x_data.len() / d.max(1);
                if let Some(ix) = x {
                    let dx = slot(grads, *ix, x_data.len());
                    for i in 0..d {
                        for j in 0..n {
                            dx[i * n + j] += g[i * n + j] * s_data[i];
                        }
                    }
                }
                if let Some(is) = s {
                    let ds = slot(grads, *is, d);
                    for i in 0..d {
                        for j in 0..n {
                            ds[i] += g[i * n + j] * x_data[i * n + j];
                        }
                    }
                }
            }
            Op::ScaleCols { x, s, x_data, s_data } => {
                let n = s_data.len();
                let d = x_data.len() / n.max(1);
                if let Some(ix) = x {
                    let dx = slot(grads, *ix, x_data.len());
                    for i in 0..d {
                        for j in 0..n {
                            dx[i * n + j] += g[i * n + j] * s_data[j];
                        }
                    }
                }
                if let Some(is) = s {
                    let ds = slot(grads, *is, n);
                    for i in 0..d {
                        for j in 0..n {
                            ds[j] += g[i * n + j] * x_data[i * n + j];
                        }
                    }
                }
            }
            Op::ScaleScalar { x, s, x_data, s_data } => {
                if let Some(ix) = x {
                    let sv = s_data[0];
                    let dx = slot(grads, *ix, x_data.len());
                    for i in 0..x_data.len() {
                        dx[i] += g[i] * sv;
                    }
                }
                if let Some(is) = s {
                    let ds = slot(grads, *is, 1);
                    for i in 0..x_data.len() {
                        ds[0] += g[i] * x_data[i];
                    }
                }
            }
            Op::ExpandRows { x, times, rows_in } => {
                if let Some(ix) = x {
                    let c = self.nodes[ix.0].shape[1];
                    let dx = slot(grads, *ix, rows_in * c);
                    for i in 0..*rows_in {
                        for u in 0..*times {
                            for j in 0..c {
                                dx[i * c + j] += g[(i * times + u) * c + j];
                            }
                        }
                    }
                }
            }
            Op::MeanHeads { x, heads, dh } => {
                if let Some(ix) = x {
                    let c = self.nodes[ix.0].shape[1];
                    let inv = T::one() / T::from_f64(*heads as f64);
                    let dx = slot(grads, *ix, heads * dh * c);
                    for k in 0..*heads {
                        for d0 in 0..*dh {
                            for j in 0..c {
                                dx[(k * dh + d0) * c + j] += g[d0 * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(ix) = x {
                    let len: usize = self.nodes[ix.0].shape.iter().product();
                    let dx = slot(grads, *ix, len);
                    for i in 0..len {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Spmm {
                x,
                scale,
                csr,
                x_data,
                scale_data,
                d,
            } => {
                let n = csr.num_rows();
                if let Some(ix) = x {
                    let dx = slot(grads, *ix, d * n);
                    for t in 0..n {
                        for pos in csr.row_ptr[t]..csr.row_ptr[t + 1] {
                            let src = csr.col_idx[pos];
                            let w = match scale_data {
                                Some(s) => s[csr.perm[pos]],
                                None => T::one(),
                            };
                            for i in 0..*d {
                                dx[i * n + src] += w * g[i * n + t];
                            }
                        }
                    }
                }
                if let Some(is) = scale {
                    let num_edges = csr.col_idx.len();
                    let ds = slot(grads, *is, num_edges);
                    for t in 0..n {
                        for pos in csr.row_ptr[t]..csr.row_ptr[t + 1] {
                            let src = csr.col_idx[pos];
                            let mut acc = T::zero();
                            for i in 0..*d {
                                acc += g[i * n + t] * x_data[i * n + src];
                            }
                            ds[csr.perm[pos]] += acc;
                        }
                    }
                }
            }
            Op::EdgeSoftmax {
                logits,
                targets,
                num_nodes,
                y_data,
            } => {
                if let Some(il) = logits {
                    let e_count = targets.len();
                    let h = y_data.len() / e_count.max(1);
                    let dz = slot(grads, *il, y_data.len());
                    let mut seg = vec![T::zero(); *num_nodes];
                    for row in 0..h {
                        let y = &y_data[row * e_count..(row + 1) * e_count];
                        for v in seg.iter_mut() {
                            *v = T::zero();
                        }
                        for (e, &t) in targets.iter().enumerate() {
                            seg[t] += g[row * e_count + e] * y[e];
                        }
                        for (e, &t) in targets.iter().enumerate() {
                            dz[row * e_count + e] += y[e] * (g[row * e_count + e] - seg[t]);
                        }
                    }
                }
            }
            Op::HeadScores {
                z,
                att,
                z_data,
                att_data,
                heads,
                dh,
            } => {
                let n = z_data.len() / (heads * dh).max(1);
                if let Some(iz) = z {
                    let dz = slot(grads, *iz, z_data.len());
                    for k in 0..*heads {
                        for d0 in 0..*dh {
                            let coef = att_data[k * dh + d0];
                            for v in 0..n {
                                dz[(k * dh + d0) * n + v] += coef * g[k * n + v];
                            }
                        }
                    }
                }
                if let Some(ia) = att {
                    let da = slot(grads, *ia, heads * dh);
                    for k in 0..*heads {
                        for d0 in 0..*dh {
                            let mut acc = T::zero();
                            for v in 0..n {
                                acc += z_data[(k * dh + d0) * n + v] * g[k * n + v];
                            }
                            da[k * dh + d0] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Result of one backward sweep: gradients for the tape's leaf tensors.
pub struct Gradients<T: Real> {
    per_node: Vec<Option<Tensor<T>>>,
    leaf_by_buffer: HashMap<usize, NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a tensor, located by node id or buffer identity.
    /// `None` when the tensor never contributed to the seed.
    pub fn grad(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let id = t
            .node_id()
            .or_else(|| self.leaf_by_buffer.get(&t.buffer_id()).copied())?;
        self.per_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a tensor, or a zero tensor of its shape when the
    /// tensor was never used by the differentiated expression.
    pub fn grad_or_zeros(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.grad(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }
}

/// Named gradients, one entry per parameter, shapes matching.
#[derive(Debug, Clone, Default)]
pub struct GradientMap<T: Real> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> GradientMap<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let a = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&a, &Tensor::eye(2)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let b = t2(3, 1, vec![1.0, 1.0, 1.0]);
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = t2(2, 3, vec![0.0; 6]);
        let b = t2(2, 2, vec![0.0; 4]);
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn add_bias_zero_is_identity() {
        let mut tape = Tape::new();
        let x = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        let out = tape.add_bias(&x, &b).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn add_bias_broadcasts_per_row() {
        let mut tape = Tape::new();
        let x = t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let out = tape.add_bias(&x, &b).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn add_bias_backward_sums_rows() {
        // d=2, n=3: d(sum)/db = [n, n]
        let mut tape = Tape::new();
        let x = t2(2, 3, vec![0.5; 6]);
        let b = Tensor::from_vec(vec![2], vec![1.0, -1.0])
            .unwrap()
            .requires_grad(true);
        let y = tape.add_bias(&x, &b).unwrap();
        let loss = tape.reduce(&y, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(loss.node_id().unwrap()).unwrap();
        assert_eq!(grads.grad(&b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn relu_and_leaky_relu_values() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.relu(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
        let y = Tensor::<f64>::from_vec(vec![2], vec![-1.0, 2.0]).unwrap();
        let out = tape.leaky_relu(&y, 0.2).unwrap();
        assert!((out.data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(out.data()[1], 2.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(0.0f64);
        assert_eq!(tape.sigmoid(&x).unwrap().item(), 0.5);
    }

    #[test]
    fn reduce_sum_and_axis_mean() {
        let mut tape = Tape::new();
        let v = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.reduce(&v, ReduceKind::Sum, None).unwrap().item(), 6.0);
        let m = t2(2, 2, vec![1.0, 3.0, 2.0, 4.0]);
        let r = tape.reduce(&m, ReduceKind::Mean, Some(1)).unwrap();
        assert_eq!(r.shape(), &[2]);
        assert_eq!(r.data(), &[2.0, 3.0]);
    }

    #[test]
    fn reduce_max_backward_first_wins() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![2.0, 2.0, 1.0])
            .unwrap()
            .requires_grad(true);
        let y = tape.reduce(&x, ReduceKind::Max, None).unwrap();
        let grads = tape.backward(y.node_id().unwrap()).unwrap();
        assert_eq!(grads.grad(&x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_empty_conventions() {
        let mut tape = Tape::new();
        let empty = Tensor::<f64>::zeros(vec![0]);
        assert_eq!(tape.reduce(&empty, ReduceKind::Sum, None).unwrap().item(), 0.0);
        assert_eq!(tape.reduce(&empty, ReduceKind::Mean, None).unwrap().item(), 0.0);
        assert!(matches!(
            tape.reduce(&empty, ReduceKind::Max, None),
            Err(GnnError::Domain(_))
        ));
    }

    #[test]
    fn gather_columns_examples() {
        let mut tape = Tape::new();
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]);
        assert_eq!(tape.gather_columns(&x, &[2, 0]).unwrap().data(), &[3.0, 1.0]);
        assert_eq!(tape.gather_columns(&x, &[1, 1]).unwrap().data(), &[2.0, 2.0]);
        let empty = tape.gather_columns(&x, &[]).unwrap();
        assert_eq!(empty.shape(), &[1, 0]);
    }

    #[test]
    fn gather_out_of_range_names_position() {
        let mut tape = Tape::new();
        let x = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let err = tape.gather_columns(&x, &[0, 7]).unwrap_err().to_string();
        assert!(err.contains("7") && err.contains("position 1"), "{err}");
    }

    #[test]
    fn scatter_add_examples() {
        let mut tape = Tape::new();
        let src = t2(1, 3, vec![1.0, 2.0, 3.0]);
        let out = tape.scatter_add(&src, &[0, 0, 1], 3).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0, 0.0]);

        // ones scatter to in-degree counts
        let ones = t2(1, 4, vec![1.0; 4]);
        let counts = tape.scatter_add(&ones, &[2, 2, 0, 2], 3).unwrap();
        assert_eq!(counts.data(), &[1.0, 0.0, 3.0]);

        let none = tape.scatter_add(&t2(2, 0, vec![]), &[], 0).unwrap();
        assert_eq!(none.shape(), &[2, 0]);
    }

    #[test]
    fn scatter_out_of_range_is_an_index_error() {
        let mut tape = Tape::new();
        let src = t2(1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            tape.scatter_add(&src, &[0, 5], 3),
            Err(GnnError::Index(_))
        ));
    }

    #[test]
    fn segment_max_empty_segment_is_zero_and_ties_go_first() {
        let mut tape = Tape::new();
        let src = t2(1, 3, vec![-5.0, 4.0, 4.0])
            .requires_grad(true);
        let out = tape
            .segment_max(&src, Arc::new(vec![0, 2, 2]), 3)
            .unwrap();
        assert_eq!(out.data(), &[-5.0, 0.0, 4.0]);
        let loss = tape.reduce(&out, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(loss.node_id().unwrap()).unwrap();
        // column 1 wins the tie with column 2
        assert_eq!(grads.grad(&src).unwrap().data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn square_function_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(3.0f64).requires_grad(true);
        let y = tape.square(&x).unwrap();
        let grads = tape.backward(y.node_id().unwrap()).unwrap();
        assert_eq!(grads.grad(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn dead_relu_branch_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(2.0f64).requires_grad(true);
        let neg = tape.affine(&x, -1.0, 0.0).unwrap();
        let y = tape.relu(&neg).unwrap();
        let s = tape.reduce(&y, ReduceKind::Sum, None).unwrap();
        let grads = tape.backward(s.node_id().unwrap()).unwrap();
        assert_eq!(grads.grad(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut tape = Tape::new();
        let x = t2(2, 2, vec![1.0; 4]).requires_grad(true);
        let y = tape.square(&x).unwrap();
        assert!(matches!(
            tape.backward(y.node_id().unwrap()),
            Err(GnnError::Contract(_))
        ));
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::new();
        let x = t2(2, 3, vec![0.3, -1.2, 0.7, 2.5, -0.4, 1.1]).requires_grad(true);
        let w = t2(2, 2, vec![0.5, -0.25, 1.5, 0.75]).requires_grad(true);
        let h = tape.matmul(&w, &x).unwrap();
        let a = tape.tanh(&h).unwrap();
        let loss = tape.reduce(&a, ReduceKind::Sum, None).unwrap();
        let g1 = tape.backward(loss.node_id().unwrap()).unwrap();
        let g2 = tape.backward(loss.node_id().unwrap()).unwrap();
        assert_eq!(g1.grad(&x).unwrap().data(), g2.grad(&x).unwrap().data());
        assert_eq!(g1.grad(&w).unwrap().data(), g2.grad(&w).unwrap().data());
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let mut tape = Tape::new();
        let x = Tensor::scalar(3.0f64).requires_grad(true);
        let unused = t2(2, 2, vec![1.0; 4]).requires_grad(true);
        let y = tape.square(&x).unwrap();
        let grads = tape.backward(y.node_id().unwrap()).unwrap();
        assert!(grads.grad(&unused).is_none());
        let z = grads.grad_or_zeros(&unused);
        assert_eq!(z.shape(), &[2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_parameter_accumulates_into_one_leaf() {
        // y = w*w contributes twice to the same leaf
        let mut tape = Tape::new();
        let w = Tensor::scalar(3.0f64).requires_grad(true);
        let y = tape.mul(&w, &w).unwrap();
        let grads = tape.backward(y.node_id().unwrap()).unwrap();
        assert_eq!(grads.grad(&w).unwrap().item(), 6.0);
    }

    #[test]
    fn gather_scatter_adjointness_small() {
        // <G, gather(x, idx)> == <scatter_add(G, idx, n), x>
        let mut tape = Tape::new();
        let x = t2(2, 4, vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.5, 3.0, -2.0]);
        let index = vec![3, 0, 0, 2, 1];
        let g = t2(2, 5, vec![1.0, -2.0, 0.5, 0.75, 2.0, -1.5, 0.25, 1.0, -0.75, 0.5]);
        let gx = tape.gather_columns(&x, &index).unwrap();
        let sg = tape.scatter_add(&g, &index, 4).unwrap();
        let lhs: f64 = g.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = sg.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
