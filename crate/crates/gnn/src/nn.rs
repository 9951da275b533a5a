//! Differentiable layers over graphs and their composition.
//!
//! Parameters are plain tensors flagged as differentiation targets;
//! running a layer's forward on a [`Tape`] records the graph of
//! operations, and [`Tape::backward`] then yields per-parameter
//! gradients located by buffer identity. Layers are composed with
//! [`GnnChain`], which checks widths at build time and passes the graph
//! only to layers declared graph-aware.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{GnnError, Result};
use crate::graph::{Direction, GnnGraph};
use crate::mp::{self, Aggregation, MessageFunction, PathChoice};
use crate::tensor::{Real, ReduceKind, Tape, Tensor};

/// Weight initialization: i.i.d. uniform on `(-a, a)` with
/// `a = sqrt(6 / (din + dout))`, shaped `[dout, din]`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    dout: usize,
    din: usize,
) -> Tensor<T> {
    assert!(dout > 0 && din > 0, "glorot_uniform needs positive dims");
    let a = (6.0 / (din + dout) as f64).sqrt();
    let data: Vec<T> = (0..dout * din)
        .map(|_| T::sample_uniform_sym(rng, a))
        .collect();
    Tensor::from_vec(vec![dout, din], data).expect("shape matches draw count")
}

fn param<T: Real>(t: Tensor<T>) -> Tensor<T> {
    t.requires_grad(true)
}

/// Pointwise nonlinearity applied after a layer's affine part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Identity => Ok(x.clone()),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = GnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" | "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(GnnError::Parse(format!(
                "unknown activation {other:?}, expected id, relu or tanh"
            ))),
        }
    }
}

/// Fully connected layer: `act(W x + b)` on each column.
#[derive(Debug, Clone)]
pub struct Dense<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        din: usize,
        dout: usize,
        activation: Activation,
    ) -> Self {
        Self {
            weight: param(glorot_uniform(rng, dout, din)),
            bias: param(Tensor::zeros(vec![dout])),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = tape.matmul(&self.weight, x)?;
        let h = tape.add_bias(&h, &self.bias)?;
        self.activation.apply(tape, &h)
    }

    fn din(&self) -> usize {
        self.weight.shape()[1]
    }

    fn dout(&self) -> usize {
        self.weight.shape()[0]
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        vec![
            ("weight".into(), self.weight.clone(), true),
            ("bias".into(), self.bias.clone(), true),
        ]
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match name {
            "weight" => &mut self.weight,
            "bias" => &mut self.bias,
            _ => return Err(GnnError::Contract(format!("no parameter {name:?}"))),
        };
        check_param_shape(name, slot, &value)?;
        *slot = param(value);
        Ok(())
    }
}

fn check_param_shape<T: Real>(name: &str, old: &Tensor<T>, new: &Tensor<T>) -> Result<()> {
    if old.shape() != new.shape() {
        return Err(GnnError::Dimension(format!(
            "parameter {:?} has shape {:?}, got {:?}",
            name,
            old.shape(),
            new.shape()
        )));
    }
    Ok(())
}

/// Graph convolution combining a node's own features with its
/// aggregated in-neighborhood:
/// `act(W1 x + W2 propagate(copy_xj, aggr, x) + b)`.
#[derive(Debug, Clone)]
pub struct GraphConv<T: Real> {
    weight1: Tensor<T>,
    weight2: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
    aggr: Aggregation,
}

impl<T: Real> GraphConv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        din: usize,
        dout: usize,
        activation: Activation,
        aggr: Aggregation,
    ) -> Self {
        Self {
            weight1: param(glorot_uniform(rng, dout, din)),
            weight2: param(glorot_uniform(rng, dout, din)),
            bias: param(Tensor::zeros(vec![dout])),
            activation,
            aggr,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let m = mp::propagate(
            tape,
            graph,
            &MessageFunction::CopyXj,
            self.aggr,
            None,
            Some(x),
            None,
            PathChoice::Auto,
        )?;
        let own = tape.matmul(&self.weight1, x)?;
        let agg = tape.matmul(&self.weight2, &m)?;
        let h = tape.add(&own, &agg)?;
        let h = tape.add_bias(&h, &self.bias)?;
        self.activation.apply(tape, &h)
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        vec![
            ("weight1".into(), self.weight1.clone(), true),
            ("weight2".into(), self.weight2.clone(), true),
            ("bias".into(), self.bias.clone(), true),
        ]
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match name {
            "weight1" => &mut self.weight1,
            "weight2" => &mut self.weight2,
            "bias" => &mut self.bias,
            _ => return Err(GnnError::Contract(format!("no parameter {name:?}"))),
        };
        check_param_shape(name, slot, &value)?;
        *slot = param(value);
        Ok(())
    }
}

/// Degree-normalized graph convolution: neighbor sums are scaled per
/// edge by `1/sqrt(deg_in(t) * deg_in(s))` (degrees taken after the
/// optional self-loop insertion, weighted when the graph is), then
/// `act(W h + b)`. A zero degree scales to 0.
#[derive(Debug, Clone)]
pub struct GcnConv<T: Real> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
    add_self_loops: bool,
}

impl<T: Real> GcnConv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        din: usize,
        dout: usize,
        activation: Activation,
        add_self_loops: bool,
    ) -> Self {
        Self {
            weight: param(glorot_uniform(rng, dout, din)),
            bias: param(Tensor::zeros(vec![dout])),
            activation,
            add_self_loops,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let looped;
        let graph = if self.add_self_loops {
            looped = graph.add_self_loops()?;
            &looped
        } else {
            graph
        };
        let scale = gcn_edge_scale(graph)?;
        let h = mp::spmm_csr(tape, graph, x, Some(&scale))?;
        let h = tape.matmul(&self.weight, &h)?;
        let h = tape.add_bias(&h, &self.bias)?;
        self.activation.apply(tape, &h)
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        vec![
            ("weight".into(), self.weight.clone(), true),
            ("bias".into(), self.bias.clone(), true),
        ]
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match name {
            "weight" => &mut self.weight,
            "bias" => &mut self.bias,
            _ => return Err(GnnError::Contract(format!("no parameter {name:?}"))),
        };
        check_param_shape(name, slot, &value)?;
        *slot = param(value);
        Ok(())
    }
}

/// Per-edge scale `1/sqrt(deg_in(t)) * 1/sqrt(deg_in(s)) * w_e` with
/// degrees of the given graph; zero degrees contribute scale 0.
fn gcn_edge_scale<T: Real>(graph: &GnnGraph<T>) -> Result<Tensor<T>> {
    let weighted = graph.edge_weight().is_some();
    let deg = graph.degree(Direction::In, weighted)?;
    let inv_sqrt: Vec<T> = deg
        .data()
        .iter()
        .map(|&d| {
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    let mut scale = vec![T::zero(); graph.num_edges()];
    for e in 0..graph.num_edges() {
        let w = match graph.edge_weight() {
            Some(w) => w.data()[e],
            None => T::one(),
        };
        scale[e] = inv_sqrt[graph.targets()[e]] * inv_sqrt[graph.sources()[e]] * w;
    }
    Tensor::from_vec(vec![graph.num_edges()], scale)
}

/// Isomorphism-style convolution: `MLP((1 + eps) x + sum of neighbor
/// features)` with a two-layer MLP (relu between).
#[derive(Debug, Clone)]
pub struct GinConv<T: Real> {
    mlp0: Dense<T>,
    mlp1: Dense<T>,
    eps: Tensor<T>,
    train_eps: bool,
}

impl<T: Real> GinConv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        din: usize,
        hidden: usize,
        dout: usize,
        eps: f64,
        train_eps: bool,
    ) -> Self {
        Self {
            mlp0: Dense::new(rng, din, hidden, Activation::Relu),
            mlp1: Dense::new(rng, hidden, dout, Activation::Identity),
            eps: Tensor::from_vec(vec![1], vec![T::from_f64(eps)])
                .expect("one element")
                .requires_grad(train_eps),
            train_eps,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let neigh = mp::propagate(
            tape,
            graph,
            &MessageFunction::CopyXj,
            Aggregation::Sum,
            None,
            Some(x),
            None,
            PathChoice::Auto,
        )?;
        let one_plus_eps = tape.add(&Tensor::ones(vec![1]), &self.eps)?;
        let own = tape.scale_scalar(x, &one_plus_eps)?;
        let h = tape.add(&own, &neigh)?;
        let h = self.mlp0.forward(tape, &h)?;
        self.mlp1.forward(tape, &h)
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        let mut out = Vec::new();
        for (prefix, dense) in [("mlp0", &self.mlp0), ("mlp1", &self.mlp1)] {
            for (name, value, trainable) in dense.local_params() {
                out.push((format!("{prefix}.{name}"), value, trainable));
            }
        }
        out.push(("eps".into(), self.eps.clone(), self.train_eps));
        out
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if let Some(rest) = name.strip_prefix("mlp0.") {
            return self.mlp0.set_local_param(rest, value);
        }
        if let Some(rest) = name.strip_prefix("mlp1.") {
            return self.mlp1.set_local_param(rest, value);
        }
        if name == "eps" {
            check_param_shape(name, &self.eps, &value)?;
            self.eps = value.requires_grad(self.train_eps);
            return Ok(());
        }
        Err(GnnError::Contract(format!("no parameter {name:?}")))
    }
}

/// Attention convolution: per head, nodes are scored through a shared
/// linear map, per-edge logits `att_dst . z_t + att_src . z_s` pass a
/// leaky relu and an incoming-edge softmax, and neighbors are averaged
/// under those weights. Heads concatenate (or average with
/// `concat = false`); self-loops are added by default so every node
/// attends to itself.
#[derive(Debug, Clone)]
pub struct GatConv<T: Real> {
    weight: Tensor<T>,
    att_src: Tensor<T>,
    att_dst: Tensor<T>,
    bias: Tensor<T>,
    heads: usize,
    dh: usize,
    concat: bool,
    negative_slope: f64,
    add_self_loops: bool,
}

impl<T: Real> GatConv<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        din: usize,
        dout: usize,
        heads: usize,
        concat: bool,
        negative_slope: f64,
        add_self_loops: bool,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(GnnError::Contract("attention needs at least one head".into()));
        }
        if concat && !dout.is_multiple_of(heads) {
            return Err(GnnError::Contract(format!(
                "output width {dout} is not divisible by {heads} heads"
            )));
        }
        let dh = if concat { dout / heads } else { dout };
        Ok(Self {
            weight: param(glorot_uniform(rng, heads * dh, din)),
            att_src: param(glorot_uniform(rng, heads, dh)),
            att_dst: param(glorot_uniform(rng, heads, dh)),
            bias: param(Tensor::zeros(vec![dout])),
            heads,
            dh,
            concat,
            negative_slope,
            add_self_loops,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let looped;
        let graph = if self.add_self_loops {
            looped = graph.add_self_loops()?;
            &looped
        } else {
            graph
        };
        let n = graph.num_nodes();
        let z = tape.matmul(&self.weight, x)?;
        let score_src = tape.head_scores(&z, &self.att_src, self.heads)?;
        let score_dst = tape.head_scores(&z, &self.att_dst, self.heads)?;
        let per_edge_src = tape.gather_columns_arc(&score_src, graph.sources_arc())?;
        let per_edge_dst = tape.gather_columns_arc(&score_dst, graph.targets_arc())?;
        let logits = tape.add(&per_edge_dst, &per_edge_src)?;
        let logits = tape.leaky_relu(&logits, self.negative_slope)?;
        let alpha = tape.edge_softmax(graph.targets_arc(), n, &logits)?;
        let zj = tape.gather_columns_arc(&z, graph.sources_arc())?;
        let alpha_rows = tape.expand_rows(&alpha, self.dh)?;
        let weighted = tape.mul(&zj, &alpha_rows)?;
        let mut out = tape.scatter_add_arc(&weighted, graph.targets_arc(), n)?;
        if !self.concat {
            out = tape.mean_heads(&out, self.heads)?;
        }
        tape.add_bias(&out, &self.bias)
    }

    fn dout(&self) -> usize {
        if self.concat {
            self.heads * self.dh
        } else {
            self.dh
        }
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        vec![
            ("weight".into(), self.weight.clone(), true),
            ("att_src".into(), self.att_src.clone(), true),
            ("att_dst".into(), self.att_dst.clone(), true),
            ("bias".into(), self.bias.clone(), true),
        ]
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = match name {
            "weight" => &mut self.weight,
            "att_src" => &mut self.att_src,
            "att_dst" => &mut self.att_dst,
            "bias" => &mut self.bias,
            _ => return Err(GnnError::Contract(format!("no parameter {name:?}"))),
        };
        check_param_shape(name, slot, &value)?;
        *slot = param(value);
        Ok(())
    }
}

/// Normalizes each feature row over all columns of the batch, then
/// scales and shifts by learned `gamma`/`beta`. Training mode uses
/// batch statistics and folds them into running estimates (momentum
/// 0.1, unbiased variance); eval mode uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: param(Tensor::ones(vec![d])),
            beta: param(Tensor::zeros(vec![d])),
            running_mean: Tensor::zeros(vec![d]),
            running_var: Tensor::ones(vec![d]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.shape()[0]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.shape()[0] != self.dim() {
            return Err(GnnError::Dimension(format!(
                "batch normalization over {} features got {:?}",
                self.dim(),
                x.shape()
            )));
        }
        if x.shape()[1] == 0 {
            return Err(GnnError::Contract(
                "batch normalization over zero columns".into(),
            ));
        }
        Ok(())
    }

    pub fn forward_train(&mut self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = x.shape()[1];
        let mean = tape.reduce(x, ReduceKind::Mean, Some(1))?;
        let neg_mean = tape.affine(&mean, -1.0, 0.0)?;
        let centered = tape.add_bias(x, &neg_mean)?;
        let sq = tape.square(&centered)?;
        let var = tape.reduce(&sq, ReduceKind::Mean, Some(1))?;
        let shifted_var = tape.affine(&var, 1.0, self.eps)?;
        let inv_std = tape.rsqrt(&shifted_var)?;
        let xhat = tape.scale_rows(&centered, &inv_std)?;
        let scaled = tape.scale_rows(&xhat, &self.gamma)?;
        let out = tape.add_bias(&scaled, &self.beta)?;

        let m = T::from_f64(self.momentum);
        let keep = T::from_f64(1.0 - self.momentum);
        let unbias = if n > 1 {
            T::from_f64(n as f64 / (n as f64 - 1.0))
        } else {
            T::one()
        };
        let new_mean: Vec<T> = self
            .running_mean
            .data()
            .iter()
            .zip(mean.data())
            .map(|(&old, &b)| keep * old + m * b)
            .collect();
        let new_var: Vec<T> = self
            .running_var
            .data()
            .iter()
            .zip(var.data())
            .map(|(&old, &b)| keep * old + m * b * unbias)
            .collect();
        self.running_mean = Tensor::from_vec(vec![self.dim()], new_mean)?;
        self.running_var = Tensor::from_vec(vec![self.dim()], new_var)?;
        Ok(out)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let neg_mean: Vec<T> = self.running_mean.data().iter().map(|&v| -v).collect();
        let neg_mean = Tensor::from_vec(vec![self.dim()], neg_mean)?;
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(self.eps)).sqrt())
            .collect();
        let inv_std = Tensor::from_vec(vec![self.dim()], inv_std)?;
        let centered = tape.add_bias(x, &neg_mean)?;
        let xhat = tape.scale_rows(&centered, &inv_std)?;
        let scaled = tape.scale_rows(&xhat, &self.gamma)?;
        tape.add_bias(&scaled, &self.beta)
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        vec![
            ("gamma".into(), self.gamma.clone(), true),
            ("beta".into(), self.beta.clone(), true),
            ("running_mean".into(), self.running_mean.clone(), false),
            ("running_var".into(), self.running_var.clone(), false),
        ]
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match name {
            "gamma" => {
                check_param_shape(name, &self.gamma, &value)?;
                self.gamma = param(value);
            }
            "beta" => {
                check_param_shape(name, &self.beta, &value)?;
                self.beta = param(value);
            }
            "running_mean" => {
                check_param_shape(name, &self.running_mean, &value)?;
                self.running_mean = value.detached();
            }
            "running_var" => {
                check_param_shape(name, &self.running_var, &value)?;
                self.running_var = value.detached();
            }
            _ => return Err(GnnError::Contract(format!("no parameter {name:?}"))),
        }
        Ok(())
    }
}

/// Reduces node columns into one column per graph using the batch's
/// graph indicator: `[d, num_nodes] -> [d, num_graphs]`.
#[derive(Debug, Clone, Copy)]
pub struct GlobalPool {
    mode: Aggregation,
}

impl GlobalPool {
    pub fn new(mode: Aggregation) -> Self {
        Self { mode }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != graph.num_nodes() {
            return Err(GnnError::Dimension(format!(
                "pooling expects [d, {}], got {:?}",
                graph.num_nodes(),
                x.shape()
            )));
        }
        let ind = graph.graph_indicator_arc();
        let k = graph.num_graphs();
        match self.mode {
            Aggregation::Sum => tape.scatter_add_arc(x, ind, k),
            Aggregation::Mean => {
                let summed = tape.scatter_add_arc(x, ind, k)?;
                let mut counts = vec![0usize; k];
                for &g in graph.graph_indicator() {
                    counts[g] += 1;
                }
                let inv: Vec<T> = counts
                    .iter()
                    .map(|&c| T::one() / T::from_f64(c.max(1) as f64))
                    .collect();
                let inv = Tensor::from_vec(vec![k], inv)?;
                tape.scale_cols(&summed, &inv)
            }
            Aggregation::Max => tape.segment_max(x, ind, k),
        }
    }
}

/// One element of a [`GnnChain`].
#[derive(Clone)]
pub enum Layer<T: Real> {
    Dense(Dense<T>),
    GraphConv(GraphConv<T>),
    Gcn(GcnConv<T>),
    Gin(GinConv<T>),
    Gat(GatConv<T>),
    BatchNorm(BatchNorm<T>),
    Pool(GlobalPool),
    Activation(Activation),
}

/// Width bookkeeping for chain validation.
enum LayerDims {
    /// Consumes `din` columns-width, produces `dout`.
    Fixed { din: usize, dout: usize },
    /// Requires and preserves an exact width.
    Width(usize),
    /// Width-agnostic.
    Passthrough,
}

impl<T: Real> Layer<T> {
    /// Whether the layer consumes the graph structure (fixed per kind).
    pub fn graph_aware(&self) -> bool {
        matches!(
            self,
            Layer::GraphConv(_) | Layer::Gcn(_) | Layer::Gin(_) | Layer::Gat(_) | Layer::Pool(_)
        )
    }

    fn dims(&self) -> LayerDims {
        match self {
            Layer::Dense(l) => LayerDims::Fixed {
                din: l.din(),
                dout: l.dout(),
            },
            Layer::GraphConv(l) => LayerDims::Fixed {
                din: l.weight1.shape()[1],
                dout: l.weight1.shape()[0],
            },
            Layer::Gcn(l) => LayerDims::Fixed {
                din: l.weight.shape()[1],
                dout: l.weight.shape()[0],
            },
            Layer::Gin(l) => LayerDims::Fixed {
                din: l.mlp0.din(),
                dout: l.mlp1.dout(),
            },
            Layer::Gat(l) => LayerDims::Fixed {
                din: l.weight.shape()[1],
                dout: l.dout(),
            },
            Layer::BatchNorm(l) => LayerDims::Width(l.dim()),
            Layer::Pool(_) | Layer::Activation(_) => LayerDims::Passthrough,
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
        train: bool,
    ) -> Result<Tensor<T>> {
        match self {
            Layer::Dense(l) => l.forward(tape, x),
            Layer::GraphConv(l) => l.forward(tape, graph, x),
            Layer::Gcn(l) => l.forward(tape, graph, x),
            Layer::Gin(l) => l.forward(tape, graph, x),
            Layer::Gat(l) => l.forward(tape, graph, x),
            Layer::BatchNorm(l) => {
                if train {
                    l.forward_train(tape, x)
                } else {
                    l.forward_eval(tape, x)
                }
            }
            Layer::Pool(l) => l.forward(tape, graph, x),
            Layer::Activation(a) => a.apply(tape, x),
        }
    }

    fn local_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        match self {
            Layer::Dense(l) => l.local_params(),
            Layer::GraphConv(l) => l.local_params(),
            Layer::Gcn(l) => l.local_params(),
            Layer::Gin(l) => l.local_params(),
            Layer::Gat(l) => l.local_params(),
            Layer::BatchNorm(l) => l.local_params(),
            Layer::Pool(_) | Layer::Activation(_) => Vec::new(),
        }
    }

    fn set_local_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self {
            Layer::Dense(l) => l.set_local_param(name, value),
            Layer::GraphConv(l) => l.set_local_param(name, value),
            Layer::Gcn(l) => l.set_local_param(name, value),
            Layer::Gin(l) => l.set_local_param(name, value),
            Layer::Gat(l) => l.set_local_param(name, value),
            Layer::BatchNorm(l) => l.set_local_param(name, value),
            Layer::Pool(_) | Layer::Activation(_) => {
                Err(GnnError::Contract(format!("no parameter {name:?}")))
            }
        }
    }
}

/// An ordered stack of layers applied left to right. Graph-aware
/// layers receive the graph; plain layers only see the feature matrix.
/// Widths are checked once at construction.
#[derive(Clone)]
pub struct GnnChain<T: Real> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> GnnChain<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer.dims() {
                LayerDims::Fixed { din, dout } => {
                    if let Some(w) = width {
                        if w != din {
                            return Err(GnnError::Dimension(format!(
                                "layer {i} expects input width {din} but receives {w}"
                            )));
                        }
                    }
                    width = Some(dout);
                }
                LayerDims::Width(d) => {
                    if let Some(w) = width {
                        if w != d {
                            return Err(GnnError::Dimension(format!(
                                "layer {i} expects width {d} but receives {w}"
                            )));
                        }
                    }
                    width = Some(d);
                }
                LayerDims::Passthrough => {}
            }
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Training-mode forward; batch normalization layers consume batch
    /// statistics and update their running estimates, which is why this
    /// takes `&mut self`.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(tape, graph, &cur, true)?;
        }
        Ok(cur)
    }

    /// Inference-mode forward; running statistics are read, not written.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        graph: &GnnGraph<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense(l) => l.forward(tape, &cur),
                Layer::GraphConv(l) => l.forward(tape, graph, &cur),
                Layer::Gcn(l) => l.forward(tape, graph, &cur),
                Layer::Gin(l) => l.forward(tape, graph, &cur),
                Layer::Gat(l) => l.forward(tape, graph, &cur),
                Layer::BatchNorm(l) => l.forward_eval(tape, &cur),
                Layer::Pool(l) => l.forward(tape, graph, &cur),
                Layer::Activation(a) => a.apply(tape, &cur),
            }?;
        }
        Ok(cur)
    }

    /// All parameters as `(name, value, trainable)`, named
    /// `"{layer_index}.{local_name}"`, in deterministic order. Includes
    /// non-trainable running statistics.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>, bool)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, value, trainable) in layer.local_params() {
                out.push((format!("{i}.{name}"), value, trainable));
            }
        }
        out
    }

    /// Replaces one parameter; the new value must match the old shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let (idx, local) = name.split_once('.').ok_or_else(|| {
            GnnError::Contract(format!(
                "parameter name {name:?} is not of the form layer.param"
            ))
        })?;
        let idx: usize = idx.parse().map_err(|_| {
            GnnError::Contract(format!("parameter name {name:?} has no layer index"))
        })?;
        let layer = self.layers.get_mut(idx).ok_or_else(|| {
            GnnError::Contract(format!("parameter {name:?} names a missing layer"))
        })?;
        layer
            .set_local_param(local, value)
            .map_err(|e| GnnError::Contract(format!("layer {idx}: {e}")))
    }

    /// Current parameter values keyed by name.
    pub fn param_map(&self) -> BTreeMap<String, Tensor<T>> {
        self.named_params()
            .into_iter()
            .map(|(name, value, _)| (name, value))
            .collect()
    }

    /// Replaces every parameter from `values`; the key sets must match
    /// the chain's parameters exactly.
    pub fn load_param_map(&mut self, values: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let own: Vec<String> = self.named_params().into_iter().map(|(n, _, _)| n).collect();
        for name in &own {
            if !values.contains_key(name) {
                return Err(GnnError::Contract(format!(
                    "stored parameters are missing {name:?}"
                )));
            }
        }
        for name in values.keys() {
            if !own.contains(name) {
                return Err(GnnError::Contract(format!(
                    "stored parameters include {name:?}, which this model does not have"
                )));
            }
        }
        for (name, value) in values {
            self.set_param(name, value.clone())?;
        }
        Ok(())
    }
}

/// Builds a chain from a comma-separated layer list, e.g.
/// `gcn:16-64, batchnorm:64, relu, gcn:64-64:relu, pool:mean, dense:64-1`.
///
/// Layer forms: `dense:IN-OUT[:act]`, `gcn:IN-OUT[:act]`,
/// `graphconv:IN-OUT[:act][:aggr]`, `gin:IN-OUT`,
/// `gat:IN-OUT[:heads][:mean]`, `batchnorm:D`, `pool:{mean|sum|max}`,
/// and bare `relu` / `tanh`.
pub fn parse_model<T: Real, R: Rng + ?Sized>(spec: &str, rng: &mut R) -> Result<GnnChain<T>> {
    let mut layers = Vec::new();
    for raw in spec.split(',') {
        let token = raw.trim();
        if token.is_empty() {
            return Err(GnnError::Parse(format!(
                "empty layer entry in model {spec:?}"
            )));
        }
        layers.push(parse_layer(token, rng)?);
    }
    GnnChain::new(layers)
}

fn parse_layer<T: Real, R: Rng + ?Sized>(token: &str, rng: &mut R) -> Result<Layer<T>> {
    let mut parts = token.split(':');
    let kind = parts.next().unwrap();
    let rest: Vec<&str> = parts.collect();
    let fail = |msg: String| Err(GnnError::Parse(format!("layer {token:?}: {msg}")));

    let parse_dims = |s: &str| -> Result<(usize, usize)> {
        let (a, b) = s.split_once('-').ok_or_else(|| {
            GnnError::Parse(format!("layer {token:?}: expected IN-OUT, got {s:?}"))
        })?;
        let din: usize = a
            .parse()
            .map_err(|_| GnnError::Parse(format!("layer {token:?}: bad width {a:?}")))?;
        let dout: usize = b
            .parse()
            .map_err(|_| GnnError::Parse(format!("layer {token:?}: bad width {b:?}")))?;
        if din == 0 || dout == 0 {
            return Err(GnnError::Parse(format!(
                "layer {token:?}: widths must be positive"
            )));
        }
        Ok((din, dout))
    };

    match kind {
        "relu" => {
            if !rest.is_empty() {
                return fail("takes no options".into());
            }
            Ok(Layer::Activation(Activation::Relu))
        }
        "tanh" => {
            if !rest.is_empty() {
                return fail("takes no options".into());
            }
            Ok(Layer::Activation(Activation::Tanh))
        }
        "pool" => {
            let [mode] = rest.as_slice() else {
                return fail("expected pool:{mean|sum|max}".into());
            };
            Ok(Layer::Pool(GlobalPool::new(mode.parse()?)))
        }
        "batchnorm" => {
            let [d] = rest.as_slice() else {
                return fail("expected batchnorm:D".into());
            };
            let d: usize = d
                .parse()
                .map_err(|_| GnnError::Parse(format!("layer {token:?}: bad width {d:?}")))?;
            if d == 0 {
                return fail("width must be positive".into());
            }
            Ok(Layer::BatchNorm(BatchNorm::new(d)))
        }
        "dense" | "gcn" => {
            let (dims, opts) = match rest.as_slice() {
                [dims] => (dims, None),
                [dims, act] => (dims, Some(*act)),
                _ => return fail("expected IN-OUT with at most one activation".into()),
            };
            let (din, dout) = parse_dims(dims)?;
            let act = opts.map(str::parse).transpose()?.unwrap_or_default();
            Ok(if kind == "dense" {
                Layer::Dense(Dense::new(rng, din, dout, act))
            } else {
                Layer::Gcn(GcnConv::new(rng, din, dout, act, true))
            })
        }
        "graphconv" => {
            let Some((dims, opts)) = rest.split_first() else {
                return fail("expected IN-OUT".into());
            };
            let (din, dout) = parse_dims(dims)?;
            let mut act = Activation::Identity;
            let mut aggr = Aggregation::Sum;
            for opt in opts {
                if let Ok(a) = opt.parse::<Activation>() {
                    act = a;
                } else if let Ok(a) = opt.parse::<Aggregation>() {
                    aggr = a;
                } else {
                    return fail(format!("unknown option {opt:?}"));
                }
            }
            Ok(Layer::GraphConv(GraphConv::new(rng, din, dout, act, aggr)))
        }
        "gin" => {
            let [dims] = rest.as_slice() else {
                return fail("expected gin:IN-OUT".into());
            };
            let (din, dout) = parse_dims(dims)?;
            Ok(Layer::Gin(GinConv::new(rng, din, dout, dout, 0.0, false)))
        }
        "gat" => {
            let Some((dims, opts)) = rest.split_first() else {
                return fail("expected IN-OUT".into());
            };
            let (din, dout) = parse_dims(dims)?;
            let mut heads = 1usize;
            let mut concat = true;
            for opt in opts {
                if *opt == "mean" {
                    concat = false;
                } else if let Ok(h) = opt.parse::<usize>() {
                    heads = h;
                } else {
                    return fail(format!("unknown option {opt:?}"));
                }
            }
            Ok(Layer::Gat(GatConv::new(
                rng, din, dout, heads, concat, 0.2, true,
            )?))
        }
        other => fail(format!("unknown layer kind {other:?}")),
    }
}
