//! Message passing: per-edge messages and their aggregation at target
//! nodes.
//!
//! The reference path materializes a `[d, num_edges]` message matrix
//! (`apply_edges`) and reduces it per target (`aggregate_neighbors`).
//! For the built-in message functions combined with sum or mean,
//! `propagate` instead runs a single sparse product over the graph's
//! CSR view, which never materializes per-edge messages. Both paths
//! visit each target's incoming edges in the same order, so their
//! outputs are bit-identical.
//!
//! Convention: `xi` are target-node features, `xj` source-node
//! features, `e` per-edge values; messages flow source to target.

use crate::error::{GnnError, Result};
use crate::graph::GnnGraph;
use crate::tensor::{Real, Tape, Tensor};

/// How messages arriving at a target node are reduced.
///
/// `Mean` divides by the number of incoming edges, never by weight
/// sums, with isolated nodes dividing by 1. Isolated nodes get 0 under
/// every aggregation (`Max` uses 0 as its neutral, not negative
/// infinity, so downstream dense layers stay finite).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = GnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(GnnError::Parse(format!(
                "unknown aggregation {other:?}, expected sum, mean or max"
            ))),
        }
    }
}

/// Gathered per-edge views handed to a custom message function. Each
/// present field has one column per edge.
pub struct EdgeArgs<T: Real> {
    /// Target-node features per edge, `[d, num_edges]`.
    pub xi: Option<Tensor<T>>,
    /// Source-node features per edge, `[d, num_edges]`.
    pub xj: Option<Tensor<T>>,
    /// Edge features as passed in, `[de, num_edges]`.
    pub e: Option<Tensor<T>>,
}

type CustomFn<T> = dyn Fn(&mut Tape<T>, &EdgeArgs<T>) -> Result<Tensor<T>>;

/// What each edge carries to its target.
pub enum MessageFunction<T: Real> {
    /// The source node's features, unchanged.
    CopyXj,
    /// Source features scaled per edge by a `[1, num_edges]` tensor
    /// passed explicitly to the call.
    EMulXj,
    /// Source features scaled by the graph's stored edge weights.
    WMulXj,
    /// Arbitrary differentiable function of the gathered views; the
    /// flags declare which views it reads.
    Custom {
        needs_xi: bool,
        needs_xj: bool,
        needs_e: bool,
        f: Box<CustomFn<T>>,
    },
}

impl<T: Real> MessageFunction<T> {
    fn needs(&self) -> (bool, bool, bool) {
        match self {
            MessageFunction::CopyXj | MessageFunction::WMulXj => (false, true, false),
            MessageFunction::EMulXj => (false, true, true),
            MessageFunction::Custom {
                needs_xi,
                needs_xj,
                needs_e,
                ..
            } => (*needs_xi, *needs_xj, *needs_e),
        }
    }

    fn fusable(&self) -> bool {
        !matches!(self, MessageFunction::Custom { .. })
    }
}

/// Which implementation `propagate` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PathChoice {
    /// Fused when the message/aggregation pair allows it.
    #[default]
    Auto,
    /// Fused, erroring on pairs that cannot fuse.
    Fused,
    /// Always materialize the message matrix.
    TwoStep,
}

fn check_node_features<T: Real>(graph: &GnnGraph<T>, x: &Tensor<T>) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != graph.num_nodes() {
        return Err(GnnError::Dimension(format!(
            "node features must be [d, {}], got {:?}",
            graph.num_nodes(),
            x.shape()
        )));
    }
    Ok(())
}

fn check_edge_features<T: Real>(graph: &GnnGraph<T>, e: &Tensor<T>) -> Result<()> {
    if e.rank() != 2 || e.shape()[1] != graph.num_edges() {
        return Err(GnnError::Dimension(format!(
            "edge features must be [d, {}], got {:?}",
            graph.num_edges(),
            e.shape()
        )));
    }
    Ok(())
}

fn require<'a, T: Real>(arg: Option<&'a Tensor<T>>, what: &str) -> Result<&'a Tensor<T>> {
    arg.ok_or_else(|| {
        GnnError::Contract(format!(
            "the message function reads {what} but none was passed"
        ))
    })
}

/// The `[1, num_edges]` scale used by `EMulXj`.
fn e_mul_scale<'a, T: Real>(
    graph: &GnnGraph<T>,
    e: Option<&'a Tensor<T>>,
) -> Result<&'a Tensor<T>> {
    let e = require(e, "edge features (e)")?;
    check_edge_features(graph, e)?;
    if e.shape()[0] != 1 {
        return Err(GnnError::Dimension(format!(
            "per-edge scales must be [1, {}], got {:?}",
            graph.num_edges(),
            e.shape()
        )));
    }
    Ok(e)
}

fn graph_weights<T: Real>(graph: &GnnGraph<T>) -> Result<&Tensor<T>> {
    graph.edge_weight().ok_or_else(|| {
        GnnError::Contract("the message function reads edge weights but the graph has none".into())
    })
}

/// Evaluates the message function on every edge, producing one column
/// per edge in edge-list order. `xi_src`/`xj_src` are node features to
/// gather at targets/sources; only the views the function declares are
/// gathered.
pub fn apply_edges<T: Real>(
    tape: &mut Tape<T>,
    graph: &GnnGraph<T>,
    msg: &MessageFunction<T>,
    xi_src: Option<&Tensor<T>>,
    xj_src: Option<&Tensor<T>>,
    e: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    for x in [xi_src, xj_src].into_iter().flatten() {
        check_node_features(graph, x)?;
    }
    if let Some(e) = e {
        check_edge_features(graph, e)?;
    }
    let (needs_xi, needs_xj, needs_e) = msg.needs();
    let xi = if needs_xi {
        let src = require(xi_src, "target features (xi)")?;
        Some(tape.gather_columns_arc(src, graph.targets_arc())?)
    } else {
        None
    };
    let xj = if needs_xj {
        let src = require(xj_src, "source features (xj)")?;
        Some(tape.gather_columns_arc(src, graph.sources_arc())?)
    } else {
        None
    };
    match msg {
        MessageFunction::CopyXj => Ok(xj.unwrap()),
        MessageFunction::EMulXj => {
            let scale = e_mul_scale(graph, e)?;
            tape.scale_cols(&xj.unwrap(), scale)
        }
        MessageFunction::WMulXj => {
            let w = graph_weights(graph)?.clone();
            tape.scale_cols(&xj.unwrap(), &w)
        }
        MessageFunction::Custom { f, .. } => {
            if needs_e && e.is_none() {
                return Err(GnnError::Contract(
                    "the message function reads edge features (e) but none was passed".into(),
                ));
            }
            let args = EdgeArgs {
                xi,
                xj,
                e: e.cloned(),
            };
            let out = f(tape, &args)?;
            if out.rank() != 2 || out.shape()[1] != graph.num_edges() {
                return Err(GnnError::Dimension(format!(
                    "custom message must be [d, {}], got {:?}",
                    graph.num_edges(),
                    out.shape()
                )));
            }
            Ok(out)
        }
    }
}

/// Per-node reciprocal of the incoming-edge count, clamped below at 1.
fn inverse_in_counts<T: Real>(graph: &GnnGraph<T>) -> Tensor<T> {
    let mut counts = vec![0usize; graph.num_nodes()];
    for &t in graph.targets() {
        counts[t] += 1;
    }
    let inv: Vec<T> = counts
        .iter()
        .map(|&c| T::one() / T::from_f64(c.max(1) as f64))
        .collect();
    Tensor::from_vec(vec![graph.num_nodes()], inv).expect("count vector matches node count")
}

/// Reduces a `[d, num_edges]` message matrix to `[d, num_nodes]` at the
/// edge targets.
pub fn aggregate_neighbors<T: Real>(
    tape: &mut Tape<T>,
    graph: &GnnGraph<T>,
    op: Aggregation,
    messages: &Tensor<T>,
) -> Result<Tensor<T>> {
    if messages.rank() != 2 || messages.shape()[1] != graph.num_edges() {
        return Err(GnnError::Dimension(format!(
            "messages must be [d, {}], got {:?}",
            graph.num_edges(),
            messages.shape()
        )));
    }
    let n = graph.num_nodes();
    match op {
        Aggregation::Sum => tape.scatter_add_arc(messages, graph.targets_arc(), n),
        Aggregation::Mean => {
            let summed = tape.scatter_add_arc(messages, graph.targets_arc(), n)?;
            let inv = inverse_in_counts(graph);
            tape.scale_cols(&summed, &inv)
        }
        Aggregation::Max => tape.segment_max(messages, graph.targets_arc(), n),
    }
}

/// Message passing in one call: messages along every edge, reduced at
/// targets. Semantically `aggregate_neighbors(op, apply_edges(...))`;
/// `path` picks the implementation, with `Auto` fusing every built-in
/// message under sum or mean into a sparse product.
#[allow(clippy::too_many_arguments)]
pub fn propagate<T: Real>(
    tape: &mut Tape<T>,
    graph: &GnnGraph<T>,
    msg: &MessageFunction<T>,
    op: Aggregation,
    xi_src: Option<&Tensor<T>>,
    xj_src: Option<&Tensor<T>>,
    e: Option<&Tensor<T>>,
    path: PathChoice,
) -> Result<Tensor<T>> {
    let fusable = msg.fusable() && !matches!(op, Aggregation::Max);
    let fused = match path {
        PathChoice::Auto => fusable,
        PathChoice::Fused => {
            if !fusable {
                return Err(GnnError::Contract(
                    "this message/aggregation pair has no fused form".into(),
                ));
            }
            true
        }
        PathChoice::TwoStep => false,
    };
    if !fused {
        let messages = apply_edges(tape, graph, msg, xi_src, xj_src, e)?;
        return aggregate_neighbors(tape, graph, op, &messages);
    }

    let x = require(xj_src, "source features (xj)")?;
    check_node_features(graph, x)?;
    let csr = graph.to_csr();
    let summed = match msg {
        MessageFunction::CopyXj => tape.spmm(&csr, x, None)?,
        MessageFunction::EMulXj => {
            let scale = e_mul_scale(graph, e)?.clone();
            tape.spmm(&csr, x, Some(&scale))?
        }
        MessageFunction::WMulXj => {
            let w = graph_weights(graph)?.clone();
            tape.spmm(&csr, x, Some(&w))?
        }
        MessageFunction::Custom { .. } => unreachable!("custom messages never fuse"),
    };
    match op {
        Aggregation::Sum => Ok(summed),
        Aggregation::Mean => {
            let inv = inverse_in_counts(graph);
            tape.scale_cols(&summed, &inv)
        }
        Aggregation::Max => unreachable!("max never fuses"),
    }
}

/// Sparse product over the graph's incoming-edge CSR:
/// `out[:, t] = sum over edges e into t of edge_scale[e] * x[:, source(e)]`
/// with the scale defaulting to 1.
pub fn spmm_csr<T: Real>(
    tape: &mut Tape<T>,
    graph: &GnnGraph<T>,
    x: &Tensor<T>,
    edge_scale: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_node_features(graph, x)?;
    tape.spmm(&graph.to_csr(), x, edge_scale)
}

/// Softmax of per-edge logits `[h, num_edges]` within each target
/// node's incoming edges, row by row.
pub fn edge_softmax<T: Real>(
    tape: &mut Tape<T>,
    graph: &GnnGraph<T>,
    logits: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_edge_features(graph, logits)?;
    tape.edge_softmax(graph.targets_arc(), graph.num_nodes(), logits)
}
