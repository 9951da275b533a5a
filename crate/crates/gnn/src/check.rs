//! Finite-difference verification of analytic gradients.
//!
//! For each layer kind the harness builds randomized small instances
//! in double precision, projects the layer output to a scalar with a
//! fixed random matrix, and compares every parameter gradient (and the
//! input gradient) against central finite differences. Instances whose
//! forward pass lands too close to a relu-family kink are resampled,
//! since differencing across a kink is meaningless.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{GnnError, Result};
use crate::graph::GnnGraph;
use crate::mp::Aggregation;
use crate::nn::{Activation, BatchNorm, Dense, GatConv, GcnConv, GinConv, GlobalPool, GnnChain, GraphConv, Layer};
use crate::tensor::{finite_diff_gradient, ReduceKind, Tape, Tensor};

/// Layer kinds covered by [`gradcheck`], in report order.
pub const LAYER_KINDS: [&str; 8] = [
    "dense",
    "graphconv",
    "gcnconv",
    "ginconv",
    "gatconv",
    "batchnorm",
    "pool",
    "chain",
];

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Randomized instances per layer kind.
    pub instances: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Deliberately corrupts one analytic gradient entry per check so
    /// the comparison must fail; proves the harness can detect a wrong
    /// backward rule.
    pub sabotage: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            eps: 1e-5,
            tolerance: 1e-5,
            sabotage: false,
        }
    }
}

/// One line of the report.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub layer: String,
    pub max_rel_err: f64,
    /// Parameter (or `"x"` for the input) with the worst error.
    pub worst_param: String,
    pub instances: usize,
}

impl GradCheckRow {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Runs the suite over all layer kinds, or one kind when `filter` is
/// given.
pub fn gradcheck(cfg: &GradCheckConfig, filter: Option<&str>) -> Result<Vec<GradCheckRow>> {
    let kinds: Vec<&str> = match filter {
        Some(f) => {
            if !LAYER_KINDS.contains(&f) {
                return Err(GnnError::Validation(format!(
                    "unknown layer {f:?}; expected one of {LAYER_KINDS:?}"
                )));
            }
            vec![f]
        }
        None => LAYER_KINDS.to_vec(),
    };
    kinds.into_iter().map(|k| check_kind(k, cfg)).collect()
}

fn mix(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

struct Instance {
    chain: GnnChain<f64>,
    graph: GnnGraph<f64>,
    x: Tensor<f64>,
    /// Fixed random projection matching the output shape.
    projection: Tensor<f64>,
    eval_mode: bool,
}

fn forward(
    chain: &GnnChain<f64>,
    tape: &mut Tape<f64>,
    graph: &GnnGraph<f64>,
    x: &Tensor<f64>,
    eval_mode: bool,
) -> Result<Tensor<f64>> {
    if eval_mode {
        chain.forward_eval(tape, graph, x)
    } else {
        let mut c = chain.clone();
        c.forward_train(tape, graph, x)
    }
}

fn project(tape: &mut Tape<f64>, out: &Tensor<f64>, r: &Tensor<f64>) -> Result<Tensor<f64>> {
    let weighted = tape.mul(out, r)?;
    tape.reduce(&weighted, ReduceKind::Sum, None)
}

fn scalar_loss(inst: &Instance, chain: &GnnChain<f64>, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = forward(chain, &mut tape, &inst.graph, x, inst.eval_mode)?;
    let proj = project(&mut tape, &out, &inst.projection)?;
    Ok(proj.item())
}

fn random_activation(rng: &mut StdRng) -> Activation {
    match rng.random_range(0..3) {
        0 => Activation::Identity,
        1 => Activation::Relu,
        _ => Activation::Tanh,
    }
}

fn random_graph(rng: &mut StdRng, min_n: usize, max_n: usize) -> Result<GnnGraph<f64>> {
    let n = rng.random_range(min_n..=max_n);
    let cap = (n * n.saturating_sub(1)).min(3 * n);
    let m = rng.random_range(0..=cap);
    GnnGraph::random(rng, n, m)
}

fn build_kind(kind: &str, inst: usize, rng: &mut StdRng) -> Result<(GnnChain<f64>, GnnGraph<f64>, usize, bool)> {
    let din = rng.random_range(2..=4);
    let dout = rng.random_range(1..=4);
    match kind {
        "dense" => {
            let g = random_graph(rng, 2, 10)?;
            let act = random_activation(rng);
            let layer = Dense::new(rng, din, dout, act);
            Ok((GnnChain::new(vec![Layer::Dense(layer)])?, g, din, false))
        }
        "graphconv" => {
            let g = random_graph(rng, 2, 10)?;
            let aggr = if inst.is_multiple_of(2) {
                Aggregation::Sum
            } else {
                Aggregation::Mean
            };
            let act = random_activation(rng);
            let layer = GraphConv::new(rng, din, dout, act, aggr);
            Ok((GnnChain::new(vec![Layer::GraphConv(layer)])?, g, din, false))
        }
        "gcnconv" => {
            let mut g = random_graph(rng, 2, 10)?;
            if inst % 2 == 1 {
                let w: Vec<f64> = (0..g.num_edges()).map(|_| rng.random_range(0.5..1.5)).collect();
                g = g.with_edge_weight(Tensor::from_vec(vec![w.len()], w)?)?;
            }
            let act = random_activation(rng);
            let layer = GcnConv::new(rng, din, dout, act, inst.is_multiple_of(2));
            Ok((GnnChain::new(vec![Layer::Gcn(layer)])?, g, din, false))
        }
        "ginconv" => {
            let g = random_graph(rng, 2, 10)?;
            let layer = GinConv::new(rng, din, 3, dout, 0.3, inst % 2 == 1);
            Ok((GnnChain::new(vec![Layer::Gin(layer)])?, g, din, false))
        }
        "gatconv" => {
            let g = random_graph(rng, 2, 10)?;
            let heads = 1 + inst % 2;
            let concat = inst % 4 < 2;
            let dout = if concat {
                heads * rng.random_range(1..=2)
            } else {
                rng.random_range(1..=3)
            };
            let layer = GatConv::new(rng, din, dout, heads, concat, 0.2, !inst.is_multiple_of(3))?;
            Ok((GnnChain::new(vec![Layer::Gat(layer)])?, g, din, false))
        }
        "batchnorm" => {
            let g = random_graph(rng, 2, 10)?;
            let d = rng.random_range(2..=6);
            let mut chain = GnnChain::new(vec![Layer::BatchNorm(BatchNorm::new(d))])?;
            chain.set_param("0.gamma", Tensor::randn(vec![d], rng))?;
            chain.set_param("0.beta", Tensor::randn(vec![d], rng))?;
            chain.set_param("0.running_mean", Tensor::randn(vec![d], rng))?;
            let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
            chain.set_param("0.running_var", Tensor::from_vec(vec![d], var)?)?;
            Ok((chain, g, d, true))
        }
        "pool" => {
            let parts: Vec<GnnGraph<f64>> = (0..rng.random_range(2..=3))
                .map(|_| random_graph(rng, 1, 5))
                .collect::<Result<_>>()?;
            let g = GnnGraph::batch(&parts)?;
            let mode = if inst.is_multiple_of(2) {
                Aggregation::Sum
            } else {
                Aggregation::Mean
            };
            let chain = GnnChain::new(vec![Layer::Pool(GlobalPool::new(mode))])?;
            Ok((chain, g, din, false))
        }
        "chain" => {
            let g = random_graph(rng, 2, 8)?;
            let chain = crate::nn::parse_model(
                "gat:3-6:2, relu, batchnorm:6, graphconv:6-4:tanh, pool:mean, dense:4-1",
                rng,
            )?;
            Ok((chain, g, 3, false))
        }
        other => Err(GnnError::Validation(format!("unknown layer {other:?}"))),
    }
}

/// Builds one instance, resampling until the forward pass keeps a safe
/// margin from every relu-family kink.
fn build_instance(kind: &str, cfg: &GradCheckConfig, inst: usize) -> Result<Instance> {
    let kind_idx = LAYER_KINDS.iter().position(|k| *k == kind).unwrap_or(0) as u64;
    let mut fallback: Option<Instance> = None;
    for attempt in 0..50u64 {
        let mut rng = StdRng::seed_from_u64(mix(&[cfg.seed, kind_idx, inst as u64, attempt]));
        let (chain, graph, din, eval_mode) = build_kind(kind, inst, &mut rng)?;
        let x = Tensor::randn(vec![din, graph.num_nodes()], &mut rng).requires_grad(true);
        let mut tape = Tape::new();
        let out = forward(&chain, &mut tape, &graph, &x, eval_mode)?;
        let projection = Tensor::randn(out.shape().to_vec(), &mut rng);
        let candidate = Instance {
            chain,
            graph,
            x,
            projection,
            eval_mode,
        };
        if tape.min_kink_gap() > 1e-3 {
            return Ok(candidate);
        }
        fallback = Some(candidate);
    }
    Ok(fallback.expect("at least one attempt ran"))
}

/// Largest relative error between two gradient tensors, under
/// `|a - f| / max(1, |a|, |f|)`.
fn max_rel_err(analytic: &Tensor<f64>, fd: &Tensor<f64>, sabotage: bool) -> f64 {
    let mut worst = 0.0f64;
    for (i, (&a, &f)) in analytic.data().iter().zip(fd.data()).enumerate() {
        let a = if sabotage && i == 0 { a + 1.0 + a.abs() } else { a };
        let rel = (a - f).abs() / 1.0f64.max(a.abs()).max(f.abs());
        worst = worst.max(rel);
    }
    worst
}

fn check_instance(inst: &Instance, cfg: &GradCheckConfig) -> Result<(f64, String)> {
    let mut tape = Tape::new();
    let out = forward(&inst.chain, &mut tape, &inst.graph, &inst.x, inst.eval_mode)?;
    let proj = project(&mut tape, &out, &inst.projection)?;
    let seed = proj
        .node_id()
        .ok_or_else(|| GnnError::Contract("projection left no trace on the tape".into()))?;
    let grads = tape.backward(seed)?;

    let mut worst = (0.0f64, String::from("x"));
    for (name, value, trainable) in inst.chain.named_params() {
        if !trainable {
            continue;
        }
        let analytic = grads.grad_or_zeros(&value);
        let fd = finite_diff_gradient(&value, cfg.eps, |p| {
            let mut c = inst.chain.clone();
            c.set_param(&name, p.clone())?;
            scalar_loss(inst, &c, &inst.x)
        })?;
        let rel = max_rel_err(&analytic, &fd, cfg.sabotage);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }

    let analytic_x = grads.grad_or_zeros(&inst.x);
    let fd_x = finite_diff_gradient(&inst.x, cfg.eps, |xp| scalar_loss(inst, &inst.chain, xp))?;
    let rel = max_rel_err(&analytic_x, &fd_x, cfg.sabotage);
    if rel > worst.0 {
        worst = (rel, "x".to_string());
    }
    Ok(worst)
}

fn check_kind(kind: &str, cfg: &GradCheckConfig) -> Result<GradCheckRow> {
    let mut worst = (0.0f64, String::from("x"));
    for inst in 0..cfg.instances {
        let instance = build_instance(kind, cfg, inst)?;
        let (rel, name) = check_instance(&instance, cfg)?;
        if rel >= worst.0 {
            worst = (rel, name);
        }
    }
    Ok(GradCheckRow {
        layer: kind.to_string(),
        max_rel_err: worst.0,
        worst_param: worst.1,
        instances: cfg.instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> GradCheckConfig {
        GradCheckConfig {
            instances: 3,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn every_kind_passes_a_quick_run() {
        let rows = gradcheck(&quick_cfg(), None).unwrap();
        assert_eq!(rows.len(), LAYER_KINDS.len());
        for row in &rows {
            assert!(
                row.passed(1e-5),
                "{}: {} at {}",
                row.layer,
                row.max_rel_err,
                row.worst_param
            );
        }
    }

    #[test]
    fn filter_restricts_to_one_kind() {
        let rows = gradcheck(&quick_cfg(), Some("dense")).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].layer, "dense");
    }

    #[test]
    fn unknown_filter_is_rejected() {
        assert!(matches!(
            gradcheck(&quick_cfg(), Some("transformer")),
            Err(GnnError::Validation(_))
        ));
    }

    #[test]
    fn sabotage_is_always_detected() {
        let cfg = GradCheckConfig {
            sabotage: true,
            instances: 2,
            ..GradCheckConfig::default()
        };
        for row in gradcheck(&cfg, None).unwrap() {
            assert!(!row.passed(1e-5), "{} escaped sabotage", row.layer);
        }
    }
}
