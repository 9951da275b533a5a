//! Release gate: eight checks, each printing one PASS or FAIL line
//! (run with `--nocapture` to see them on success). Every check works
//! against an independent oracle: dense-matrix arithmetic, central
//! finite differences, brute-force enumeration, or a second process
//! of the binary itself.

use std::collections::HashSet;
use std::process::Command;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use gnn::check::{gradcheck, GradCheckConfig};
use gnn::io::{load_checkpoint, read_dataset, save_checkpoint, write_dataset};
use gnn::mp::{propagate, Aggregation, MessageFunction, PathChoice};
use gnn::nn::{parse_model, GnnChain};
use gnn::{GnnError, GnnGraph, Real, Tape, Tensor};

fn report(id: usize, name: &str, result: Result<(), String>) {
    match &result {
        Ok(()) => println!("criterion {id} ({name}): PASS"),
        Err(why) => println!("criterion {id} ({name}): FAIL: {why}"),
    }
    if let Err(why) = result {
        panic!("criterion {id} ({name}): {why}");
    }
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// False for NaN, so a poisoned value can never pass a tolerance gate.
fn within(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() < tol
}

// ── 1: finite-difference gradient suite ─────────────────────────────

/// Every layer kind, ≥20 random double-precision instances each,
/// every parameter and the input within 1e-5 relative of central
/// differences, in under 30 seconds.
#[test]
fn criterion_1_gradient_suite() {
    report(1, "gradient suite", {
        let started = Instant::now();
        let run = gradcheck(&GradCheckConfig::default(), None).map_err(|e| e.to_string());
        run.and_then(|rows| {
            if rows.len() != 8 {
                return Err(format!("expected 8 layer kinds, got {}", rows.len()));
            }
            for row in &rows {
                if row.instances < 20 {
                    return Err(format!("{}: only {} instances", row.layer, row.instances));
                }
                if !row.passed(1e-5) {
                    return Err(format!(
                        "{}: {} has relative error {:e}",
                        row.layer, row.worst_param, row.max_rel_err
                    ));
                }
            }
            let secs = started.elapsed().as_secs_f64();
            if secs >= 30.0 {
                return Err(format!("took {secs:.1}s, budget is 30s"));
            }
            Ok(())
        })
    });
}

// ── 2: fused path against the materialized two-step path ───────────

fn fusion_oracle<T: Real>(tol: f64) -> Result<(), String> {
    let mut r = rng(20);
    for case in 0..50 {
        let n = r.random_range(2..=50);
        let m = r.random_range(0..=(n * (n - 1)).min(200));
        let graph = GnnGraph::<T>::random(&mut r, n, m)
            .and_then(|g| g.with_edge_weight(Tensor::randn(vec![m], &mut r)))
            .map_err(|e| e.to_string())?;
        let x = Tensor::<T>::randn(vec![4, n], &mut r);
        let e = Tensor::<T>::randn(vec![1, m], &mut r);
        for (label, msg) in [
            ("copy_xj", MessageFunction::CopyXj),
            ("e_mul_xj", MessageFunction::EMulXj),
            ("w_mul_xj", MessageFunction::WMulXj),
        ] {
            for op in [Aggregation::Sum, Aggregation::Mean] {
                let run = |path: PathChoice| {
                    let mut tape = Tape::new();
                    propagate(&mut tape, &graph, &msg, op, None, Some(&x), Some(&e), path)
                        .map_err(|e| e.to_string())
                };
                let diff = run(PathChoice::Fused)?.max_abs_diff(&run(PathChoice::TwoStep)?);
                if !within(diff, 0.0, tol) {
                    return Err(format!(
                        "case {case} ({label}, {op:?}, n={n}, m={m}): max abs diff {diff:e}"
                    ));
                }
            }
        }
    }
    Ok(())
}

#[test]
fn criterion_2_fusion_oracle() {
    report(
        2,
        "fusion oracle",
        fusion_oracle::<f32>(1e-6).and_then(|()| fusion_oracle::<f64>(1e-12)),
    );
}

// ── 3: dense-adjacency oracle ───────────────────────────────────────

/// Neighbor sum by dense arithmetic: out[r][t] = Σ over edges s→t of
/// x[r][s].
fn dense_neighbor_sum(graph: &GnnGraph<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let n = graph.num_nodes();
    let d = x.shape()[0];
    let mut out = vec![0.0; d * n];
    for (&s, &t) in graph.sources().iter().zip(graph.targets()) {
        for r in 0..d {
            out[r * n + t] += x.data()[r * n + s];
        }
    }
    out
}

/// The normalized convolution by dense arithmetic: self-loops, in-degree
/// normalization 1/sqrt(deg[t]·deg[s]) per edge, then the affine map.
fn dense_gcn(chain: &GnnChain<f64>, graph: &GnnGraph<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let n = graph.num_nodes();
    let din = x.shape()[0];
    let params = chain.param_map();
    let weight = &params["0.weight"];
    let bias = &params["0.bias"];
    let dout = weight.shape()[0];

    let mut sources: Vec<usize> = graph.sources().to_vec();
    let mut targets: Vec<usize> = graph.targets().to_vec();
    sources.extend(0..n);
    targets.extend(0..n);
    let mut deg = vec![0.0f64; n];
    for &t in &targets {
        deg[t] += 1.0;
    }
    let mut h = vec![0.0f64; din * n];
    for (&s, &t) in sources.iter().zip(&targets) {
        let scale = 1.0 / (deg[t] * deg[s]).sqrt();
        for r in 0..din {
            h[r * n + t] += scale * x.data()[r * n + s];
        }
    }
    let mut y = vec![0.0f64; dout * n];
    for t in 0..n {
        for o in 0..dout {
            let mut acc = bias.data()[o];
            for r in 0..din {
                acc += weight.at(o, r) * h[r * n + t];
            }
            y[o * n + t] = acc;
        }
    }
    y
}

fn check_against_dense(
    label: &str,
    graph: &GnnGraph<f64>,
    gcn: &GnnChain<f64>,
    r: &mut StdRng,
) -> Result<(), String> {
    let n = graph.num_nodes();
    let x = Tensor::<f64>::randn(vec![3, n], r);

    let mut tape = Tape::new();
    let got = propagate(
        &mut tape,
        graph,
        &MessageFunction::CopyXj,
        Aggregation::Sum,
        None,
        Some(&x),
        None,
        PathChoice::Auto,
    )
    .map_err(|e| e.to_string())?;
    let want = dense_neighbor_sum(graph, &x);
    for (i, (&g, &w)) in got.data().iter().zip(&want).enumerate() {
        if !within(g, w, 1e-12) {
            return Err(format!("{label}: neighbor sum entry {i}: {g} vs {w}"));
        }
    }

    let mut tape = Tape::new();
    let got = gcn
        .forward_eval(&mut tape, graph, &x)
        .map_err(|e| e.to_string())?;
    let want = dense_gcn(gcn, graph, &x);
    for (i, (&g, &w)) in got.data().iter().zip(&want).enumerate() {
        if !within(g, w, 1e-12) {
            return Err(format!("{label}: normalized conv entry {i}: {g} vs {w}"));
        }
    }
    Ok(())
}

#[test]
fn criterion_3_dense_adjacency_oracle() {
    report(3, "dense-adjacency oracle", {
        (|| {
            let mut r = rng(30);
            let gcn = parse_model::<f64, _>("gcn:3-2:id", &mut r).map_err(|e| e.to_string())?;

            // every directed topology on up to 4 nodes
            for n in 1usize..=4 {
                let slots: Vec<(usize, usize)> = (0..n)
                    .flat_map(|s| (0..n).filter(move |&t| t != s).map(move |t| (s, t)))
                    .collect();
                for mask in 0u32..(1 << slots.len()) {
                    let (sources, targets): (Vec<usize>, Vec<usize>) = slots
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, &e)| e)
                        .unzip();
                    let graph = GnnGraph::<f64>::from_coo(n, sources, targets)
                        .map_err(|e| e.to_string())?;
                    check_against_dense(&format!("n={n} mask={mask}"), &graph, &gcn, &mut r)?;
                }
            }

            // plus random larger graphs
            for case in 0..100 {
                let n = r.random_range(2..=8);
                let m = r.random_range(0..=n * (n - 1));
                let graph = GnnGraph::<f64>::random(&mut r, n, m).map_err(|e| e.to_string())?;
                check_against_dense(&format!("random case {case}"), &graph, &gcn, &mut r)?;
            }
            Ok(())
        })()
    });
}

// ── 4: batching invariance ──────────────────────────────────────────

#[test]
fn criterion_4_batching_invariance() {
    report(4, "batching invariance", {
        (|| {
            let mut r = rng(40);
            let chain = parse_model::<f32, _>("gcn:3-6:relu, graphconv:6-4:tanh, pool:mean", &mut r)
                .map_err(|e| e.to_string())?;
            let parts: Vec<GnnGraph<f32>> = (0..8)
                .map(|_| {
                    let n = r.random_range(1..=9);
                    let m = r.random_range(0..=n * (n - 1));
                    let g = GnnGraph::random(&mut r, n, m)?;
                    g.with_ndata("x", Tensor::randn(vec![3, n], &mut r))
                })
                .collect::<gnn::Result<_>>()
                .map_err(|e| e.to_string())?;
            let batch = GnnGraph::batch(&parts).map_err(|e| e.to_string())?;

            let mut tape = Tape::new();
            let pooled = chain
                .forward_eval(&mut tape, &batch, batch.ndata("x").unwrap())
                .map_err(|e| e.to_string())?;
            if pooled.shape() != [4, 8] {
                return Err(format!("pooled batch has shape {:?}", pooled.shape()));
            }
            for (g, part) in parts.iter().enumerate() {
                let mut tape = Tape::new();
                let single = chain
                    .forward_eval(&mut tape, part, part.ndata("x").unwrap())
                    .map_err(|e| e.to_string())?;
                for row in 0..4 {
                    let a = pooled.at(row, g);
                    let b = single.at(row, 0);
                    if !within(f64::from(a), f64::from(b), 1e-6) {
                        return Err(format!("graph {g} row {row}: batched {a} vs single {b}"));
                    }
                }
            }

            // splitting the batch recovers every part bit for bit
            let recovered = batch.unbatch().map_err(|e| e.to_string())?;
            if recovered.len() != parts.len() {
                return Err("unbatch changed the graph count".into());
            }
            for (i, (got, want)) in recovered.iter().zip(&parts).enumerate() {
                let same = got.num_nodes() == want.num_nodes()
                    && got.sources() == want.sources()
                    && got.targets() == want.targets()
                    && got.ndata("x").unwrap().data() == want.ndata("x").unwrap().data();
                if !same {
                    return Err(format!("graph {i} did not survive batch+unbatch"));
                }
            }
            Ok(())
        })()
    });
}

// ── 5: permutation equivariance ─────────────────────────────────────

fn permute_graph(graph: &GnnGraph<f64>, perm: &[usize]) -> Result<GnnGraph<f64>, String> {
    let relabeled = GnnGraph::from_coo(
        graph.num_nodes(),
        graph.sources().iter().map(|&s| perm[s]).collect(),
        graph.targets().iter().map(|&t| perm[t]).collect(),
    )
    .map_err(|e| e.to_string())?;
    match graph.edge_weight() {
        Some(w) => relabeled.with_edge_weight(w.clone()).map_err(|e| e.to_string()),
        None => Ok(relabeled),
    }
}

fn permute_cols(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[0];
    let n = x.shape()[1];
    let mut out = vec![0.0; d * n];
    for (i, &p) in perm.iter().enumerate() {
        for r in 0..d {
            out[r * n + p] = x.data()[r * n + i];
        }
    }
    Tensor::from_vec(vec![d, n], out).unwrap()
}

#[test]
fn criterion_5_permutation_equivariance() {
    report(5, "permutation equivariance", {
        (|| {
            let kinds = [
                "graphconv:3-4:tanh",
                "graphconv:3-4:id:mean",
                "graphconv:3-4:id:max",
                "gcn:3-4:relu",
                "gin:3-4",
                "gat:3-4:2",
                "gat:3-4:2:mean",
                "pool:sum",
                "pool:mean",
                "pool:max",
            ];
            for seed in 0..20u64 {
                let mut r = rng(500 + seed);
                let n = r.random_range(2..=10);
                let m = r.random_range(0..=(n * (n - 1)).min(3 * n));
                let weights: Vec<f64> = (0..m).map(|_| r.random_range(0.5..1.5)).collect();
                let graph = GnnGraph::<f64>::random(&mut r, n, m)
                    .and_then(|g| g.with_edge_weight(Tensor::from_vec(vec![m], weights)?))
                    .map_err(|e| e.to_string())?;
                let x = Tensor::<f64>::randn(vec![3, n], &mut r);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut r);
                let relabeled = permute_graph(&graph, &perm)?;
                let xp = permute_cols(&x, &perm);

                for kind in kinds {
                    let chain =
                        parse_model::<f64, _>(kind, &mut r).map_err(|e| e.to_string())?;
                    let mut tape = Tape::new();
                    let out = chain
                        .forward_eval(&mut tape, &graph, &x)
                        .map_err(|e| e.to_string())?;
                    let out_p = chain
                        .forward_eval(&mut tape, &relabeled, &xp)
                        .map_err(|e| e.to_string())?;
                    let d = out.shape()[0];
                    if kind.starts_with("pool") {
                        // pooling over one graph ignores node order
                        for row in 0..d {
                            let (a, b) = (out.at(row, 0), out_p.at(row, 0));
                            if !within(a, b, 1e-12) {
                                return Err(format!(
                                    "{kind} seed {seed} row {row}: {a} vs {b}"
                                ));
                            }
                        }
                    } else {
                        for (i, &p) in perm.iter().enumerate() {
                            for row in 0..d {
                                let (a, b) = (out.at(row, i), out_p.at(row, p));
                                if !within(a, b, 1e-12) {
                                    return Err(format!(
                                        "{kind} seed {seed} node {i} row {row}: {a} vs {b}"
                                    ));
                                }
                            }
                        }
                    }
                }
            }
            Ok(())
        })()
    });
}

// ── 6: end-to-end training through the binary ───────────────────────

fn epoch_and_loss(csv: &str) -> Vec<(usize, String)> {
    csv.lines()
        .skip(1)
        .map(|line| {
            let mut parts = line.split(',');
            (
                parts.next().unwrap().parse().unwrap(),
                parts.next().unwrap().to_string(),
            )
        })
        .collect()
}

#[test]
fn criterion_6_end_to_end_training() {
    report(6, "end-to-end training", {
        (|| {
            let started = Instant::now();
            let first = Command::new(env!("CARGO_BIN_EXE_gnn"))
                .arg("train")
                .output()
                .map_err(|e| e.to_string())?;
            let secs = started.elapsed().as_secs_f64();
            if first.status.code() != Some(0) {
                return Err(format!(
                    "training exited {:?}: {}",
                    first.status.code(),
                    String::from_utf8_lossy(&first.stderr)
                ));
            }
            let csv = String::from_utf8_lossy(&first.stdout).to_string();
            let metrics = epoch_and_loss(&csv);
            if metrics.len() != 100 {
                return Err(format!("expected 100 epochs, got {}", metrics.len()));
            }
            let first_loss: f64 = metrics[0].1.parse().unwrap();
            let last_loss: f64 = metrics[99].1.parse().unwrap();
            let halved = last_loss < 0.5 * first_loss;
            if !halved {
                return Err(format!(
                    "epoch-100 loss {last_loss} is not below half the epoch-1 loss {first_loss}"
                ));
            }
            if secs >= 60.0 {
                return Err(format!("took {secs:.1}s, budget is 60s"));
            }

            let second = Command::new(env!("CARGO_BIN_EXE_gnn"))
                .arg("train")
                .output()
                .map_err(|e| e.to_string())?;
            let csv2 = String::from_utf8_lossy(&second.stdout).to_string();
            if epoch_and_loss(&csv) != epoch_and_loss(&csv2) {
                return Err("two identically seeded runs disagree".into());
            }
            Ok(())
        })()
    });
}

// ── 7: serialization round-trips and declared failure modes ─────────

#[test]
fn criterion_7_serialization() {
    report(7, "serialization", {
        (|| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;

            // checkpoint: exact doubles back, including awkward values
            let mut r = rng(70);
            let mut chain =
                parse_model::<f64, _>("dense:2-2:tanh", &mut r).map_err(|e| e.to_string())?;
            chain
                .set_param(
                    "0.weight",
                    Tensor::from_vec(vec![2, 2], vec![0.1, 1e-300, -0.0, 1.0 + f64::EPSILON])
                        .unwrap(),
                )
                .map_err(|e| e.to_string())?;
            let saved = chain.param_map();
            let ck = dir.path().join("model.json");
            save_checkpoint(&ck, &saved).map_err(|e| e.to_string())?;
            let loaded = load_checkpoint::<f64, _>(&ck).map_err(|e| e.to_string())?;
            for (name, tensor) in &saved {
                let got = loaded
                    .get(name)
                    .ok_or_else(|| format!("checkpoint lost {name}"))?;
                let exact = tensor
                    .data()
                    .iter()
                    .zip(got.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !exact {
                    return Err(format!("{name} did not round-trip bit-exactly"));
                }
            }

            // dataset: exact doubles back through the line format
            let graphs: Vec<GnnGraph<f64>> = (0..3)
                .map(|_| {
                    let n = r.random_range(2..=6);
                    let m = r.random_range(1..=n * (n - 1));
                    let g = GnnGraph::random(&mut r, n, m)?;
                    g.with_ndata("x", Tensor::randn(vec![3, n], &mut r))?
                        .with_edge_weight(Tensor::randn(vec![m], &mut r))?
                        .with_gdata("y", Tensor::randn(vec![1, 1], &mut r))
                })
                .collect::<gnn::Result<_>>()
                .map_err(|e| e.to_string())?;
            let ds = dir.path().join("graphs.jsonl");
            write_dataset(&ds, &graphs).map_err(|e| e.to_string())?;
            let back = read_dataset::<f64, _>(&ds).map_err(|e| e.to_string())?;
            for (i, (got, want)) in back.iter().zip(&graphs).enumerate() {
                let exact = got.sources() == want.sources()
                    && got.targets() == want.targets()
                    && got
                        .ndata("x")
                        .unwrap()
                        .data()
                        .iter()
                        .zip(want.ndata("x").unwrap().data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
                    && got
                        .edge_weight()
                        .unwrap()
                        .data()
                        .iter()
                        .zip(want.edge_weight().unwrap().data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !exact {
                    return Err(format!("dataset graph {i} did not round-trip exactly"));
                }
            }

            // declared library errors
            let bad_version = dir.path().join("v2.json");
            std::fs::write(&bad_version, "{\"format_version\": 2, \"params\": {}}")
                .map_err(|e| e.to_string())?;
            match load_checkpoint::<f64, _>(&bad_version) {
                Err(GnnError::Validation(_)) => {}
                other => return Err(format!("future version: expected validation error, got {other:?}")),
            }
            let truncated = dir.path().join("cut.json");
            std::fs::write(&truncated, "{\"format_version\": 1, \"params\": {")
                .map_err(|e| e.to_string())?;
            match load_checkpoint::<f64, _>(&truncated) {
                Err(GnnError::Parse(_)) => {}
                other => return Err(format!("truncated: expected parse error, got {other:?}")),
            }
            let bad_line = dir.path().join("bad.jsonl");
            let good = "{\"num_nodes\": 2, \"sources\": [0], \"targets\": [1]}";
            std::fs::write(
                &bad_line,
                format!("{good}\n{good}\n{{\"num_nodes\": 2, \"sources\": [0], \"targets\": [5]}}\n"),
            )
            .map_err(|e| e.to_string())?;
            match read_dataset::<f64, _>(&bad_line) {
                Err(GnnError::Validation(msg)) if msg.contains("line 3") => {}
                other => return Err(format!("expected a validation error citing line 3, got {other:?}")),
            }

            // declared exit codes of the binary
            let run = |args: &[&str]| {
                Command::new(env!("CARGO_BIN_EXE_gnn"))
                    .args(args)
                    .output()
                    .map(|o| o.status.code())
                    .map_err(|e| e.to_string())
            };
            let cut = truncated.to_str().unwrap();
            if run(&["train", "--epochs", "1", "--checkpoint", cut])? != Some(1) {
                return Err("truncated checkpoint should exit 1".into());
            }
            if run(&["train", "--epochs", "one"])? != Some(2) {
                return Err("malformed flag should exit 2".into());
            }
            Ok(())
        })()
    });
}

// ── 8: random graph generator ───────────────────────────────────────

#[test]
fn criterion_8_random_graph_generator() {
    report(8, "random graph generator", {
        (|| {
            let mut r = rng(80);
            for draw in 0..1000 {
                let n = r.random_range(2..=12);
                let m = r.random_range(0..=n * (n - 1));
                let g = GnnGraph::<f64>::random(&mut r, n, m).map_err(|e| e.to_string())?;
                if g.num_edges() != m {
                    return Err(format!("draw {draw}: requested {m} edges, got {}", g.num_edges()));
                }
                let mut seen = HashSet::new();
                for (&s, &t) in g.sources().iter().zip(g.targets()) {
                    if s >= n || t >= n {
                        return Err(format!("draw {draw}: endpoint out of range"));
                    }
                    if s == t {
                        return Err(format!("draw {draw}: self-loop at node {s}"));
                    }
                    if !seen.insert((s, t)) {
                        return Err(format!("draw {draw}: duplicate edge {s}->{t}"));
                    }
                }
            }
            Ok(())
        })()
    });
}
