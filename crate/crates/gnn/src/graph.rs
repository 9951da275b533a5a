//! Directed multigraphs with attached features.
//!
//! A graph is frozen after construction: edges are COO pairs
//! (`sources[e] -> targets[e]`, 0-based), parallel edges and self-loops
//! are kept, and structural edits like `add_self_loops` return a new
//! value. Feature tensors ride along in three named stores: `ndata`
//! (one column per node), `edata` (one column per edge) and `gdata`
//! (last extent indexed by graph).
//!
//! One value can also hold a disjoint union of several graphs:
//! `num_graphs` counts them and `graph_indicator` maps each node to its
//! graph. `batch` and `unbatch` convert between the two views without
//! loss.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, OnceLock};

use rand::Rng;

use crate::error::{GnnError, Result};
use crate::tensor::{Real, Tensor};

/// Largest node count for which a dense adjacency matrix is handed out.
const MAX_DENSE_NODES: usize = 4096;

/// Incoming-edge CSR: edges grouped by target node.
///
/// Row `t` spans `row_ptr[t]..row_ptr[t + 1]` in `col_idx`;
/// `col_idx[pos]` is the source of that edge and `perm[pos]` its index
/// in the original edge list, so per-edge values can be looked up
/// without reordering them. Within a row, edges keep their original
/// relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrView {
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub perm: Vec<usize>,
}

impl CsrView {
    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn build(num_nodes: usize, sources: &[usize], targets: &[usize]) -> Self {
        let num_edges = sources.len();
        let mut row_ptr = vec![0usize; num_nodes + 1];
        for &t in targets {
            row_ptr[t + 1] += 1;
        }
        for i in 0..num_nodes {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut next = row_ptr.clone();
        let mut col_idx = vec![0usize; num_edges];
        let mut perm = vec![0usize; num_edges];
        for e in 0..num_edges {
            let pos = next[targets[e]];
            next[targets[e]] += 1;
            col_idx[pos] = sources[e];
            perm[pos] = e;
        }
        CsrView {
            row_ptr,
            col_idx,
            perm,
        }
    }
}

/// Which endpoint counts toward a node's degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// A directed multigraph, or a disjoint union of several, with feature
/// stores attached. Cloning is cheap: edge lists and feature buffers
/// are shared.
#[derive(Debug, Clone)]
pub struct GnnGraph<T: Real> {
    num_nodes: usize,
    sources: Arc<Vec<usize>>,
    targets: Arc<Vec<usize>>,
    edge_weight: Option<Tensor<T>>,
    ndata: BTreeMap<String, Tensor<T>>,
    edata: BTreeMap<String, Tensor<T>>,
    gdata: BTreeMap<String, Tensor<T>>,
    graph_indicator: Arc<Vec<usize>>,
    num_graphs: usize,
    csr: Arc<OnceLock<Arc<CsrView>>>,
}

impl<T: Real> GnnGraph<T> {
    /// Builds a single graph from COO edge lists. Every index must lie
    /// in `0..num_nodes`.
    pub fn from_coo(num_nodes: usize, sources: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(GnnError::Dimension(format!(
                "edge lists differ in length: {} sources vs {} targets",
                sources.len(),
                targets.len()
            )));
        }
        for (e, (&s, &t)) in sources.iter().zip(targets.iter()).enumerate() {
            if s >= num_nodes || t >= num_nodes {
                return Err(GnnError::Index(format!(
                    "edge {} ({} -> {}) references a node outside 0..{}",
                    e, s, t, num_nodes
                )));
            }
        }
        Ok(Self {
            num_nodes,
            sources: Arc::new(sources),
            targets: Arc::new(targets),
            edge_weight: None,
            ndata: BTreeMap::new(),
            edata: BTreeMap::new(),
            gdata: BTreeMap::new(),
            graph_indicator: Arc::new(vec![0; num_nodes]),
            num_graphs: 1,
            csr: Arc::new(OnceLock::new()),
        })
    }

    /// Generates a graph with exactly `num_edges` distinct directed
    /// edges and no self-loops, sampled uniformly by rejection.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        num_nodes: usize,
        num_edges: usize,
    ) -> Result<Self> {
        let max_edges = num_nodes.saturating_mul(num_nodes.saturating_sub(1));
        if num_edges > max_edges {
            return Err(GnnError::Contract(format!(
                "{} nodes admit at most {} distinct directed non-loop edges, requested {}",
                num_nodes, max_edges, num_edges
            )));
        }
        let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(num_edges);
        let mut sources = Vec::with_capacity(num_edges);
        let mut targets = Vec::with_capacity(num_edges);
        while sources.len() < num_edges {
            let s = rng.random_range(0..num_nodes);
            let t = rng.random_range(0..num_nodes);
            if s == t || !seen.insert((s, t)) {
                continue;
            }
            sources.push(s);
            targets.push(t);
        }
        Self::from_coo(num_nodes, sources, targets)
    }

    // ── builders ────────────────────────────────────────────────────

    /// Attaches node features, shape `[d, num_nodes]`.
    pub fn with_ndata(mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Self> {
        let name = name.into();
        if value.rank() != 2 || value.shape()[1] != self.num_nodes {
            return Err(GnnError::Dimension(format!(
                "node data {:?} must be [d, {}], got {:?}",
                name,
                self.num_nodes,
                value.shape()
            )));
        }
        self.ndata.insert(name, value);
        Ok(self)
    }

    /// Attaches edge features, shape `[d, num_edges]` in edge-list order.
    pub fn with_edata(mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Self> {
        let name = name.into();
        if value.rank() != 2 || value.shape()[1] != self.num_edges() {
            return Err(GnnError::Dimension(format!(
                "edge data {:?} must be [d, {}], got {:?}",
                name,
                self.num_edges(),
                value.shape()
            )));
        }
        self.edata.insert(name, value);
        Ok(self)
    }

    /// Attaches graph-level values whose last extent indexes the graphs
    /// in this value (e.g. `[num_graphs]` labels or `[d, num_graphs]`
    /// targets).
    pub fn with_gdata(mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Self> {
        let name = name.into();
        if value.rank() == 0 || *value.shape().last().unwrap() != self.num_graphs {
            return Err(GnnError::Dimension(format!(
                "graph data {:?} must have last extent {}, got {:?}",
                name,
                self.num_graphs,
                value.shape()
            )));
        }
        self.gdata.insert(name, value);
        Ok(self)
    }

    /// Attaches one weight per edge, shape `[num_edges]`.
    pub fn with_edge_weight(mut self, value: Tensor<T>) -> Result<Self> {
        if value.rank() != 1 || value.shape()[0] != self.num_edges() {
            return Err(GnnError::Dimension(format!(
                "edge weights must be [{}], got {:?}",
                self.num_edges(),
                value.shape()
            )));
        }
        self.edge_weight = Some(value);
        Ok(self)
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn sources_arc(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.sources)
    }

    pub fn targets_arc(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.targets)
    }

    pub fn edge_weight(&self) -> Option<&Tensor<T>> {
        self.edge_weight.as_ref()
    }

    /// Graph id of each node; all zeros for a plain single graph.
    pub fn graph_indicator(&self) -> &[usize] {
        &self.graph_indicator
    }

    pub fn graph_indicator_arc(&self) -> Arc<Vec<usize>> {
        Arc::clone(&self.graph_indicator)
    }

    pub fn ndata(&self, name: &str) -> Option<&Tensor<T>> {
        self.ndata.get(name)
    }

    pub fn edata(&self, name: &str) -> Option<&Tensor<T>> {
        self.edata.get(name)
    }

    pub fn gdata(&self, name: &str) -> Option<&Tensor<T>> {
        self.gdata.get(name)
    }

    pub fn ndata_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.ndata
    }

    pub fn edata_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.edata
    }

    pub fn gdata_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.gdata
    }

    // ── structure views ─────────────────────────────────────────────

    /// Incoming-edge CSR view, built once per graph and cached; later
    /// calls and clones share the same view.
    pub fn to_csr(&self) -> Arc<CsrView> {
        Arc::clone(self.csr.get_or_init(|| {
            Arc::new(CsrView::build(self.num_nodes, &self.sources, &self.targets))
        }))
    }

    /// Dense adjacency `[n, n]` with entry `(t, s)` counting edges
    /// `s -> t`, or summing their weights when weights are present.
    /// Refused above 4096 nodes to keep memory bounded.
    pub fn adjacency_dense(&self) -> Result<Tensor<T>> {
        if self.num_nodes > MAX_DENSE_NODES {
            return Err(GnnError::Resource(format!(
                "dense adjacency for {} nodes exceeds the {} node limit",
                self.num_nodes, MAX_DENSE_NODES
            )));
        }
        let n = self.num_nodes;
        let mut adj = vec![T::zero(); n * n];
        for e in 0..self.num_edges() {
            let w = match &self.edge_weight {
                Some(w) => w.data()[e],
                None => T::one(),
            };
            adj[self.targets[e] * n + self.sources[e]] += w;
        }
        Tensor::from_vec(vec![n, n], adj)
    }

    /// Per-node degree as a `[n]` tensor. `weighted` sums edge weights
    /// instead of counting and requires the graph to carry weights.
    pub fn degree(&self, dir: Direction, weighted: bool) -> Result<Tensor<T>> {
        if weighted && self.edge_weight.is_none() {
            return Err(GnnError::Contract(
                "weighted degree requested but the graph has no edge weights".into(),
            ));
        }
        let endpoint = match dir {
            Direction::In => &self.targets,
            Direction::Out => &self.sources,
        };
        let mut deg = vec![T::zero(); self.num_nodes];
        for (e, &v) in endpoint.iter().enumerate() {
            let w = if weighted {
                self.edge_weight.as_ref().unwrap().data()[e]
            } else {
                T::one()
            };
            deg[v] += w;
        }
        Tensor::from_vec(vec![self.num_nodes], deg)
    }

    /// Returns a copy with one `v -> v` edge appended for every node,
    /// after the existing edges. Appended loops get weight 1 when the
    /// graph is weighted. Refused when per-edge data exists, since the
    /// new edges would have no values.
    pub fn add_self_loops(&self) -> Result<Self> {
        if !self.edata.is_empty() {
            return Err(GnnError::Contract(
                "cannot add self-loops while per-edge data is attached".into(),
            ));
        }
        let mut sources = self.sources.as_ref().clone();
        let mut targets = self.targets.as_ref().clone();
        sources.extend(0..self.num_nodes);
        targets.extend(0..self.num_nodes);
        let edge_weight = match &self.edge_weight {
            Some(w) => {
                let mut data = w.data().to_vec();
                data.extend(std::iter::repeat_n(T::one(), self.num_nodes));
                let len = data.len();
                Some(Tensor::from_vec(vec![len], data)?)
            }
            None => None,
        };
        Ok(Self {
            num_nodes: self.num_nodes,
            sources: Arc::new(sources),
            targets: Arc::new(targets),
            edge_weight,
            ndata: self.ndata.clone(),
            edata: BTreeMap::new(),
            gdata: self.gdata.clone(),
            graph_indicator: Arc::clone(&self.graph_indicator),
            num_graphs: self.num_graphs,
            csr: Arc::new(OnceLock::new()),
        })
    }

    // ── batching ────────────────────────────────────────────────────

    /// Disjoint union: node ids are offset part by part, feature stores
    /// are concatenated, and `graph_indicator` records the origin of
    /// each node. All parts must carry the same feature keys, and edge
    /// weights must be present on all parts or none.
    pub fn batch(parts: &[GnnGraph<T>]) -> Result<GnnGraph<T>> {
        let Some(first) = parts.first() else {
            return Err(GnnError::Contract("batch of zero graphs".into()));
        };
        for (family, keys_of) in [
            ("node", &GnnGraph::ndata_map as &dyn Fn(&GnnGraph<T>) -> &BTreeMap<String, Tensor<T>>),
            ("edge", &GnnGraph::edata_map),
            ("graph", &GnnGraph::gdata_map),
        ] {
            let want: Vec<&String> = keys_of(first).keys().collect();
            for (i, g) in parts.iter().enumerate() {
                let got: Vec<&String> = keys_of(g).keys().collect();
                if got != want {
                    return Err(GnnError::Contract(format!(
                        "graph {} has {} data keys {:?}, expected {:?}",
                        i, family, got, want
                    )));
                }
            }
        }
        let weighted = parts.iter().filter(|g| g.edge_weight.is_some()).count();
        if weighted != 0 && weighted != parts.len() {
            return Err(GnnError::Contract(format!(
                "{} of {} graphs carry edge weights; either all or none must",
                weighted,
                parts.len()
            )));
        }

        let mut sources = Vec::new();
        let mut targets = Vec::new();
        let mut indicator = Vec::new();
        let mut node_offset = 0usize;
        let mut graph_offset = 0usize;
        for g in parts {
            sources.extend(g.sources.iter().map(|&s| s + node_offset));
            targets.extend(g.targets.iter().map(|&t| t + node_offset));
            indicator.extend(g.graph_indicator.iter().map(|&i| i + graph_offset));
            node_offset += g.num_nodes;
            graph_offset += g.num_graphs;
        }

        let concat_family = |family: &str,
                             maps: Vec<&BTreeMap<String, Tensor<T>>>|
         -> Result<BTreeMap<String, Tensor<T>>> {
            let mut out = BTreeMap::new();
            for key in maps[0].keys() {
                let tensors: Vec<&Tensor<T>> = maps.iter().map(|m| &m[key]).collect();
                let joined = concat_last_axis(&tensors).map_err(|e| {
                    GnnError::Dimension(format!("{family} data {key:?}: {e}"))
                })?;
                out.insert(key.clone(), joined);
            }
            Ok(out)
        };
        let ndata = concat_family("node", parts.iter().map(|g| &g.ndata).collect())?;
        let edata = concat_family("edge", parts.iter().map(|g| &g.edata).collect())?;
        let gdata = concat_family("graph", parts.iter().map(|g| &g.gdata).collect())?;
        let edge_weight = if weighted == parts.len() {
            let tensors: Vec<&Tensor<T>> =
                parts.iter().map(|g| g.edge_weight.as_ref().unwrap()).collect();
            Some(concat_last_axis(&tensors)?)
        } else {
            None
        };

        Ok(Self {
            num_nodes: node_offset,
            sources: Arc::new(sources),
            targets: Arc::new(targets),
            edge_weight,
            ndata,
            edata,
            gdata,
            graph_indicator: Arc::new(indicator),
            num_graphs: graph_offset,
            csr: Arc::new(OnceLock::new()),
        })
    }

    /// Splits a batched value back into its parts, inverting `batch`.
    /// Requires each graph's nodes to be contiguous and every edge to
    /// stay within one graph.
    pub fn unbatch(&self) -> Result<Vec<GnnGraph<T>>> {
        let ind = &self.graph_indicator;
        for w in ind.windows(2) {
            if w[0] > w[1] {
                return Err(GnnError::Contract(
                    "unbatch requires each graph's nodes to be contiguous".into(),
                ));
            }
        }
        let mut counts = vec![0usize; self.num_graphs];
        for (v, &g) in ind.iter().enumerate() {
            if g >= self.num_graphs {
                return Err(GnnError::Index(format!(
                    "node {} is assigned to graph {} but only {} graphs exist",
                    v, g, self.num_graphs
                )));
            }
            counts[g] += 1;
        }
        let mut node_start = vec![0usize; self.num_graphs + 1];
        for g in 0..self.num_graphs {
            node_start[g + 1] = node_start[g] + counts[g];
        }

        let mut part_sources: Vec<Vec<usize>> = vec![Vec::new(); self.num_graphs];
        let mut part_targets: Vec<Vec<usize>> = vec![Vec::new(); self.num_graphs];
        let mut part_edge_pos: Vec<Vec<usize>> = vec![Vec::new(); self.num_graphs];
        for e in 0..self.num_edges() {
            let (s, t) = (self.sources[e], self.targets[e]);
            let g = ind[s];
            if ind[t] != g {
                return Err(GnnError::Contract(format!(
                    "edge {} ({} -> {}) crosses graphs {} and {}",
                    e, s, t, g, ind[t]
                )));
            }
            part_sources[g].push(s - node_start[g]);
            part_targets[g].push(t - node_start[g]);
            part_edge_pos[g].push(e);
        }

        let mut parts = Vec::with_capacity(self.num_graphs);
        for g in 0..self.num_graphs {
            let mut part = GnnGraph::from_coo(
                counts[g],
                std::mem::take(&mut part_sources[g]),
                std::mem::take(&mut part_targets[g]),
            )?;
            for (key, value) in &self.ndata {
                part = part.with_ndata(key, slice_last_axis(value, node_start[g], counts[g]))?;
            }
            for (key, value) in &self.edata {
                part = part.with_edata(key, gather_last_axis(value, &part_edge_pos[g]))?;
            }
            for (key, value) in &self.gdata {
                part = part.with_gdata(key, slice_last_axis(value, g, 1))?;
            }
            if let Some(w) = &self.edge_weight {
                part = part.with_edge_weight(gather_last_axis(w, &part_edge_pos[g]))?;
            }
            parts.push(part);
        }
        Ok(parts)
    }
}

impl<T: Real> PartialEq for GnnGraph<T> {
    fn eq(&self, other: &Self) -> bool {
        self.num_nodes == other.num_nodes
            && self.num_graphs == other.num_graphs
            && self.sources == other.sources
            && self.targets == other.targets
            && self.edge_weight == other.edge_weight
            && self.graph_indicator == other.graph_indicator
            && self.ndata == other.ndata
            && self.edata == other.edata
            && self.gdata == other.gdata
    }
}

/// A sequence of graphs over one fixed node set, for data that evolves
/// in discrete steps. Edges and features may differ per snapshot.
#[derive(Debug, Clone)]
pub struct TemporalSnapshots<T: Real> {
    num_nodes: usize,
    snapshots: Vec<GnnGraph<T>>,
}

impl<T: Real> TemporalSnapshots<T> {
    pub fn new(snapshots: Vec<GnnGraph<T>>) -> Result<Self> {
        let Some(first) = snapshots.first() else {
            return Err(GnnError::Contract(
                "a temporal sequence needs at least one snapshot".into(),
            ));
        };
        let num_nodes = first.num_nodes();
        for (i, g) in snapshots.iter().enumerate() {
            if g.num_nodes() != num_nodes {
                return Err(GnnError::Contract(format!(
                    "snapshot {} has {} nodes but the sequence is over {}",
                    i,
                    g.num_nodes(),
                    num_nodes
                )));
            }
        }
        Ok(Self {
            num_nodes,
            snapshots,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&GnnGraph<T>> {
        self.snapshots.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GnnGraph<T>> {
        self.snapshots.iter()
    }

    /// Appends a snapshot; its node count must match the sequence.
    pub fn push(&mut self, snapshot: GnnGraph<T>) -> Result<()> {
        if snapshot.num_nodes() != self.num_nodes {
            return Err(GnnError::Contract(format!(
                "snapshot has {} nodes but the sequence is over {}",
                snapshot.num_nodes(),
                self.num_nodes
            )));
        }
        self.snapshots.push(snapshot);
        Ok(())
    }
}

/// Concatenates tensors along their last axis; leading extents must
/// match. `[d, a]` and `[d, b]` join to `[d, a + b]`.
fn concat_last_axis<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts[0];
    let rank = first.rank();
    if rank == 0 {
        return Err(GnnError::Dimension(
            "cannot concatenate rank-0 tensors".into(),
        ));
    }
    let lead = &first.shape()[..rank - 1];
    for p in parts {
        if p.rank() != rank || &p.shape()[..rank - 1] != lead {
            return Err(GnnError::Dimension(format!(
                "leading extents must match, got {:?} and {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let outer: usize = lead.iter().product();
    let total: usize = parts.iter().map(|p| *p.shape().last().unwrap()).sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for p in parts {
            let last = *p.shape().last().unwrap();
            out.extend_from_slice(&p.data()[o * last..(o + 1) * last]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[rank - 1] = total;
    Tensor::from_vec(shape, out)
}

/// Contiguous slice `start..start + len` along the last axis.
fn slice_last_axis<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let rank = t.rank();
    let last = *t.shape().last().unwrap();
    debug_assert!(start + len <= last);
    let outer: usize = t.shape()[..rank - 1].iter().product();
    let data = t.data();
    let mut out = Vec::with_capacity(outer * len);
    for o in 0..outer {
        out.extend_from_slice(&data[o * last + start..o * last + start + len]);
    }
    let mut shape = t.shape().to_vec();
    shape[rank - 1] = len;
    Tensor::from_vec(shape, out).expect("slice shape matches data")
}

/// Picks the given last-axis positions, in order.
fn gather_last_axis<T: Real>(t: &Tensor<T>, positions: &[usize]) -> Tensor<T> {
    let rank = t.rank();
    let last = *t.shape().last().unwrap();
    let outer: usize = t.shape()[..rank - 1].iter().product();
    let data = t.data();
    let mut out = Vec::with_capacity(outer * positions.len());
    for o in 0..outer {
        for &p in positions {
            debug_assert!(p < last);
            out.push(data[o * last + p]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[rank - 1] = positions.len();
    Tensor::from_vec(shape, out).expect("gathered shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn triangle() -> GnnGraph<f64> {
        GnnGraph::from_coo(3, vec![0, 1, 2], vec![1, 2, 0]).unwrap()
    }

    #[test]
    fn coo_roundtrip_and_counts() {
        let g = triangle();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_edges(), 3);
        assert_eq!(g.num_graphs(), 1);
        assert_eq!(g.sources(), &[0, 1, 2]);
        assert_eq!(g.targets(), &[1, 2, 0]);
        assert_eq!(g.graph_indicator(), &[0, 0, 0]);
    }

    #[test]
    fn from_coo_rejects_bad_edges() {
        let err = GnnGraph::<f64>::from_coo(3, vec![0, 1], vec![1])
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 sources vs 1 targets"), "{err}");
        let err = GnnGraph::<f64>::from_coo(3, vec![0, 5], vec![1, 2])
            .unwrap_err()
            .to_string();
        assert!(err.contains("edge 1") && err.contains("5"), "{err}");
    }

    #[test]
    fn csr_groups_by_target() {
        let g = triangle();
        let csr = g.to_csr();
        assert_eq!(csr.row_ptr, vec![0, 1, 2, 3]);
        assert_eq!(csr.col_idx, vec![2, 0, 1]);
        assert_eq!(csr.perm, vec![2, 0, 1]);
    }

    #[test]
    fn csr_keeps_parallel_edges_in_order() {
        let g = GnnGraph::<f64>::from_coo(3, vec![1, 2, 1], vec![0, 0, 0]).unwrap();
        let csr = g.to_csr();
        assert_eq!(csr.row_ptr, vec![0, 3, 3, 3]);
        assert_eq!(csr.col_idx, vec![1, 2, 1]);
        assert_eq!(csr.perm, vec![0, 1, 2]);
    }

    #[test]
    fn csr_is_cached_and_shared_by_clones() {
        let g = triangle();
        let a = g.to_csr();
        let b = g.to_csr();
        assert!(Arc::ptr_eq(&a, &b));
        let c = g.clone().to_csr();
        assert!(Arc::ptr_eq(&a, &c));
    }

    #[test]
    fn ndata_width_is_validated() {
        let err = triangle()
            .with_ndata("x", Tensor::zeros(vec![2, 4]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[d, 3]") && err.contains("[2, 4]"), "{err}");
        let g = triangle()
            .with_ndata("x", Tensor::ones(vec![2, 3]))
            .unwrap();
        assert_eq!(g.ndata("x").unwrap().shape(), &[2, 3]);
        assert!(g.ndata("missing").is_none());
    }

    #[test]
    fn gdata_last_extent_is_validated() {
        assert!(triangle().with_gdata("y", Tensor::zeros(vec![2])).is_err());
        let g = triangle().with_gdata("y", Tensor::zeros(vec![1])).unwrap();
        assert_eq!(g.gdata("y").unwrap().shape(), &[1]);
    }

    #[test]
    fn dense_adjacency_counts_parallel_edges() {
        let g = GnnGraph::<f64>::from_coo(2, vec![0, 0], vec![1, 1]).unwrap();
        let adj = g.adjacency_dense().unwrap();
        assert_eq!(adj.at(1, 0), 2.0);
        assert_eq!(adj.at(0, 1), 0.0);
    }

    #[test]
    fn dense_adjacency_sums_weights() {
        let g = GnnGraph::from_coo(2, vec![0, 0], vec![1, 1])
            .unwrap()
            .with_edge_weight(Tensor::from_vec(vec![2], vec![0.5, 0.25]).unwrap())
            .unwrap();
        assert_eq!(g.adjacency_dense().unwrap().at(1, 0), 0.75);
    }

    #[test]
    fn degrees_in_and_out() {
        // star: everything points at node 0
        let g = GnnGraph::<f64>::from_coo(4, vec![1, 2, 3], vec![0, 0, 0]).unwrap();
        assert_eq!(
            g.degree(Direction::In, false).unwrap().data(),
            &[3.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            g.degree(Direction::Out, false).unwrap().data(),
            &[0.0, 1.0, 1.0, 1.0]
        );
        assert!(matches!(
            g.degree(Direction::In, true),
            Err(GnnError::Contract(_))
        ));
    }

    #[test]
    fn self_loops_append_after_existing_edges() {
        let g = triangle()
            .with_edge_weight(Tensor::from_vec(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let with_loops = g.add_self_loops().unwrap();
        assert_eq!(with_loops.num_edges(), 6);
        assert_eq!(with_loops.sources()[3..], [0, 1, 2]);
        assert_eq!(with_loops.targets()[3..], [0, 1, 2]);
        let w = with_loops.edge_weight().unwrap().data();
        assert_eq!(&w[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn self_loops_refuse_edge_data() {
        let g = triangle()
            .with_edata("e", Tensor::ones(vec![1, 3]))
            .unwrap();
        assert!(matches!(g.add_self_loops(), Err(GnnError::Contract(_))));
    }

    #[test]
    fn random_graph_has_distinct_non_loop_edges() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = GnnGraph::<f32>::random(&mut rng, 10, 30).unwrap();
        assert_eq!(g.num_edges(), 30);
        let mut seen = HashSet::new();
        for (&s, &t) in g.sources().iter().zip(g.targets()) {
            assert_ne!(s, t);
            assert!(seen.insert((s, t)));
        }
    }

    #[test]
    fn random_graph_is_deterministic_per_seed() {
        let a = GnnGraph::<f32>::random(&mut StdRng::seed_from_u64(3), 8, 20).unwrap();
        let b = GnnGraph::<f32>::random(&mut StdRng::seed_from_u64(3), 8, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_graph_edge_budget() {
        let mut rng = StdRng::seed_from_u64(1);
        let full = GnnGraph::<f32>::random(&mut rng, 3, 6).unwrap();
        assert_eq!(full.num_edges(), 6);
        assert!(matches!(
            GnnGraph::<f32>::random(&mut rng, 3, 7),
            Err(GnnError::Contract(_))
        ));
    }

    fn featured(seed: u64, n: usize, m: usize) -> GnnGraph<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let g = GnnGraph::random(&mut rng, n, m).unwrap();
        let x = Tensor::randn(vec![2, n], &mut rng);
        let y = Tensor::randn(vec![1, 1], &mut rng);
        g.with_ndata("x", x).unwrap().with_gdata("y", y).unwrap()
    }

    #[test]
    fn batch_offsets_nodes_and_concatenates_features() {
        let a = triangle()
            .with_ndata("x", Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let b = GnnGraph::from_coo(2, vec![0], vec![1])
            .unwrap()
            .with_ndata("x", Tensor::from_vec(vec![1, 2], vec![4.0, 5.0]).unwrap())
            .unwrap();
        let batched = GnnGraph::batch(&[a, b]).unwrap();
        assert_eq!(batched.num_nodes(), 5);
        assert_eq!(batched.num_graphs(), 2);
        assert_eq!(batched.sources(), &[0, 1, 2, 3]);
        assert_eq!(batched.targets(), &[1, 2, 0, 4]);
        assert_eq!(batched.graph_indicator(), &[0, 0, 0, 1, 1]);
        assert_eq!(
            batched.ndata("x").unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0, 5.0]
        );
    }

    #[test]
    fn batch_requires_matching_keys_and_weights() {
        let a = triangle()
            .with_ndata("x", Tensor::ones(vec![1, 3]))
            .unwrap();
        let b = triangle();
        assert!(matches!(
            GnnGraph::batch(&[a.clone(), b.clone()]),
            Err(GnnError::Contract(_))
        ));
        let w = b
            .clone()
            .with_edge_weight(Tensor::ones(vec![3]))
            .unwrap();
        assert!(matches!(
            GnnGraph::batch(&[b, w]),
            Err(GnnError::Contract(_))
        ));
    }

    #[test]
    fn unbatch_inverts_batch() {
        let parts = vec![featured(1, 4, 6), featured(2, 3, 4), featured(3, 5, 9)];
        let recovered = GnnGraph::batch(&parts).unwrap().unbatch().unwrap();
        assert_eq!(recovered, parts);
    }

    #[test]
    fn batch_is_associative() {
        let (a, b, c) = (featured(4, 3, 3), featured(5, 4, 5), featured(6, 2, 2));
        let left = GnnGraph::batch(&[GnnGraph::batch(&[a.clone(), b.clone()]).unwrap(), c.clone()])
            .unwrap();
        let flat = GnnGraph::batch(&[a, b, c]).unwrap();
        assert_eq!(left, flat);
    }

    #[test]
    fn unbatch_handles_empty_graphs_in_the_union() {
        let empty = GnnGraph::<f64>::from_coo(0, vec![], vec![]).unwrap();
        let parts = vec![empty.clone(), triangle(), empty];
        let recovered = GnnGraph::batch(&parts).unwrap().unbatch().unwrap();
        assert_eq!(recovered, parts);
    }

    #[test]
    fn temporal_snapshots_share_the_node_set() {
        let day0 = triangle();
        let day1 = GnnGraph::from_coo(3, vec![0], vec![2]).unwrap();
        let mut seq = TemporalSnapshots::new(vec![day0, day1]).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.num_nodes(), 3);
        assert_eq!(seq.get(1).unwrap().num_edges(), 1);
        let wrong = GnnGraph::from_coo(4, vec![], vec![]).unwrap();
        assert!(seq.push(wrong).is_err());
        assert!(TemporalSnapshots::<f64>::new(vec![]).is_err());
    }
}
