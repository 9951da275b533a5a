//! On-disk formats.
//!
//! Datasets are JSON Lines, one graph per line:
//! `{"num_nodes": n, "sources": [...], "targets": [...], "edge_weight":
//! [...]|null, "ndata": {name: {"shape": [...], "data": [...]}}, "edata":
//! {...}, "gdata": {...}}` with 0-based indices and row-major flat data.
//! Checkpoints are one JSON document holding a version tag and a
//! name-to-tensor map. All floats travel as decimal doubles, so
//! round-trips are exact at double precision; non-finite values are
//! rejected before writing because JSON cannot carry them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GnnError, Result};
use crate::graph::GnnGraph;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorRecord {
    fn from_tensor<T: Real>(what: &str, t: &Tensor<T>) -> Result<Self> {
        if !t.all_finite() {
            return Err(GnnError::NonFinite(format!(
                "{what} holds a non-finite value, which JSON cannot represent"
            )));
        }
        Ok(Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        })
    }

    fn into_tensor<T: Real>(self) -> Result<Tensor<T>> {
        Tensor::from_vec(self.shape, self.data.into_iter().map(T::from_f64).collect())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    num_nodes: usize,
    sources: Vec<usize>,
    targets: Vec<usize>,
    edge_weight: Option<Vec<f64>>,
    #[serde(default)]
    ndata: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    edata: BTreeMap<String, TensorRecord>,
    #[serde(default)]
    gdata: BTreeMap<String, TensorRecord>,
}

fn graph_to_record<T: Real>(g: &GnnGraph<T>) -> Result<GraphRecord> {
    if g.num_graphs() != 1 {
        return Err(GnnError::Contract(
            "dataset files hold one graph per line; unbatch before writing".into(),
        ));
    }
    let edge_weight = match g.edge_weight() {
        Some(w) => {
            if !w.all_finite() {
                return Err(GnnError::NonFinite(
                    "edge_weight holds a non-finite value, which JSON cannot represent".into(),
                ));
            }
            Some(w.data().iter().map(|v| v.as_f64()).collect())
        }
        None => None,
    };
    let family = |map: &BTreeMap<String, Tensor<T>>,
                  kind: &str|
     -> Result<BTreeMap<String, TensorRecord>> {
        map.iter()
            .map(|(k, v)| Ok((k.clone(), TensorRecord::from_tensor(&format!("{kind} {k:?}"), v)?)))
            .collect()
    };
    Ok(GraphRecord {
        num_nodes: g.num_nodes(),
        sources: g.sources().to_vec(),
        targets: g.targets().to_vec(),
        edge_weight,
        ndata: family(g.ndata_map(), "ndata")?,
        edata: family(g.edata_map(), "edata")?,
        gdata: family(g.gdata_map(), "gdata")?,
    })
}

fn record_to_graph<T: Real>(rec: GraphRecord) -> Result<GnnGraph<T>> {
    let mut g = GnnGraph::from_coo(rec.num_nodes, rec.sources, rec.targets)?;
    if let Some(w) = rec.edge_weight {
        let w = Tensor::from_vec(vec![w.len()], w.into_iter().map(T::from_f64).collect())?;
        g = g.with_edge_weight(w)?;
    }
    for (name, t) in rec.ndata {
        g = g
            .with_ndata(&name, t.into_tensor()?)
            .map_err(|e| GnnError::Validation(format!("ndata {name:?}: {e}")))?;
    }
    for (name, t) in rec.edata {
        g = g
            .with_edata(&name, t.into_tensor()?)
            .map_err(|e| GnnError::Validation(format!("edata {name:?}: {e}")))?;
    }
    for (name, t) in rec.gdata {
        g = g
            .with_gdata(&name, t.into_tensor()?)
            .map_err(|e| GnnError::Validation(format!("gdata {name:?}: {e}")))?;
    }
    Ok(g)
}

/// Writes one JSON line per graph.
pub fn write_dataset<T: Real, P: AsRef<Path>>(path: P, graphs: &[GnnGraph<T>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in graphs {
        let rec = graph_to_record(g)?;
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| GnnError::Parse(format!("serializing graph: {e}")))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON Lines dataset, validating every graph; errors name the
/// offending 1-based line.
pub fn read_dataset<T: Real, P: AsRef<Path>>(path: P) -> Result<Vec<GnnGraph<T>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line)
            .map_err(|e| GnnError::Parse(format!("line {}: {e}", i + 1)))?;
        let g = record_to_graph(rec)
            .map_err(|e| GnnError::Validation(format!("line {}: {e}", i + 1)))?;
        out.push(g);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    params: BTreeMap<String, TensorRecord>,
}

/// Saves a parameter map (running statistics included) as one JSON
/// document.
pub fn save_checkpoint<T: Real, P: AsRef<Path>>(
    path: P,
    params: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        params: params
            .iter()
            .map(|(k, v)| Ok((k.clone(), TensorRecord::from_tensor(&format!("parameter {k:?}"), v)?)))
            .collect::<Result<_>>()?,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &file)
        .map_err(|e| GnnError::Parse(format!("serializing checkpoint: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Real, P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, Tensor<T>>> {
    let reader = BufReader::new(File::open(path)?);
    let file: CheckpointFile = serde_json::from_reader(reader)
        .map_err(|e| GnnError::Parse(format!("checkpoint: {e}")))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(GnnError::Validation(format!(
            "unsupported checkpoint format_version {} (expected {})",
            file.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    file.params
        .into_iter()
        .map(|(k, v)| {
            let t = v
                .into_tensor()
                .map_err(|e| GnnError::Validation(format!("parameter {k:?}: {e}")))?;
            Ok((k, t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn weighted_graph() -> GnnGraph<f64> {
        GnnGraph::from_coo(3, vec![0, 2, 1], vec![1, 1, 0])
            .unwrap()
            .with_edge_weight(Tensor::from_vec(vec![3], vec![0.5, 0.25, 1.0]).unwrap())
            .unwrap()
            .with_ndata(
                "x",
                Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 0.1, 0.2, 0.3]).unwrap(),
            )
            .unwrap()
            .with_edata("e", Tensor::from_vec(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap())
            .unwrap()
            .with_gdata("y", Tensor::from_vec(vec![1], vec![-0.75]).unwrap())
            .unwrap()
    }

    fn plain_graph(seed: u64) -> GnnGraph<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        GnnGraph::random(&mut rng, 4, 5)
            .unwrap()
            .with_ndata("x", Tensor::randn(vec![3, 4], &mut rng))
            .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graphs.jsonl");
        let graphs = vec![weighted_graph(), plain_graph(1), plain_graph(2)];
        write_dataset(&path, &graphs).unwrap();
        let back: Vec<GnnGraph<f64>> = read_dataset(&path).unwrap();
        assert_eq!(back, graphs);
    }

    #[test]
    fn dataset_line_uses_the_documented_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        write_dataset(&path, &[weighted_graph()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["num_nodes"], 3);
        assert_eq!(v["sources"][0], 0);
        assert_eq!(v["targets"][2], 0);
        assert_eq!(v["edge_weight"][1], 0.25);
        assert_eq!(v["ndata"]["x"]["shape"][0], 2);
        assert_eq!(v["ndata"]["x"]["data"][1], 2.0);
        assert_eq!(v["gdata"]["y"]["data"][0], -0.75);
    }

    #[test]
    fn unweighted_graphs_serialize_null_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.jsonl");
        write_dataset(&path, &[plain_graph(0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(v["edge_weight"].is_null());
    }

    #[test]
    fn malformed_line_is_cited_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.jsonl");
        let good = r#"{"num_nodes":1,"sources":[],"targets":[],"edge_weight":null}"#;
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = read_dataset::<f64, _>(&path).unwrap_err();
        assert!(matches!(err, GnnError::Parse(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn out_of_range_edge_cites_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad-edge.jsonl");
        let good = r#"{"num_nodes":1,"sources":[],"targets":[],"edge_weight":null}"#;
        let bad = r#"{"num_nodes":2,"sources":[0,5],"targets":[1,0],"edge_weight":null}"#;
        std::fs::write(&path, format!("{good}\n{good}\n{bad}\n")).unwrap();
        let err = read_dataset::<f64, _>(&path).unwrap_err();
        assert!(matches!(err, GnnError::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.jsonl");
        std::fs::write(
            &path,
            r#"{"num_nodes":1,"sources":[],"targets":[],"edge_weight":null,"nodes":3}"#,
        )
        .unwrap();
        let err = read_dataset::<f64, _>(&path).unwrap_err();
        assert!(err.to_string().contains("nodes"), "{err}");
    }

    #[test]
    fn feature_width_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badshape.jsonl");
        std::fs::write(
            &path,
            r#"{"num_nodes":2,"sources":[],"targets":[],"edge_weight":null,"ndata":{"x":{"shape":[2,3],"data":[1,2,3,4,5,6]}}}"#,
        )
        .unwrap();
        let err = read_dataset::<f64, _>(&path).unwrap_err();
        assert!(matches!(err, GnnError::Validation(_)));
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn batched_graphs_refuse_to_serialize() {
        let b = GnnGraph::batch(&[plain_graph(3), plain_graph(4)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = write_dataset(dir.path().join("b.jsonl"), &[b]).unwrap_err();
        assert!(matches!(err, GnnError::Contract(_)));
    }

    fn awkward_params() -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            "0.weight".to_string(),
            Tensor::from_vec(vec![2, 2], vec![0.1, 1e-300, -3.25, 2.0f64.sqrt()]).unwrap(),
        );
        m.insert(
            "1.running_var".to_string(),
            Tensor::from_vec(vec![2], vec![1.0 + f64::EPSILON, 1e-40]).unwrap(),
        );
        m
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let params = awkward_params();
        save_checkpoint(&path, &params).unwrap();
        let back: BTreeMap<String, Tensor<f64>> = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), params.len());
        for (k, v) in &params {
            assert_eq!(back[k].shape(), v.shape());
            for (a, b) in back[k].data().iter().zip(v.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{k}");
            }
        }
    }

    #[test]
    fn checkpoint_rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.json");
        std::fs::write(&path, r#"{"format_version":2,"params":{}}"#).unwrap();
        let err = load_checkpoint::<f64, _>(&path).unwrap_err();
        assert!(matches!(err, GnnError::Validation(_)));
        assert!(err.to_string().contains('2'));
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.json");
        std::fs::write(&path, r#"{"format_version":1,"params":{"w":{"shape":[1],"#).unwrap();
        assert!(matches!(
            load_checkpoint::<f64, _>(&path),
            Err(GnnError::Parse(_))
        ));
    }

    #[test]
    fn checkpoint_shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.json");
        std::fs::write(
            &path,
            r#"{"format_version":1,"params":{"w":{"shape":[3],"data":[1.0]}}}"#,
        )
        .unwrap();
        let err = load_checkpoint::<f64, _>(&path).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
    }

    #[test]
    fn non_finite_values_refuse_to_serialize() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = awkward_params();
        params.insert(
            "bad".to_string(),
            Tensor::from_vec(vec![1], vec![f64::NAN]).unwrap(),
        );
        let err = save_checkpoint(dir.path().join("nan.json"), &params).unwrap_err();
        assert!(matches!(err, GnnError::NonFinite(_)));
    }
}
