//! Optimization loop: Adam updates, mean squared error, a shuffling
//! mini-batch loader that collates graph batches, a synthetic
//! teacher-labelled dataset, and the epoch driver tying them together.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::error::{GnnError, Result};
use crate::graph::GnnGraph;
use crate::nn::{parse_model, GnnChain};
use crate::tensor::{GradientMap, Real, ReduceKind, Tape, Tensor};

/// Stddev of the label noise added to synthetic teacher targets. The
/// noise draw is clamped to three stddevs so `|y| <= 1 + 3*sigma`
/// always holds.
pub const TEACHER_NOISE_SIGMA: f64 = 0.01;

/// Layer list used when no model is given on the command line.
pub const DEFAULT_MODEL: &str =
    "gcn:16-64, batchnorm:64, relu, gcn:64-64:relu, pool:mean, dense:64-1";

/// Adam optimizer state: per-parameter first/second moment estimates
/// keyed by parameter name, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer update. Every entry of `params` must have a
    /// gradient in `grads`; returns the new parameter values in the
    /// same order.
    pub fn step(
        &mut self,
        params: &[(String, Tensor<T>)],
        grads: &GradientMap<T>,
    ) -> Result<Vec<(String, Tensor<T>)>> {
        self.t += 1;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let ib1 = T::from_f64(1.0 - self.beta1);
        let ib2 = T::from_f64(1.0 - self.beta2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        let mut out = Vec::with_capacity(params.len());
        for (name, value) in params {
            let g = grads.get(name).ok_or_else(|| {
                GnnError::Contract(format!("no gradient for trainable parameter {name:?}"))
            })?;
            if g.shape() != value.shape() {
                return Err(GnnError::Dimension(format!(
                    "gradient for {:?} has shape {:?}, parameter has {:?}",
                    name,
                    g.shape(),
                    value.shape()
                )));
            }
            let n = value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            if m.len() != n {
                return Err(GnnError::Dimension(format!(
                    "parameter {name:?} changed size mid-optimization"
                )));
            }
            let mut new = Vec::with_capacity(n);
            for ((theta, grad), (mi, vi)) in value
                .data()
                .iter()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + ib1 * *grad;
                *vi = b2 * *vi + ib2 * *grad * *grad;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                new.push(*theta - lr * mhat / (vhat.sqrt() + eps));
            }
            out.push((name.clone(), Tensor::from_vec(value.shape().to_vec(), new)?));
        }
        Ok(out)
    }
}

/// Mean of squared differences over all elements; both arguments are
/// flattened first, so only the element counts must agree.
pub fn mse_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<Tensor<T>> {
    if pred.numel() != target.numel() {
        return Err(GnnError::Dimension(format!(
            "prediction has {} values but target has {}",
            pred.numel(),
            target.numel()
        )));
    }
    let p = tape.reshape(pred, vec![pred.numel()])?;
    let t = tape.reshape(target, vec![target.numel()])?;
    let diff = tape.sub(&p, &t)?;
    let sq = tape.square(&diff)?;
    tape.reduce(&sq, ReduceKind::Mean, None)
}

/// How a [`DataLoader`] forms batches.
#[derive(Debug, Clone, Copy)]
pub struct DataLoaderConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    /// When set, consumers should take joined graph batches from
    /// [`DataLoader::collated`]; otherwise plain chunks from
    /// [`DataLoader::chunks`].
    pub collate: bool,
    pub seed: u64,
}

/// Deterministic epoch iterator over a fixed dataset: each epoch
/// reshuffles (seeded by `(seed, epoch)`), partitions into consecutive
/// chunks of `batch_size`, and keeps the final partial chunk.
#[derive(Debug, Clone)]
pub struct DataLoader<T: Real> {
    data: Vec<GnnGraph<T>>,
    cfg: DataLoaderConfig,
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix-style mix so (seed, epoch) pairs land on distinct streams
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Real> DataLoader<T> {
    pub fn new(data: Vec<GnnGraph<T>>, cfg: DataLoaderConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(GnnError::Contract(
                "data loader needs at least one graph".into(),
            ));
        }
        if cfg.batch_size == 0 {
            return Err(GnnError::Contract("batch size must be at least 1".into()));
        }
        Ok(Self { data, cfg })
    }

    pub fn num_samples(&self) -> usize {
        self.data.len()
    }

    pub fn num_batches(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        if self.cfg.shuffle {
            let mut rng = StdRng::seed_from_u64(epoch_seed(self.cfg.seed, epoch));
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// The epoch's batches as plain graph lists.
    pub fn chunks(&self, epoch: u64) -> Vec<Vec<GnnGraph<T>>> {
        self.order(epoch)
            .chunks(self.cfg.batch_size)
            .map(|chunk| chunk.iter().map(|&i| self.data[i].clone()).collect())
            .collect()
    }

    /// The epoch's batches joined into one disjoint-union graph each.
    pub fn collated(&self, epoch: u64) -> Result<Vec<GnnGraph<T>>> {
        self.chunks(epoch)
            .iter()
            .map(|chunk| GnnGraph::batch(chunk))
            .collect()
    }
}

/// Settings for a full synthetic-data training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub num_graphs: usize,
    pub nodes: usize,
    pub edges: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub model: String,
    /// Draw each target as pure standard-normal noise, independent of
    /// the node features, instead of from the teacher function.
    pub random_y: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 32,
            num_graphs: 128,
            nodes: 10,
            edges: 30,
            feature_dim: 16,
            seed: 1,
            model: DEFAULT_MODEL.to_string(),
            random_y: false,
        }
    }
}

/// Random graphs with standard-normal node features and one scalar
/// target per graph. The default target is a fixed random teacher,
/// `y = tanh(u . mean_over_nodes(x)) + noise`, with `u` drawn once per
/// dataset; `random_y` replaces it with a label drawn independently of
/// the features.
pub fn make_synthetic_dataset<T: Real, R: Rng + ?Sized>(
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<GnnGraph<T>>> {
    if cfg.num_graphs == 0 || cfg.nodes == 0 || cfg.feature_dim == 0 {
        return Err(GnnError::Contract(
            "synthetic dataset needs positive graph count, node count and feature dim".into(),
        ));
    }
    let u: Vec<f64> = (0..cfg.feature_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = Vec::with_capacity(cfg.num_graphs);
    for _ in 0..cfg.num_graphs {
        let g = GnnGraph::random(rng, cfg.nodes, cfg.edges)?;
        let x = Tensor::<T>::randn(vec![cfg.feature_dim, cfg.nodes], rng);
        let y_val = if cfg.random_y {
            rng.sample::<f64, _>(StandardNormal)
        } else {
            let n = cfg.nodes as f64;
            let mut dot = 0.0;
            for (f, uf) in u.iter().enumerate() {
                let mean_f: f64 = (0..cfg.nodes).map(|j| x.at(f, j).as_f64()).sum::<f64>() / n;
                dot += uf * mean_f;
            }
            let noise = rng.sample::<f64, _>(StandardNormal) * TEACHER_NOISE_SIGMA;
            let cap = 3.0 * TEACHER_NOISE_SIGMA;
            dot.tanh() + noise.clamp(-cap, cap)
        };
        let y = Tensor::from_vec(vec![1], vec![T::from_f64(y_val)])?;
        out.push(g.with_ndata("x", x)?.with_gdata("y", y)?);
    }
    Ok(out)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetric {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Loss averaged over all graphs seen this epoch.
    pub mean_loss: f64,
    pub wall_ms: f64,
}

impl EpochMetric {
    pub fn csv_header() -> &'static str {
        "epoch,mean_loss,wall_ms"
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{:.3}", self.epoch, self.mean_loss, self.wall_ms)
    }
}

/// Trains `chain` on `data` for `cfg.epochs` epochs: per batch, a
/// training-mode forward, mean squared error against the batch
/// targets, backward, and one Adam step. Returns one metric per epoch.
pub fn fit<T: Real>(
    chain: &mut GnnChain<T>,
    data: &[GnnGraph<T>],
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetric>> {
    let loader = DataLoader::new(
        data.to_vec(),
        DataLoaderConfig {
            batch_size: cfg.batch_size,
            shuffle: true,
            collate: true,
            seed: cfg.seed,
        },
    )?;
    let mut opt = AdamState::new(cfg.lr);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (bi, batch) in loader.collated(epoch as u64 - 1)?.into_iter().enumerate() {
            let loss = train_batch(chain, &mut opt, &batch)?;
            if !loss.is_finite() {
                return Err(GnnError::NonFinite(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            total += loss * batch.num_graphs() as f64;
            count += batch.num_graphs();
        }
        metrics.push(EpochMetric {
            epoch,
            mean_loss: total / count as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(metrics)
}

/// One forward/backward/update on a collated batch; returns the batch
/// loss.
fn train_batch<T: Real>(
    chain: &mut GnnChain<T>,
    opt: &mut AdamState<T>,
    batch: &GnnGraph<T>,
) -> Result<f64> {
    let x = batch
        .ndata("x")
        .ok_or_else(|| GnnError::Contract("training batch has no node feature \"x\"".into()))?
        .clone();
    let y = batch
        .gdata("y")
        .ok_or_else(|| GnnError::Contract("training batch has no graph target \"y\"".into()))?
        .clone();
    let mut tape = Tape::new();
    let pred = chain.forward_train(&mut tape, batch, &x)?;
    let loss = mse_loss(&mut tape, &pred, &y)?;
    let loss_val = loss.item().as_f64();
    let seed = loss
        .node_id()
        .ok_or_else(|| GnnError::Contract("loss left no trace on the tape".into()))?;
    let grads = tape.backward(seed)?;

    let mut trainables = Vec::new();
    let mut grad_map = GradientMap::new();
    for (name, value, trainable) in chain.named_params() {
        if !trainable {
            continue;
        }
        if let Some(g) = grads.grad(&value) {
            grad_map.insert(name.clone(), g.clone());
        }
        trainables.push((name, value));
    }
    for (name, value) in opt.step(&trainables, &grad_map)? {
        chain.set_param(&name, value)?;
    }
    Ok(loss_val)
}

/// Builds the dataset and model from one seeded stream and trains;
/// the shared entry point behind the command-line trainer.
pub fn run_training<T: Real>(cfg: &TrainConfig) -> Result<(GnnChain<T>, Vec<EpochMetric>)> {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let data = make_synthetic_dataset::<T, _>(cfg, &mut rng)?;
    let mut chain = parse_model::<T, _>(&cfg.model, &mut rng)?;
    let metrics = fit(&mut chain, &data, cfg)?;
    Ok((chain, metrics))
}
