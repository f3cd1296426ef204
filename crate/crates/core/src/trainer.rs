//! Jacobian-regularized generalized InfoNCE training.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diff::{logsumexp, DiffError, Graph, NodeId, Tensor};
use crate::encoder::{EncoderError, Geometry, MlpEncoder, ParamNodes, DEFAULT_HIDDEN_WIDTH, DEFAULT_OUTPUT_SCALE};
use crate::rng::{self, tag};
use crate::sampling::{Batch, IndexedDataset, Mode, SamplingError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Similarity {
    /// `−‖a − b‖² / τ`
    NegSqEuclidean {
        #[serde(default = "unit")]
        temperature: f64,
    },
    /// `aᵀb / τ` on unit-normalized embeddings.
    Dot { temperature: f64 },
}

fn unit() -> f64 {
    1.0
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::NegSqEuclidean { temperature: 1.0 }
    }
}

impl Similarity {
    pub fn temperature(self) -> f64 {
        match self {
            Similarity::NegSqEuclidean { temperature } | Similarity::Dot { temperature } => temperature,
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::NegSqEuclidean { temperature } => {
                -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / temperature
            }
            Similarity::Dot { temperature } => {
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return 0.0;
                }
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb * temperature)
            }
        }
    }
}

/// Mean over the batch of `−ψ(x, x⁺) + log Σ_{x⁻} exp ψ(x, x⁻)`.
pub fn infonce(pos: &[f64], neg: &Tensor) -> f64 {
    assert_eq!(pos.len(), neg.rows(), "one positive per row of negatives");
    let total: f64 = pos.iter().enumerate().map(|(r, p)| logsumexp(neg.row(r)) - p).sum();
    total / pos.len().max(1) as f64
}

/// `0` before `start`, linear up to `lambda_max` at `end`, constant after.
pub fn lambda_schedule(step: usize, lambda_max: f64, start: usize, end: usize) -> f64 {
    if step < start {
        0.0
    } else if step >= end {
        lambda_max
    } else {
        lambda_max * (step - start) as f64 / (end - start) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Embedding partition. Hybrid mode trains the first part on labels and
    /// the full embedding on time.
    pub partition: Vec<usize>,
    pub hidden_width: usize,
    pub output_scale: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub steps: usize,
    pub lambda_max: f64,
    pub ramp_start: usize,
    pub ramp_end: usize,
    pub learning_rate: f64,
    pub similarity: Similarity,
    /// Rows of the reference batch that enter the Jacobian penalty; all of
    /// them when unset.
    pub reg_batch: Option<usize>,
    pub log_every: usize,
    /// Batches averaged for the final loss estimate.
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hybrid,
            partition: vec![2, 2],
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            output_scale: DEFAULT_OUTPUT_SCALE,
            batch_size: 512,
            negatives: 512,
            steps: 4000,
            lambda_max: 0.1,
            ramp_start: 1000,
            ramp_end: 2000,
            learning_rate: 3e-4,
            similarity: Similarity::default(),
            reg_batch: None,
            log_every: 50,
            eval_batches: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-size batch, step count and schedule (hours on a CPU).
    pub fn full_scale(self) -> Self {
        Self { batch_size: 5000, negatives: 5000, steps: 20_000, ramp_start: 2500, ramp_end: 5000, ..self }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.partition.is_empty() || self.partition.contains(&0) {
            return bad("partition must be non-empty with positive sizes");
        }
        if self.mode == Mode::Hybrid && self.partition.len() < 2 {
            return bad("hybrid mode needs at least two partitions");
        }
        if self.batch_size == 0 || (self.negatives == 0 && self.mode != Mode::Regression) {
            return bad("batch size and negatives must be positive");
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return bad("lambda_max must be finite and non-negative");
        }
        if self.lambda_max > 0.0 && !(self.ramp_start < self.ramp_end && self.ramp_end <= self.steps.max(self.ramp_end)) {
            return bad("ramp window must satisfy ramp_start < ramp_end");
        }
        if !(self.learning_rate > 0.0) || !(self.output_scale > 0.0) {
            return bad("learning rate and output scale must be positive");
        }
        if !(self.similarity.temperature() > 0.0) {
            return bad("temperature must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        lambda_schedule(step, self.lambda_max, self.ramp_start, self.ramp_end)
    }

    pub fn output_dim(&self) -> usize {
        self.partition.iter().sum()
    }

    /// Width of the label-trained slice.
    pub fn supervised_dim(&self) -> usize {
        match self.mode {
            Mode::Hybrid => self.partition[0],
            _ => self.output_dim(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: usize, source: DiffError },
    #[error("regression targets have {labels} columns, embedding has {dims}")]
    LabelWidth { labels: usize, dims: usize },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// InfoNCE averaged over the loss terms (mean squared error in
    /// regression mode).
    pub infonce: f64,
    pub reg: f64,
    pub lambda: f64,
    pub gof: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub negatives: usize,
    pub rows: Vec<TraceRow>,
    /// InfoNCE of the final encoder averaged over fresh evaluation batches.
    pub final_infonce: f64,
    pub seconds: f64,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,infonce,reg,lambda,gof\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.infonce, r.reg, r.lambda, r.gof);
        }
        out
    }
}

/// `log N − final InfoNCE`: a lower-bound estimate of how far the learned
/// positive distribution is from the negatives. Near 0 for a collapsed run.
pub fn goodness_of_fit(trace: &TrainTrace) -> f64 {
    (trace.negatives as f64).ln() - trace.final_infonce
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: MlpEncoder,
    pub trace: TrainTrace,
}

/// `(ψ_pos: B×1, ψ_neg: B×N)` for embeddings of references, positives and
/// negatives.
fn similarities(
    g: &mut Graph,
    sim: Similarity,
    r: NodeId,
    p: NodeId,
    n: NodeId,
) -> Result<(NodeId, NodeId), DiffError> {
    let (b, nn) = (g.value(r).rows(), g.value(n).rows());
    let inv_t = 1.0 / sim.temperature();
    match sim {
        Similarity::Dot { .. } => {
            let rp = g.hadamard(r, p)?;
            let pos = g.row_sums(rp)?;
            let pos = g.scale(pos, inv_t)?;
            let neg = g.matmul_nt(r, n)?;
            let neg = g.scale(neg, inv_t)?;
            Ok((pos, neg))
        }
        Similarity::NegSqEuclidean { .. } => {
            let diff = g.sub(r, p)?;
            let sq = g.square(diff)?;
            let dist = g.row_sums(sq)?;
            let pos = g.scale(dist, -inv_t)?;
            // −‖r − m‖² = 2 r·m − ‖r‖² − ‖m‖²
            let cross = g.matmul_nt(r, n)?;
            let cross = g.scale(cross, 2.0)?;
            let r_sq = g.square(r)?;
            let r_norm = g.row_sums(r_sq)?;
            let r_norm = g.repeat_cols(r_norm, nn)?;
            let n_sq = g.square(n)?;
            let ones = g.constant(Tensor::filled(1, g.value(n).cols(), 1.0));
            let n_norm = g.matmul_nt(ones, n_sq)?;
            let n_norm = g.repeat_rows(n_norm, b)?;
            let neg = g.sub(cross, r_norm)?;
            let neg = g.sub(neg, n_norm)?;
            let neg = g.scale(neg, inv_t)?;
            Ok((pos, neg))
        }
    }
}

/// InfoNCE as a graph scalar.
pub fn infonce_node(g: &mut Graph, sim: Similarity, r: NodeId, p: NodeId, n: NodeId) -> Result<NodeId, DiffError> {
    let (pos, neg) = similarities(g, sim, r, p, n)?;
    let lse = g.logsumexp_rows(neg)?;
    let l = g.sub(lse, pos)?;
    g.mean(l)
}

struct StepGraph {
    graph: Graph,
    params: ParamNodes,
    loss: NodeId,
    /// Mean InfoNCE over terms (or MSE).
    fit: NodeId,
    reg: Option<NodeId>,
}

fn build_step(
    enc: &MlpEncoder,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: Option<&Tensor>,
    batch: &Batch,
    lambda: f64,
    trainable: bool,
    with_reg: bool,
) -> Result<StepGraph, DiffError> {
    let mut g = Graph::new();
    let params = enc.register(&mut g, trainable);
    let b = batch.reference.len();
    let mut rows: Vec<usize> = batch.reference.clone();
    for p in &batch.positives {
        rows.extend_from_slice(p);
    }
    rows.extend_from_slice(&batch.negatives);
    let xn = g.constant(x.select_rows(&rows));
    let fwd = enc.forward(&mut g, &params, xn)?;
    let emb = fwd.output;
    let reference = g.slice_rows(emb, 0, b)?;

    let fit = if cfg.mode == Mode::Regression {
        let c = labels.expect("regression needs labels");
        let target = g.constant(c.select_rows(&batch.reference));
        let diff = g.sub(reference, target)?;
        let sq = g.square(diff)?;
        g.mean(sq)?
    } else {
        let neg_start = b * (1 + batch.positives.len());
        let negatives = g.slice_rows(emb, neg_start, batch.negatives.len())?;
        let mut terms = Vec::with_capacity(batch.positives.len());
        for (k, _) in batch.positives.iter().enumerate() {
            let positive = g.slice_rows(emb, b * (k + 1), b)?;
            // Hybrid: the supervised term sees only the first partition.
            let (r, p, n) = if cfg.mode == Mode::Hybrid && k == 0 {
                let w = cfg.partition[0];
                (g.slice_cols(reference, 0, w)?, g.slice_cols(positive, 0, w)?, g.slice_cols(negatives, 0, w)?)
            } else {
                (reference, positive, negatives)
            };
            terms.push(infonce_node(&mut g, cfg.similarity, r, p, n)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        total
    };
    let n_terms = batch.positives.len().max(1);
    let fit_mean = g.scale(fit, 1.0 / n_terms as f64)?;

    let reg = if with_reg {
        let take = cfg.reg_batch.unwrap_or(b).min(b).max(1);
        let xr = g.constant(x.select_rows(&batch.reference[..take]));
        let fwd_r = enc.forward(&mut g, &params, xr)?;
        Some(enc.jacobian_frobenius_sq(&mut g, &params, &fwd_r)?)
    } else {
        None
    };
    let loss = match reg {
        Some(r) if lambda > 0.0 => {
            let weighted = g.scale(r, lambda)?;
            g.add(fit, weighted)?
        }
        _ => fit,
    };
    Ok(StepGraph { graph: g, params, loss, fit: fit_mean, reg })
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(enc: &MlpEncoder, lr: f64) -> Self {
        let zeros: Vec<Tensor> =
            enc.layers.iter().flat_map(|l| [Tensor::zeros(l.weight.rows(), l.weight.cols()), Tensor::zeros(1, l.bias.cols())]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, lr }
    }

    fn step(&mut self, enc: &mut MlpEncoder, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let targets = enc.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]);
        for (((p, g), m), v) in targets.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for k in 0..p.len() {
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g[k];
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Fresh encoder for `cfg` on inputs of width `input_dim`.
pub fn init_encoder(cfg: &TrainConfig, input_dim: usize) -> Result<MlpEncoder, TrainError> {
    let mut enc = MlpEncoder::init(
        rng::derive_seed(cfg.seed, &[tag::ENCODER]),
        input_dim,
        cfg.hidden_width,
        &cfg.partition,
        cfg.output_scale,
    )?;
    enc.seed = cfg.seed;
    if matches!(cfg.similarity, Similarity::Dot { .. }) {
        enc = enc.with_geometry(vec![Geometry::Sphere; cfg.partition.len()])?;
    }
    Ok(enc)
}

fn check_labels(cfg: &TrainConfig, labels: Option<&Tensor>) -> Result<(), TrainError> {
    if cfg.mode.needs_labels() && labels.is_none() {
        return Err(SamplingError::MissingLabels(cfg.mode).into());
    }
    if cfg.mode == Mode::Regression {
        let c = labels.expect("checked above");
        if c.cols() != cfg.output_dim() {
            return Err(TrainError::LabelWidth { labels: c.cols(), dims: cfg.output_dim() });
        }
    }
    Ok(())
}

/// Mean fit term (InfoNCE over terms, or MSE) of `enc` on `batches` fresh
/// batches drawn from a dedicated evaluation stream.
pub fn evaluate_loss(enc: &MlpEncoder, dataset: &Dataset, cfg: &TrainConfig, batches: usize) -> Result<f64, TrainError> {
    let labels = dataset.c.as_ref();
    check_labels(cfg, labels)?;
    let index = IndexedDataset::new(dataset.len(), labels)?;
    let eval_seed = rng::derive_seed(cfg.seed, &[tag::BATCH, u64::MAX]);
    let mut total = 0.0;
    for k in 0..batches.max(1) {
        let batch = index.build_batch(cfg.mode, cfg.batch_size, cfg.negatives, eval_seed, k as u64)?;
        let step = build_step(enc, cfg, &dataset.x, labels, &batch, 0.0, false, false)
            .map_err(|source| TrainError::NonFinite { step: usize::MAX, source })?;
        total += step.graph.value(step.fit).item();
    }
    Ok(total / batches.max(1) as f64)
}

/// Runs `cfg.steps` Adam updates on the regularized objective and logs a
/// trace row every `log_every` steps (and at the last step).
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let start = std::time::Instant::now();
    cfg.validate()?;
    let labels = dataset.c.as_ref();
    check_labels(cfg, labels)?;
    let index = IndexedDataset::new(dataset.len(), labels)?;
    let mut enc = init_encoder(cfg, dataset.x.cols())?;
    enc.check_input(&dataset.x)?;
    let mut adam = Adam::new(&enc, cfg.learning_rate);
    let log_n = (cfg.negatives as f64).ln();
    let mut rows = Vec::new();

    for step in 0..cfg.steps {
        let lambda = cfg.lambda_at(step);
        let log_now = step % cfg.log_every == 0 || step + 1 == cfg.steps;
        let batch = index.build_batch(cfg.mode, cfg.batch_size, cfg.negatives, cfg.seed, step as u64)?;
        let with_reg = lambda > 0.0 || (log_now && cfg.lambda_max > 0.0);
        let sg = build_step(&enc, cfg, &dataset.x, labels, &batch, lambda, true, with_reg)
            .map_err(|source| TrainError::NonFinite { step, source })?;
        let mut grads = sg.graph.backward(sg.loss).map_err(|source| TrainError::NonFinite { step, source })?;
        let grads: Vec<Tensor> = sg
            .params
            .iter()
            .map(|id| {
                let like = sg.graph.value(id);
                grads.take(id).unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
            })
            .collect();
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite { step, source: DiffError::NonFinite("gradient") });
        }
        if log_now {
            let fit = sg.graph.value(sg.fit).item();
            let reg = sg.reg.map_or(0.0, |r| sg.graph.value(r).item());
            let gof = if cfg.mode == Mode::Regression { f64::NAN } else { log_n - fit };
            rows.push(TraceRow { step, infonce: fit, reg, lambda, gof });
            log::debug!("step {step}: fit {fit:.4} reg {reg:.4} lambda {lambda:.3}");
        }
        adam.step(&mut enc, &grads);
    }
    enc.steps = cfg.steps as u64;
    let final_infonce = evaluate_loss(&enc, dataset, cfg, cfg.eval_batches)?;
    let trace = TrainTrace { negatives: cfg.negatives, rows, final_infonce, seconds: start.elapsed().as_secs_f64() };
    Ok(TrainOutcome { encoder: enc, trace })
}

#[cfg(test)]
mod tests;
