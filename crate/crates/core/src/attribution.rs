//! Attribution maps in `D × d` orientation: entry `(i, j)` scores input `i`
//! against embedding dimension `j`.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::BinaryMap;
use crate::diff::Tensor;
use crate::encoder::{EncoderError, Model};
use crate::linalg::pinv;
use crate::rng::{self, tag};

pub const DEFAULT_RANK_TOL: f64 = 1e-6;
pub const DEFAULT_SUBSAMPLE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NeuronGradient,
    InvertedNeuronGradient,
    IntegratedGradients,
    FeatureAblation,
    ShapleyZeros,
    ShapleyShuffle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NeuronGradient,
        Method::InvertedNeuronGradient,
        Method::IntegratedGradients,
        Method::FeatureAblation,
        Method::ShapleyZeros,
        Method::ShapleyShuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NeuronGradient => "neuron_gradient",
            Method::InvertedNeuronGradient => "inverted_neuron_gradient",
            Method::IntegratedGradients => "integrated_gradients",
            Method::FeatureAblation => "feature_ablation",
            Method::ShapleyZeros => "shapley_zeros",
            Method::ShapleyShuffle => "shapley_shuffle",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    /// Gradient methods are cheap enough to run on every timestep.
    pub fn is_gradient(self) -> bool {
        matches!(self, Method::NeuronGradient | Method::InvertedNeuronGradient)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Median,
}

/// Reference point for integrated gradients and feature ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Zeros,
    /// Per-feature mean over the attributed data.
    Mean,
}

/// Where absent features come from when sampling Shapley values.
#[derive(Clone, Copy, Debug)]
pub enum ShapleyBaseline<'a> {
    Zeros,
    /// Each absent feature takes its value from a random row, drawn afresh per
    /// permutation and feature.
    Shuffle(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttribution {
    pub method: Method,
    pub timestep: usize,
    /// `D × d`
    pub scores: Tensor,
    /// Numerical rank of the Jacobian (inverted neuron gradient only).
    pub rank: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("local maps disagree in shape: {0:?} vs {1:?}")]
    Shape([usize; 2], [usize; 2]),
    #[error("no local maps to aggregate")]
    Empty,
    #[error("integrated gradients needs at least 2 steps, got {0}")]
    Steps(usize),
    #[error("Shapley sampling needs at least one permutation")]
    Permutations,
    #[error("baseline has {got} entries, input has {want}")]
    Baseline { want: usize, got: usize },
    #[error(transparent)]
    Model(#[from] EncoderError),
}

fn row(x: &[f64]) -> Tensor {
    Tensor::new(1, x.len(), x.to_vec()).expect("row shape")
}

fn check_baseline(x: &[f64], baseline: &[f64]) -> Result<(), AttributionError> {
    if x.len() != baseline.len() {
        return Err(AttributionError::Baseline { want: x.len(), got: baseline.len() });
    }
    Ok(())
}

/// `J_f(x)ᵀ`.
pub fn neuron_gradient<M: Model + ?Sized>(model: &M, x: &[f64]) -> Result<LocalAttribution, AttributionError> {
    let j = model.jacobians(&row(x))?.pop().expect("one sample");
    Ok(LocalAttribution { method: Method::NeuronGradient, timestep: 0, scores: j.transpose(), rank: None })
}

/// Moore–Penrose pseudo-inverse `J_f(x)⁺`, already `D × d`. An all-zero
/// Jacobian gives a zero map with rank 0.
pub fn inverted_neuron_gradient<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    rank_tol: f64,
) -> Result<LocalAttribution, AttributionError> {
    let j = model.jacobians(&row(x))?.pop().expect("one sample");
    let p = pinv(&j, rank_tol);
    Ok(LocalAttribution { method: Method::InvertedNeuronGradient, timestep: 0, scores: p.matrix, rank: Some(p.rank) })
}

/// Midpoint-rule path integral of the Jacobian from `baseline` to `x`, scaled
/// by `x − baseline`.
pub fn integrated_gradients<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<LocalAttribution, AttributionError> {
    if steps < 2 {
        return Err(AttributionError::Steps(steps));
    }
    check_baseline(x, baseline)?;
    let dx: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let path = Tensor::from_fn(steps, x.len(), |k, i| baseline[i] + (k as f64 + 0.5) / steps as f64 * dx[i]);
    let jacs = model.jacobians(&path)?;
    let d = model.output_dim();
    let mut scores = Tensor::zeros(x.len(), d);
    for jac in &jacs {
        for j in 0..d {
            for i in 0..dx.len() {
                let v = scores.get(i, j) + jac.get(j, i);
                scores.set(i, j, v);
            }
        }
    }
    for i in 0..x.len() {
        for j in 0..d {
            let v = scores.get(i, j) * dx[i] / steps as f64;
            scores.set(i, j, v);
        }
    }
    Ok(LocalAttribution { method: Method::IntegratedGradients, timestep: 0, scores, rank: None })
}

/// `f_j(x) − f_j(x with input i set to baseline_i)`.
pub fn feature_ablation<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: &[f64],
) -> Result<LocalAttribution, AttributionError> {
    check_baseline(x, baseline)?;
    let dim = x.len();
    let probes = Tensor::from_fn(dim + 1, dim, |r, i| if r == i + 1 { baseline[i] } else { x[i] });
    let y = model.embed(&probes)?;
    let scores = Tensor::from_fn(dim, y.cols(), |i, j| y.get(0, j) - y.get(i + 1, j));
    Ok(LocalAttribution { method: Method::FeatureAblation, timestep: 0, scores, rank: None })
}

/// Permutation-sampling Shapley values. Each permutation adds features one at
/// a time to a coalition that starts from the baseline and credits every
/// feature with the change it causes.
pub fn shapley_sampled<M: Model + ?Sized>(
    model: &M,
    x: &[f64],
    baseline: ShapleyBaseline<'_>,
    permutations: usize,
    seed: u64,
) -> Result<LocalAttribution, AttributionError> {
    if permutations == 0 {
        return Err(AttributionError::Permutations);
    }
    let dim = x.len();
    if let ShapleyBaseline::Shuffle(pool) = baseline {
        if pool.cols() != dim || pool.rows() == 0 {
            return Err(AttributionError::Baseline { want: dim, got: pool.cols() });
        }
    }
    let mut rng = rng::stream(seed, &[tag::ATTRIBUTION]);
    let mut order: Vec<usize> = (0..dim).collect();
    let mut probes = Vec::with_capacity(permutations * (dim + 1) * dim);
    let mut orders = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        order.shuffle(&mut rng);
        let mut current: Vec<f64> = match baseline {
            ShapleyBaseline::Zeros => vec![0.0; dim],
            ShapleyBaseline::Shuffle(pool) => (0..dim).map(|i| pool.get(rng.random_range(0..pool.rows()), i)).collect(),
        };
        probes.extend_from_slice(&current);
        for &i in &order {
            current[i] = x[i];
            probes.extend_from_slice(&current);
        }
        orders.push(order.clone());
    }
    let probes = Tensor::new(permutations * (dim + 1), dim, probes).map_err(EncoderError::from)?;
    let y = model.embed(&probes)?;
    let d = y.cols();
    let mut scores = Tensor::zeros(dim, d);
    for (p, order) in orders.iter().enumerate() {
        let base = p * (dim + 1);
        for (k, &i) in order.iter().enumerate() {
            for j in 0..d {
                let v = scores.get(i, j) + y.get(base + k + 1, j) - y.get(base + k, j);
                scores.set(i, j, v);
            }
        }
    }
    let scores = scores.map(|v| v / permutations as f64);
    let method = match baseline {
        ShapleyBaseline::Zeros => Method::ShapleyZeros,
        ShapleyBaseline::Shuffle(_) => Method::ShapleyShuffle,
    };
    Ok(LocalAttribution { method, timestep: 0, scores, rank: None })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub rank_tol: f64,
    pub ig_steps: usize,
    pub baseline: Baseline,
    pub permutations: usize,
    pub aggregation: Aggregation,
    /// Timesteps for the perturbation and path methods.
    pub subsample: Option<usize>,
    /// Timesteps for the gradient methods; all when unset.
    pub gradient_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            ig_steps: 50,
            baseline: Baseline::Zeros,
            permutations: 10,
            aggregation: Aggregation::Sum,
            subsample: Some(DEFAULT_SUBSAMPLE),
            gradient_subsample: None,
            seed: 0,
        }
    }
}

impl AttributionConfig {
    /// Sorted timesteps that feed the global map of `method`.
    pub fn timesteps(&self, method: Method, len: usize) -> Vec<usize> {
        let limit = if method.is_gradient() { self.gradient_subsample } else { self.subsample };
        match limit {
            Some(k) if k < len => {
                let mut rng = rng::stream(self.seed, &[tag::SUBSAMPLE]);
                let mut idx = rand::seq::index::sample(&mut rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAttribution {
    pub method: Method,
    pub aggregation: Aggregation,
    /// Aggregated absolute scores, `D × d`.
    pub scores: Tensor,
    pub timesteps: usize,
    /// Smallest Jacobian rank seen (inverted neuron gradient only).
    pub min_rank: Option<usize>,
}

impl GlobalAttribution {
    /// Columns `cols` of the aggregated scores.
    pub fn select_cols(&self, cols: &[usize]) -> Tensor {
        Tensor::from_fn(self.scores.rows(), cols.len(), |i, j| self.scores.get(i, cols[j]))
    }
}

/// Element-wise aggregate of `|map|` over local maps.
pub fn aggregate_global(maps: &[Tensor], aggregation: Aggregation) -> Result<Tensor, AttributionError> {
    let first = maps.first().ok_or(AttributionError::Empty)?;
    if let Some(bad) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(AttributionError::Shape(first.shape(), bad.shape()));
    }
    let (rows, cols) = (first.rows(), first.cols());
    Ok(match aggregation {
        Aggregation::Sum | Aggregation::Mean => {
            let mut out = Tensor::zeros(rows, cols);
            for m in maps {
                for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
                    *o += v.abs();
                }
            }
            if aggregation == Aggregation::Mean {
                out = out.map(|v| v / maps.len() as f64);
            }
            out
        }
        Aggregation::Median => {
            let mut column = Vec::with_capacity(maps.len());
            Tensor::from_fn(rows, cols, |i, j| {
                column.clear();
                column.extend(maps.iter().map(|m| m.get(i, j).abs()));
                median_in_place(&mut column)
            })
        }
    })
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `1` where the score exceeds `eps`.
pub fn binarize(scores: &Tensor, eps: f64) -> BinaryMap {
    BinaryMap::from_fn(scores.rows(), scores.cols(), |i, j| scores.get(i, j) > eps)
}

/// Threshold at z-score 0: entries at or above the mean over the matrix.
/// Returns `None` when every score is equal, which leaves the z-score
/// undefined; callers fall back to an all-zero map.
pub fn zscore_threshold(scores: &Tensor) -> Option<BinaryMap> {
    let n = scores.len() as f64;
    let mean = scores.data().iter().sum::<f64>() / n;
    let var = scores.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return None;
    }
    let sd = var.sqrt();
    Some(BinaryMap::from_fn(scores.rows(), scores.cols(), |i, j| (scores.get(i, j) - mean) / sd >= 0.0))
}

/// Like [`zscore_threshold`] but logs and returns an all-zero map for
/// constant scores.
pub fn zscore_binarize(scores: &Tensor) -> BinaryMap {
    zscore_threshold(scores).unwrap_or_else(|| {
        log::warn!("constant attribution scores: z-score undefined, returning an empty map");
        BinaryMap::from_fn(scores.rows(), scores.cols(), |_, _| false)
    })
}

/// Rows handled per parallel work item.
const CHUNK: usize = 256;

fn local_maps<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    rows: &[usize],
    method: Method,
    cfg: &AttributionConfig,
    baseline: &[f64],
) -> Result<Vec<(Tensor, Option<usize>)>, AttributionError> {
    if method.is_gradient() {
        let jacs = model.jacobians(&x.select_rows(rows))?;
        return Ok(jacs
            .into_iter()
            .map(|j| match method {
                Method::NeuronGradient => (j.transpose(), None),
                _ => {
                    let p = pinv(&j, cfg.rank_tol);
                    (p.matrix, Some(p.rank))
                }
            })
            .collect());
    }
    rows.iter()
        .map(|&t| {
            let xt = x.row(t);
            let local = match method {
                Method::IntegratedGradients => integrated_gradients(model, xt, baseline, cfg.ig_steps)?,
                Method::FeatureAblation => feature_ablation(model, xt, baseline)?,
                Method::ShapleyZeros => {
                    shapley_sampled(model, xt, ShapleyBaseline::Zeros, cfg.permutations, rng::derive_seed(cfg.seed, &[t as u64]))?
                }
                Method::ShapleyShuffle => shapley_sampled(
                    model,
                    xt,
                    ShapleyBaseline::Shuffle(x),
                    cfg.permutations,
                    rng::derive_seed(cfg.seed, &[t as u64]),
                )?,
                _ => unreachable!("gradient methods handled above"),
            };
            Ok((local.scores, None))
        })
        .collect()
}

/// Global map of `method` over the rows of `x`. Local maps are computed in
/// parallel chunks and combined in a fixed order, so the result does not
/// depend on the thread count.
pub fn attribute<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    method: Method,
    cfg: &AttributionConfig,
) -> Result<GlobalAttribution, AttributionError> {
    let rows = cfg.timesteps(method, x.rows());
    if rows.is_empty() {
        return Err(AttributionError::Empty);
    }
    let baseline = match cfg.baseline {
        Baseline::Zeros => vec![0.0; x.cols()],
        Baseline::Mean => (0..x.cols()).map(|i| (0..x.rows()).map(|t| x.get(t, i)).sum::<f64>() / x.rows() as f64).collect(),
    };
    let chunks: Vec<Vec<(Tensor, Option<usize>)>> = rows
        .par_chunks(CHUNK)
        .map(|chunk| local_maps(model, x, chunk, method, cfg, &baseline))
        .collect::<Result<_, _>>()?;
    let min_rank = chunks.iter().flatten().filter_map(|(_, r)| *r).min();
    let scores = match cfg.aggregation {
        Aggregation::Median => {
            let maps: Vec<Tensor> = chunks.into_iter().flatten().map(|(m, _)| m).collect();
            aggregate_global(&maps, Aggregation::Median)?
        }
        agg => {
            let partial: Vec<Tensor> = chunks
                .into_iter()
                .map(|c| {
                    let maps: Vec<Tensor> = c.into_iter().map(|(m, _)| m).collect();
                    aggregate_global(&maps, Aggregation::Sum)
                })
                .collect::<Result<_, _>>()?;
            let total = aggregate_global(&partial, Aggregation::Sum)?;
            if agg == Aggregation::Mean {
                total.map(|v| v / rows.len() as f64)
            } else {
                total
            }
        }
    };
    Ok(GlobalAttribution { method, aggregation: cfg.aggregation, scores, timesteps: rows.len(), min_rank })
}

#[cfg(test)]
mod tests;
