//! Scores and identifiability diagnostics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryMap, Dataset};
use crate::diff::Tensor;
use crate::encoder::Model;
use crate::linalg::{least_squares, LeastSquares};
use crate::rng::{self, tag};
use crate::trainer::{train, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth has a single class ({positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("scores are {scores:?}, ground truth is {truth:?}")]
    Shape { scores: [usize; 2], truth: [usize; 2] },
    #[error("need more than {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("embedding is constant: the model collapsed")]
    Degenerate,
    #[error("no values")]
    Empty,
    #[error("partition sums to {got}, data has {want} columns")]
    Partition { want: usize, got: usize },
    #[error("need at least two seeds per cell")]
    Seeds,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Descending; the first point (`+∞`) classifies nothing as positive.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auroc: f64,
}

/// Mann–Whitney estimate with midranks for ties: the probability that a
/// random positive outscores a random negative, ties counting one half.
pub fn auroc_values(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, total: labels.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        // ranks k+1 ..= end share their mean
        let mid = (k + 1 + end) as f64 / 2.0;
        rank_sum += mid * order[k..end].iter().filter(|&&i| labels[i]).count() as f64;
        k = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC curve of `scores` against a binary map of the same shape.
pub fn auroc(scores: &Tensor, truth: &BinaryMap) -> Result<RocCurve, EvalError> {
    if scores.shape() != [truth.rows(), truth.cols()] {
        return Err(EvalError::Shape { scores: scores.shape(), truth: [truth.rows(), truth.cols()] });
    }
    let labels: Vec<bool> = truth.data().iter().map(|&v| v == 1).collect();
    let value = auroc_values(scores.data(), &labels)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores.data()[b].total_cmp(&scores.data()[a]));
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let negatives = labels.len() as f64 - positives;
    let (mut thresholds, mut tpr, mut fpr) = (vec![f64::INFINITY], vec![0.0], vec![0.0]);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores.data()[order[k]];
        while k < order.len() && scores.data()[order[k]] == s {
            if labels[order[k]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        thresholds.push(s);
        tpr.push(tp / positives);
        fpr.push(fp / negatives);
    }
    Ok(RocCurve { thresholds, tpr, fpr, auroc: value })
}

/// Trapezoid area under a curve given by `(fpr, tpr)` points.
pub fn trapezoid(fpr: &[f64], tpr: &[f64]) -> f64 {
    fpr.windows(2).zip(tpr.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[1] + y[0]) / 2.0).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    pub r2: f64,
    /// Set when the design was rank-deficient and a small ridge was used.
    pub regularized: bool,
}

/// Variance-weighted R² of `target` predicted from `fit` on `design`:
/// `1 − Σ residual² / Σ (y − ȳ)²` pooled over target columns.
fn pooled_r2(fit: &LeastSquares, design: &Tensor, target: &Tensor) -> f64 {
    let pred = fit.predict(design);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for c in 0..target.cols() {
        let mean = (0..target.rows()).map(|r| target.get(r, c)).sum::<f64>() / target.rows() as f64;
        for r in 0..target.rows() {
            ss_res += (target.get(r, c) - pred.get(r, c)).powi(2);
            ss_tot += (target.get(r, c) - mean).powi(2);
        }
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// R² of an ordinary least-squares fit (with intercept) of `c` on the
/// embedding.
pub fn linear_decode_r2(embedding: &Tensor, c: &Tensor) -> Result<R2, EvalError> {
    if embedding.rows() <= embedding.cols() + 1 {
        return Err(EvalError::TooFewRows { need: embedding.cols() + 1, got: embedding.rows() });
    }
    if embedding.rows() != c.rows() {
        return Err(EvalError::Shape { scores: embedding.shape(), truth: c.shape() });
    }
    let fit = least_squares(embedding, c);
    Ok(R2 { r2: pooled_r2(&fit, embedding, c), regularized: fit.regularized })
}

fn is_constant(t: &Tensor) -> bool {
    (0..t.cols()).all(|c| (1..t.rows()).all(|r| t.get(r, c) == t.get(0, c)))
}

/// R² of the best affine map from `a` to `b`.
pub fn affine_alignment_r2(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    if a.rows() != b.rows() {
        return Err(EvalError::Shape { scores: a.shape(), truth: b.shape() });
    }
    if a.rows() <= a.cols() + 1 {
        return Err(EvalError::TooFewRows { need: a.cols() + 1, got: a.rows() });
    }
    if is_constant(a) || is_constant(b) {
        return Err(EvalError::Degenerate);
    }
    Ok(pooled_r2(&least_squares(a, b), a, b))
}

/// Mean of the two alignment directions.
pub fn symmetric_alignment_r2(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    Ok(0.5 * (affine_alignment_r2(a, b)? + affine_alignment_r2(b, a)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Affine map from the full embedding to the latents, `d × k`.
    pub map: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    /// R² of latent block `i` from embedding slice `i`.
    pub within: Vec<f64>,
    /// R² of latent block `i` from the whole embedding minus `within[i]`:
    /// what the other slices add.
    pub leakage: Vec<f64>,
}

fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    t.slice_cols(start, len)
}

fn offsets(partition: &[usize]) -> Vec<usize> {
    partition
        .iter()
        .scan(0, |acc, &p| {
            let s = *acc;
            *acc += p;
            Some(s)
        })
        .collect()
}

/// Block-wise identifiability check: slice `i` of the embedding should be an
/// affine image of latent block `i` alone.
pub fn block_alignment(
    embedding: &Tensor,
    z: &Tensor,
    emb_partition: &[usize],
    z_partition: &[usize],
) -> Result<AlignmentResult, EvalError> {
    let emb_total: usize = emb_partition.iter().sum();
    let z_total: usize = z_partition.iter().sum();
    if emb_total != embedding.cols() {
        return Err(EvalError::Partition { want: embedding.cols(), got: emb_total });
    }
    if z_total != z.cols() || emb_partition.len() != z_partition.len() {
        return Err(EvalError::Partition { want: z.cols(), got: z_total });
    }
    let full = least_squares(embedding, z);
    let (eo, zo) = (offsets(emb_partition), offsets(z_partition));
    let mut within = Vec::new();
    let mut leakage = Vec::new();
    for i in 0..emb_partition.len() {
        let target = columns(z, zo[i], z_partition[i]);
        let slice = columns(embedding, eo[i], emb_partition[i]);
        let own = pooled_r2(&least_squares(&slice, &target), &slice, &target);
        let all = pooled_r2(&least_squares(embedding, &target), embedding, &target);
        within.push(own);
        leakage.push((all - own).max(0.0));
    }
    let map = (0..full.coef.rows()).map(|r| full.coef.row(r).to_vec()).collect();
    Ok(AlignmentResult { map, intercept: full.intercept, within, leakage })
}

/// Mean per-dimension variance of the embedding over `output_scale²`: about
/// 1/3 for an embedding spread uniformly over the box, 0 when collapsed.
pub fn collapse_score(embedding: &Tensor, output_scale: f64) -> f64 {
    let (n, d) = (embedding.rows(), embedding.cols());
    if n < 2 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..d {
        // shifted by the first row so a constant column is exactly zero
        let x0 = embedding.get(0, c);
        let mean = (0..n).map(|r| embedding.get(r, c) - x0).sum::<f64>() / n as f64;
        total += (0..n).map(|r| (embedding.get(r, c) - x0 - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / d as f64 / (output_scale * output_scale)
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), EvalError> {
    if values.is_empty() || resamples == 0 {
        return Err(EvalError::Empty);
    }
    let mut rng = rng::stream(seed, &[tag::BOOTSTRAP]);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| {
        let pos = q * (resamples - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        means[lo] + (pos - lo as f64) * (means[hi] - means[lo])
    };
    Ok((at(alpha), at(1.0 - alpha)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    pub dim: usize,
    pub consistency: f64,
    /// Symmetric alignment R² of every unordered seed pair.
    pub pairs: Vec<f64>,
    /// Final InfoNCE of each seed.
    pub infonce: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub cells: Vec<ScanCell>,
}

impl ScanResult {
    /// Dimension with the highest consistency; the smaller one on ties.
    pub fn best_dim(&self) -> Option<usize> {
        self.cells
            .iter()
            .fold(None::<&ScanCell>, |best, c| match best {
                Some(b) if b.consistency >= c.consistency => Some(b),
                _ => Some(c),
            })
            .map(|c| c.dim)
    }
}

/// Partition used for a total embedding size in a scan.
pub fn scan_partition(base: &TrainConfig, dim: usize) -> Vec<usize> {
    match base.mode {
        crate::sampling::Mode::Hybrid => {
            let sup = base.partition[0].min(dim.saturating_sub(1)).max(1);
            vec![sup, dim - sup]
        }
        _ => vec![dim],
    }
}

/// Trains one model per `(dim, seed)` and scores each dimension by the mean
/// pairwise affine consistency of the embeddings on `eval_rows` timesteps.
pub fn dimensionality_scan(
    dataset: &Dataset,
    dims: &[usize],
    seeds: &[u64],
    base: &TrainConfig,
    eval_rows: Option<usize>,
) -> Result<ScanResult, EvalError> {
    if seeds.len() < 2 {
        return Err(EvalError::Seeds);
    }
    let rows: Vec<usize> = match eval_rows {
        Some(k) if k < dataset.len() => {
            let mut idx = rand::seq::index::sample(&mut rng::stream(base.seed, &[tag::SUBSAMPLE]), dataset.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..dataset.len()).collect(),
    };
    let x_eval = dataset.x.select_rows(&rows);
    let jobs: Vec<(usize, u64)> = dims.iter().flat_map(|&d| seeds.iter().map(move |&s| (d, s))).collect();
    let runs: Vec<(Tensor, f64)> = jobs
        .par_iter()
        .map(|&(dim, seed)| {
            let cfg = TrainConfig { partition: scan_partition(base, dim), seed, ..base.clone() };
            let out = train(dataset, &cfg)?;
            let emb = out.encoder.embed(&x_eval).map_err(TrainError::from)?;
            Ok((emb, out.trace.final_infonce))
        })
        .collect::<Result<_, EvalError>>()?;
    let mut cells = Vec::with_capacity(dims.len());
    for (k, &dim) in dims.iter().enumerate() {
        let group = &runs[k * seeds.len()..(k + 1) * seeds.len()];
        let mut pairs = Vec::new();
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                // a collapsed seed is maximally inconsistent
                pairs.push(symmetric_alignment_r2(&group[a].0, &group[b].0).unwrap_or(0.0));
            }
        }
        let consistency = pairs.iter().sum::<f64>() / pairs.len() as f64;
        cells.push(ScanCell { dim, consistency, pairs, infonce: group.iter().map(|g| g.1).collect() });
    }
    Ok(ScanResult { cells })
}
