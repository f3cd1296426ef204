//! Positive / negative index sampling for contrastive training.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Adjacent timesteps are positives.
    Time,
    /// Positives matched through empirical label deltas.
    Supervised,
    /// Supervised positives for the first partition, time positives for the
    /// whole embedding.
    Hybrid,
    /// Plain least-squares regression onto the labels; no positives.
    Regression,
}

impl Mode {
    pub fn needs_labels(self) -> bool {
        !matches!(self, Mode::Time)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Time => "time",
            Mode::Supervised => "supervised",
            Mode::Hybrid => "hybrid",
            Mode::Regression => "regression",
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SamplingError {
    #[error("timestep {t} has no successor in a series of length {len}")]
    SeriesEnd { t: usize, len: usize },
    #[error("mode {0:?} needs labels")]
    MissingLabels(Mode),
    #[error("need at least two timesteps")]
    TooShort,
    #[error("batch and negative counts must be positive")]
    EmptyBatch,
    #[error("labels have {labels} rows but observations have {rows}")]
    LabelRows { labels: usize, rows: usize },
}

pub fn time_positive(t: usize, len: usize) -> Result<usize, SamplingError> {
    if t + 1 < len {
        Ok(t + 1)
    } else {
        Err(SamplingError::SeriesEnd { t, len })
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `c` closest to `target`; ties go to the smallest
/// index.
pub fn nearest_by_scan(c: &Tensor, target: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for r in 0..c.rows() {
        let d = sq_dist(c.row(r), target);
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Uniform bucket grid over 1–3-D labels for exact nearest-row queries.
#[derive(Clone, Debug)]
pub struct GridIndex {
    dims: usize,
    origin: [f64; 3],
    cell: f64,
    extent: [i64; 3],
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl GridIndex {
    pub const MAX_DIMS: usize = 3;

    /// `None` for label widths the index does not cover.
    pub fn build(c: &Tensor) -> Option<GridIndex> {
        let dims = c.cols();
        if dims == 0 || dims > Self::MAX_DIMS || c.rows() == 0 || !c.is_finite() {
            return None;
        }
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..dims {
            lo[k] = (0..c.rows()).map(|r| c.get(r, k)).fold(f64::INFINITY, f64::min);
            hi[k] = (0..c.rows()).map(|r| c.get(r, k)).fold(f64::NEG_INFINITY, f64::max);
        }
        let span = (0..dims).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-12);
        let per_axis = ((c.rows() as f64 / 4.0).powf(1.0 / dims as f64)).ceil().max(1.0);
        let cell = span / per_axis;
        let mut index = GridIndex { dims, origin: lo, cell, extent: [0; 3], buckets: HashMap::new() };
        for k in 0..dims {
            index.extent[k] = ((hi[k] - lo[k]) / cell).floor() as i64;
        }
        for r in 0..c.rows() {
            let key = index.key(c.row(r));
            index.buckets.entry(key).or_default().push(r);
        }
        Some(index)
    }

    fn coord(&self, v: f64, k: usize) -> i64 {
        ((v - self.origin[k]) / self.cell).floor() as i64
    }

    fn key(&self, v: &[f64]) -> [i64; 3] {
        let mut key = [0; 3];
        for k in 0..self.dims {
            key[k] = self.coord(v[k], k);
        }
        key
    }

    /// Same answer as [`nearest_by_scan`], including the tie-break.
    pub fn nearest(&self, c: &Tensor, target: &[f64]) -> usize {
        // Queries outside the occupied grid start from the nearest edge cell;
        // the margin test below then stays negative until every cell has been
        // visited, so the answer remains exact.
        let mut centre = self.key(target);
        for k in 0..self.dims {
            centre[k] = centre[k].clamp(0, self.extent[k]);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        let max_r = (0..self.dims).map(|k| centre[k].max(self.extent[k] - centre[k])).max().unwrap_or(0);
        for r in 0..=max_r {
            self.visit_ring(centre, r, &mut |bucket| {
                for &i in bucket {
                    let d = sq_dist(c.row(i), target);
                    if d < best.0 || (d == best.0 && i < best.1) {
                        best = (d, i);
                    }
                }
            });
            // Anything outside the searched box is at least this far away.
            let mut margin = f64::INFINITY;
            for k in 0..self.dims {
                let lo = self.origin[k] + (centre[k] - r) as f64 * self.cell;
                let hi = self.origin[k] + (centre[k] + r + 1) as f64 * self.cell;
                margin = margin.min(target[k] - lo).min(hi - target[k]);
            }
            if best.1 != usize::MAX && margin > 0.0 && best.0 < margin * margin {
                break;
            }
        }
        best.1
    }

    fn visit_ring(&self, centre: [i64; 3], r: i64, f: &mut impl FnMut(&[usize])) {
        let span = |k: usize| if k < self.dims { -r..=r } else { 0..=0 };
        for a in span(0) {
            for b in span(1) {
                for c in span(2) {
                    if a.abs().max(b.abs()).max(c.abs()) != r {
                        continue;
                    }
                    let key = [centre[0] + a, centre[1] + b, centre[2] + c];
                    if let Some(bucket) = self.buckets.get(&key) {
                        f(bucket);
                    }
                }
            }
        }
    }
}

/// Observations plus labels and the empirical label deltas
/// `Δ_t = c⁽ᵗ⁺¹⁾ − c⁽ᵗ⁾`.
#[derive(Clone, Debug)]
pub struct IndexedDataset<'a> {
    pub len: usize,
    pub labels: Option<&'a Tensor>,
    pub deltas: Option<Tensor>,
    index: Option<GridIndex>,
}

impl<'a> IndexedDataset<'a> {
    pub fn new(len: usize, labels: Option<&'a Tensor>) -> Result<Self, SamplingError> {
        if len < 2 {
            return Err(SamplingError::TooShort);
        }
        if let Some(c) = labels {
            if c.rows() != len {
                return Err(SamplingError::LabelRows { labels: c.rows(), rows: len });
            }
        }
        let deltas = labels.map(|c| Tensor::from_fn(len - 1, c.cols(), |t, k| c.get(t + 1, k) - c.get(t, k)));
        let index = labels.and_then(GridIndex::build);
        Ok(Self { len, labels, deltas, index })
    }

    /// Drops the bucket index so every query is a linear scan.
    pub fn without_index(mut self) -> Self {
        self.index = None;
        self
    }

    /// `argmin_t' ‖c⁽ᵗ'⁾ − (c⁽ᵗ⁾ + Δ_τ)‖`.
    pub fn supervised_positive_for(&self, t: usize, tau: usize) -> Result<usize, SamplingError> {
        let (c, deltas) = match (self.labels, &self.deltas) {
            (Some(c), Some(d)) => (c, d),
            _ => return Err(SamplingError::MissingLabels(Mode::Supervised)),
        };
        let target: Vec<f64> = c.row(t).iter().zip(deltas.row(tau)).map(|(a, b)| a + b).collect();
        Ok(match &self.index {
            Some(index) => index.nearest(c, &target),
            None => nearest_by_scan(c, &target),
        })
    }

    /// Draws `τ` uniformly over the deltas and returns the matched index.
    pub fn sample_supervised_positive(&self, t: usize, rng: &mut ChaCha8Rng) -> Result<usize, SamplingError> {
        let tau = rng.random_range(0..self.len - 1);
        self.supervised_positive_for(t, tau)
    }

    pub fn sample_negatives(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    /// One training batch. References avoid the last timestep whenever a
    /// time positive is needed. Negatives are shared across the batch.
    pub fn build_batch(&self, mode: Mode, b: usize, n: usize, seed: u64, step: u64) -> Result<Batch, SamplingError> {
        if b == 0 || (n == 0 && mode != Mode::Regression) {
            return Err(SamplingError::EmptyBatch);
        }
        if mode.needs_labels() && self.labels.is_none() {
            return Err(SamplingError::MissingLabels(mode));
        }
        let mut rng = rng::stream(seed, &[tag::BATCH, step]);
        let upper = match mode {
            Mode::Time | Mode::Hybrid => self.len - 1,
            Mode::Supervised | Mode::Regression => self.len,
        };
        let reference: Vec<usize> = (0..b).map(|_| rng.random_range(0..upper)).collect();
        let mut positives = Vec::new();
        let mut taus = Vec::new();
        if matches!(mode, Mode::Supervised | Mode::Hybrid) {
            taus = (0..b).map(|_| rng.random_range(0..self.len - 1)).collect();
            let sup = reference
                .par_iter()
                .zip(&taus)
                .map(|(&t, &tau)| self.supervised_positive_for(t, tau))
                .collect::<Result<Vec<_>, _>>()?;
            positives.push(sup);
        }
        if matches!(mode, Mode::Time | Mode::Hybrid) {
            positives.push(reference.iter().map(|&t| t + 1).collect());
        }
        let negatives = if mode == Mode::Regression { Vec::new() } else { self.sample_negatives(n, &mut rng) };
        Ok(Batch { mode, reference, positives, negatives, taus })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mode: Mode,
    pub reference: Vec<usize>,
    /// One index set per loss term: `[supervised]`, `[time]` or
    /// `[supervised, time]` for hybrid.
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<usize>,
    /// Delta index drawn per reference for supervised positives.
    pub taus: Vec<usize>,
}
