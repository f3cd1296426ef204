//! Ground-truth synthetic time series: Brownian latents in `[-1, 1]^d`,
//! block-structured injective mixing with known connectivity, and the
//! resulting attribution map.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryMap, Dataset, DatasetMeta, GeneratorKind, Link, MixingKind};
use crate::diff::Tensor;
use crate::linalg;
use crate::rng::{self, tag};

/// Brownian step size in box units; a trajectory crosses the box in roughly
/// forty steps' worth of diffusion scale.
pub const DEFAULT_SIGMA: f64 = 0.025;
pub const DEFAULT_BLOCK_OUT: usize = 25;
const MAX_DRAWS: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("need at least two timesteps, got {0}")]
    TooShort(usize),
    #[error("partition must be non-empty with positive group sizes")]
    Partition,
    #[error("sigma must be finite and non-negative")]
    Sigma,
    #[error("observed group {0} out of range")]
    Observed(usize),
    #[error("block {block} maps {inputs} latents to only {outputs} outputs")]
    NotExpanding { block: usize, inputs: usize, outputs: usize },
    #[error("block {0} has no inputs or an input index out of range")]
    BlockInputs(usize),
    #[error("expansion matrix stayed rank-deficient after {MAX_DRAWS} draws")]
    RankDeficient,
}

#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    /// `T × d`, every entry in `[-1, 1]`.
    pub z: Tensor,
    pub partition: Vec<usize>,
    pub sigma: f64,
}

/// Draw from `N(mean, sigma²)` truncated to `[lo, hi]` by rejection.
pub fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    if sigma == 0.0 {
        return mean.clamp(lo, hi);
    }
    loop {
        let eps: f64 = StandardNormal.sample(rng);
        let v = mean + sigma * eps;
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// Brownian motion in the box: `z⁽¹⁾` uniform, then truncated-normal steps.
/// Each latent group has its own random stream, so groups evolve
/// independently.
pub fn sample_latents(t: usize, partition: &[usize], sigma: f64, seed: u64) -> Result<LatentTrajectory, SynthError> {
    if t < 2 {
        return Err(SynthError::TooShort(t));
    }
    if partition.is_empty() || partition.contains(&0) {
        return Err(SynthError::Partition);
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(SynthError::Sigma);
    }
    let d: usize = partition.iter().sum();
    let mut z = Tensor::zeros(t, d);
    let mut col = 0;
    for (group, &size) in partition.iter().enumerate() {
        let mut rng = rng::stream(seed, &[tag::LATENTS, group as u64]);
        for k in col..col + size {
            z.set(0, k, rng.random_range(-1.0..=1.0));
        }
        for step in 1..t {
            for k in col..col + size {
                let prev = z.get(step - 1, k);
                z.set(step, k, truncated_normal(&mut rng, prev, sigma, -1.0, 1.0));
            }
        }
        col += size;
    }
    Ok(LatentTrajectory { z, partition: partition.to_vec(), sigma })
}

/// `u ↦ u + tanh(u)`, strictly increasing with slope in `[1, 2]`.
#[inline]
fn lift(u: f64) -> f64 {
    u + u.tanh()
}

#[inline]
fn lift_d1(u: f64) -> f64 {
    let t = u.tanh();
    2.0 - t * t
}

/// One output block `x_P = g(z_P)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingBlock {
    /// Latent indices feeding this block.
    pub inputs: Vec<usize>,
    /// Square `k × k` maps applied before each nonlinearity.
    pub first: Tensor,
    pub second: Tensor,
    /// `n × k` full-column-rank expansion to the block's outputs.
    pub expansion: Tensor,
    pub kind: MixingKind,
}

impl MixingBlock {
    pub fn output_dim(&self) -> usize {
        self.expansion.rows()
    }

    fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
        (0..m.rows()).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    /// Block output for one latent vector (full `d`-vector).
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let zp: Vec<f64> = self.inputs.iter().map(|&i| z[i]).collect();
        match self.kind {
            MixingKind::Linear => Self::matvec(&self.expansion, &zp),
            MixingKind::Nonlinear => {
                let h: Vec<f64> = Self::matvec(&self.first, &zp).into_iter().map(lift).collect();
                let h: Vec<f64> = Self::matvec(&self.second, &h).into_iter().map(lift).collect();
                Self::matvec(&self.expansion, &h)
            }
        }
    }

    /// `n × |inputs|` Jacobian with respect to the block's own inputs.
    pub fn local_jacobian(&self, z: &[f64]) -> Tensor {
        let zp: Vec<f64> = self.inputs.iter().map(|&i| z[i]).collect();
        match self.kind {
            MixingKind::Linear => self.expansion.clone(),
            MixingKind::Nonlinear => {
                let u1 = Self::matvec(&self.first, &zp);
                let h1: Vec<f64> = u1.iter().copied().map(lift).collect();
                let u2 = Self::matvec(&self.second, &h1);
                let k = zp.len();
                // diag(lift'(u2))·second·diag(lift'(u1))·first
                let inner = Tensor::from_fn(k, k, |i, j| lift_d1(u1[i]) * self.first.get(i, j));
                let mid = self.second.matmul(&inner).expect("square blocks");
                let outer = Tensor::from_fn(k, k, |i, j| lift_d1(u2[i]) * mid.get(i, j));
                self.expansion.matmul(&outer).expect("expansion width matches")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingFunction {
    pub blocks: Vec<MixingBlock>,
    pub latent_dim: usize,
}

impl MixingFunction {
    pub fn output_dim(&self) -> usize {
        self.blocks.iter().map(MixingBlock::output_dim).sum()
    }

    /// Concatenated block outputs for every row of `z`.
    pub fn mix(&self, z: &Tensor) -> Tensor {
        let dim = self.output_dim();
        let mut data = Vec::with_capacity(z.rows() * dim);
        for r in 0..z.rows() {
            for b in &self.blocks {
                data.extend(b.apply(z.row(r)));
            }
        }
        Tensor::new(z.rows(), dim, data).expect("block outputs fill the row")
    }

    /// `D × d` Jacobian of the whole mixing at one latent vector.
    pub fn jacobian(&self, z: &[f64]) -> Tensor {
        let mut jac = Tensor::zeros(self.output_dim(), self.latent_dim);
        let mut row = 0;
        for b in &self.blocks {
            let local = b.local_jacobian(z);
            for i in 0..local.rows() {
                for (k, &col) in b.inputs.iter().enumerate() {
                    jac.set(row + i, col, local.get(i, k));
                }
            }
            row += local.rows();
        }
        jac
    }

    /// `A[i, j] = 1` iff latent `j` feeds the block that produces output `i`.
    pub fn ground_truth_map(&self) -> BinaryMap {
        let mut owner = Vec::with_capacity(self.output_dim());
        for (b, block) in self.blocks.iter().enumerate() {
            owner.extend(std::iter::repeat_n(b, block.output_dim()));
        }
        BinaryMap::from_fn(self.output_dim(), self.latent_dim, |i, j| self.blocks[owner[i]].inputs.contains(&j))
    }
}

/// Input sets where block `k` reads latent groups `0..=k`: the first block
/// sees only the first group, the last block sees everything.
pub fn nested_inputs(partition: &[usize]) -> Vec<Vec<usize>> {
    let mut end = 0;
    partition
        .iter()
        .map(|&size| {
            end += size;
            (0..end).collect()
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Random orthogonal matrix with singular values in `[0.5, 1.5]`.
fn well_conditioned(rng: &mut ChaCha8Rng, k: usize) -> Tensor {
    let g = gaussian(rng, k, k, 1.0);
    let q = linalg::to_na(&g).qr().q();
    let scales: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let m = DMatrix::from_fn(k, k, |i, j| q[(i, j)] * scales[j]);
    linalg::from_na(&m)
}

/// Builds one block per input set. Nonlinear blocks are
/// `expansion ∘ lift ∘ second ∘ lift ∘ first`, injective because every stage
/// is injective; linear blocks are the expansion alone.
pub fn build_mixing(
    inputs: &[Vec<usize>],
    out_dims: &[usize],
    latent_dim: usize,
    kind: MixingKind,
    seed: u64,
) -> Result<MixingFunction, SynthError> {
    let mut blocks = Vec::with_capacity(inputs.len());
    for (b, (ins, &n)) in inputs.iter().zip(out_dims).enumerate() {
        let k = ins.len();
        if k == 0 || ins.iter().any(|&i| i >= latent_dim) {
            return Err(SynthError::BlockInputs(b));
        }
        if n < k {
            return Err(SynthError::NotExpanding { block: b, inputs: k, outputs: n });
        }
        let mut rng = rng::stream(seed, &[tag::MIXING, b as u64]);
        let first = well_conditioned(&mut rng, k);
        let second = well_conditioned(&mut rng, k);
        let expansion = (0..MAX_DRAWS)
            .map(|_| gaussian(&mut rng, n, k, 1.0 / (k as f64).sqrt()))
            .find(|e| {
                let s = linalg::singular_values(e);
                s.len() == k && s[k - 1] > 1e-3 * s[0]
            })
            .ok_or(SynthError::RankDeficient)?;
        blocks.push(MixingBlock { inputs: ins.clone(), first, second, expansion, kind });
    }
    Ok(MixingFunction { blocks, latent_dim })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub t: usize,
    pub partition: Vec<usize>,
    pub observed: Vec<usize>,
    pub sigma: f64,
    pub seed: u64,
    pub link: Link,
    pub mixing: MixingKind,
    /// Outputs per block; defaults to 25 per block.
    pub block_out_dims: Option<Vec<usize>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t: 20_000,
            partition: vec![2, 2],
            observed: vec![1],
            sigma: DEFAULT_SIGMA,
            seed: 0,
            link: Link::Identity,
            mixing: MixingKind::Nonlinear,
            block_out_dims: None,
        }
    }
}

impl SynthConfig {
    /// 100k samples of a 3+3 latent space mixed into 50 observed dimensions.
    pub fn full_scale(seed: u64) -> Self {
        Self { t: 100_000, partition: vec![3, 3], seed, ..Self::default() }
    }
}

/// Generates latents, draws a fresh mixing function, and bundles
/// observations, labels `c = γ⁻¹(z_observed)`, latents and the ground-truth
/// map. Both the latents and the mixing are redrawn per seed.
pub fn make_dataset(cfg: &SynthConfig) -> Result<(Dataset, MixingFunction), SynthError> {
    if let Some(&bad) = cfg.observed.iter().find(|&&g| g >= cfg.partition.len()) {
        return Err(SynthError::Observed(bad));
    }
    let traj = sample_latents(cfg.t, &cfg.partition, cfg.sigma, cfg.seed)?;
    let latent_dim: usize = cfg.partition.iter().sum();
    let inputs = nested_inputs(&cfg.partition);
    let out_dims = cfg.block_out_dims.clone().unwrap_or_else(|| vec![DEFAULT_BLOCK_OUT; inputs.len()]);
    if out_dims.len() != inputs.len() {
        return Err(SynthError::BlockInputs(out_dims.len().min(inputs.len())));
    }
    let mixing = build_mixing(&inputs, &out_dims, latent_dim, cfg.mixing, cfg.seed)?;
    let x = mixing.mix(&traj.z);

    let offsets: Vec<usize> = cfg.partition.iter().scan(0, |a, &p| {
        let s = *a;
        *a += p;
        Some(s)
    }).collect();
    let label_cols: Vec<usize> =
        cfg.observed.iter().flat_map(|&g| offsets[g]..offsets[g] + cfg.partition[g]).collect();
    let c = (!label_cols.is_empty()).then(|| {
        Tensor::from_fn(cfg.t, label_cols.len(), |r, k| cfg.link.label_from_latent(traj.z.get(r, label_cols[k])))
    });

    let meta = DatasetMeta {
        generator: GeneratorKind::Synthetic,
        t: cfg.t,
        input_dim: mixing.output_dim(),
        latent_dim,
        partition: cfg.partition.clone(),
        observed: cfg.observed.clone(),
        label_dim: label_cols.len(),
        sigma: cfg.sigma,
        seed: cfg.seed,
        link: cfg.link,
        mixing: Some(cfg.mixing),
        block_out_dims: Some(out_dims),
        dt: None,
        noise_std: None,
        cells: None,
        extras: Vec::new(),
        shuffled_labels: false,
    };
    let dataset = Dataset {
        meta,
        x,
        c,
        ground_truth: Some(mixing.ground_truth_map()),
        z: Some(traj.z),
        extras: BTreeMap::new(),
    };
    Ok((dataset, mixing))
}
