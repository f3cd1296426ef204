//! In-memory dataset bundle shared by the generators, the trainer and the
//! evaluation code.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::navsim::CellMeta;
use crate::rng;

/// Binary `rows × cols` matrix; `1` marks a connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Option<Self> {
        (rows * cols == data.len() && data.iter().all(|&v| v <= 1)).then_some(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(u8::from(f(i, j)));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Columns `cols` as a new map.
    pub fn select_cols(&self, cols: &[usize]) -> BinaryMap {
        BinaryMap::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// A map whose every column is column `col` of `self`, repeated `times`.
    pub fn repeat_col(&self, col: usize, times: usize) -> BinaryMap {
        BinaryMap::from_fn(self.rows, times, |i, _| self.get(i, col))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Synthetic,
    Navsim,
}

/// Link between an observed latent group and its auxiliary label, `z = γ(c)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    /// `c = z + z³`, strictly increasing.
    Cubic,
}

impl Link {
    /// `γ⁻¹`, label from latent.
    pub fn label_from_latent(self, z: f64) -> f64 {
        match self {
            Link::Identity => z,
            Link::Cubic => z + z * z * z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixingKind {
    #[default]
    Nonlinear,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub generator: GeneratorKind,
    /// Number of timesteps.
    pub t: usize,
    /// Observation dimension `D`.
    pub input_dim: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    pub partition: Vec<usize>,
    /// Latent groups exposed through labels.
    pub observed: Vec<usize>,
    pub label_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub link: Link,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixing: Option<MixingKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_out_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<CellMeta>>,
    /// Names of additional `T × 1` arrays stored next to the core arrays.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extras: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shuffled_labels: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `T × D` observations.
    pub x: Tensor,
    /// `T × label_dim` auxiliary labels.
    pub c: Option<Tensor>,
    /// `T × d` ground-truth latents.
    pub z: Option<Tensor>,
    /// `D × d` ground-truth attribution map.
    pub ground_truth: Option<BinaryMap>,
    pub extras: BTreeMap<String, Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Latent columns belonging to `group`.
    pub fn group_range(&self, group: usize) -> Range<usize> {
        let start: usize = self.meta.partition[..group].iter().sum();
        start..start + self.meta.partition[group]
    }

    /// Ground-truth connectivity of latent `group`, one column. Groups are
    /// connected block-wise, so every latent column of a group is identical.
    pub fn group_ground_truth(&self, group: usize) -> Option<BinaryMap> {
        let gt = self.ground_truth.as_ref()?;
        Some(gt.select_cols(&[self.group_range(group).start]))
    }

    /// Copy with the label rows randomly permuted, which makes labels
    /// independent of the observations while keeping their marginal.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut out = self.clone();
        if let Some(c) = &self.c {
            let mut perm: Vec<usize> = (0..c.rows()).collect();
            perm.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE]));
            out.c = Some(c.select_rows(&perm));
            out.meta.shuffled_labels = true;
        }
        out
    }
}
