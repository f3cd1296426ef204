//! Partitioned MLP feature encoder and its analytic Jacobian.
//!
//! The network is three GELU hidden layers followed by a scaled `tanh`
//! output layer. The output is split into contiguous partitions; each
//! partition lives either in a box (raw `tanh` output) or on the unit sphere
//! (row-normalized).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Axis, DiffError, Graph, NodeId, Tensor};

pub const HIDDEN_LAYERS: usize = 3;
pub const DEFAULT_HIDDEN_WIDTH: usize = 128;
/// `1.1 ×` the latent box half-width, so a saturating `tanh` still covers `[-1, 1]`.
pub const DEFAULT_OUTPUT_SCALE: f64 = 1.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    #[default]
    Box,
    Sphere,
}

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("partition must be non-empty with positive sizes")]
    EmptyPartition,
    #[error("input dimension must be positive")]
    ZeroInput,
    #[error("geometry list has {got} entries for {want} partitions")]
    Geometry { want: usize, got: usize },
    #[error("input has {got} columns, encoder expects {want}")]
    InputWidth { want: usize, got: usize },
    #[error("input contains NaN or infinite values")]
    NonFiniteInput,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Anything attribution methods can probe: a batched embedding and per-sample
/// Jacobians (`output_dim × input_dim`).
pub trait Model: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, x: &Tensor) -> Result<Tensor, EncoderError>;
    fn jacobians(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub partition: Vec<usize>,
    pub geometry: Vec<Geometry>,
    pub output_scale: f64,
    pub seed: u64,
    pub steps: u64,
    pub layers: Vec<Layer>,
}

/// Graph handles of an encoder's weights.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    pub fn iter(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Intermediate nodes of one forward pass, kept for the Jacobian.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Pre-activations of the four layers.
    pub pre: Vec<NodeId>,
    /// `output_scale · tanh(a₄)` before any sphere normalization.
    pub raw: NodeId,
    /// Final embedding, `batch × output_dim`.
    pub output: NodeId,
    pub batch: usize,
}

impl MlpEncoder {
    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(
        seed: u64,
        input_dim: usize,
        hidden_width: usize,
        partition: &[usize],
        output_scale: f64,
    ) -> Result<Self, EncoderError> {
        if partition.is_empty() || partition.contains(&0) {
            return Err(EncoderError::EmptyPartition);
        }
        if input_dim == 0 || hidden_width == 0 {
            return Err(EncoderError::ZeroInput);
        }
        let output_dim: usize = partition.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [input_dim, hidden_width, hidden_width, hidden_width, output_dim];
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = Tensor::from_fn(fan_in, fan_out, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                });
                Layer { weight, bias: Tensor::zeros(1, fan_out) }
            })
            .collect();
        Ok(Self {
            input_dim,
            hidden_width,
            partition: partition.to_vec(),
            geometry: vec![Geometry::Box; partition.len()],
            output_scale,
            seed,
            steps: 0,
            layers,
        })
    }

    pub fn with_geometry(mut self, geometry: Vec<Geometry>) -> Result<Self, EncoderError> {
        if geometry.len() != self.partition.len() {
            return Err(EncoderError::Geometry { want: self.partition.len(), got: geometry.len() });
        }
        self.geometry = geometry;
        Ok(self)
    }

    pub fn output_dim(&self) -> usize {
        self.partition.iter().sum()
    }

    /// Column offset of each partition in the embedding.
    pub fn partition_offsets(&self) -> Vec<usize> {
        self.partition
            .iter()
            .scan(0, |acc, &p| {
                let start = *acc;
                *acc += p;
                Some(start)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Adds the weights to `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        let mut add = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let layers = self.layers.iter().map(|l| (add(&l.weight), add(&l.bias))).collect();
        ParamNodes { layers }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), EncoderError> {
        if x.cols() != self.input_dim {
            return Err(EncoderError::InputWidth { want: self.input_dim, got: x.cols() });
        }
        if !x.is_finite() {
            return Err(EncoderError::NonFiniteInput);
        }
        Ok(())
    }

    /// Builds the forward pass for a batch node `x` (`batch × input_dim`).
    pub fn forward(&self, g: &mut Graph, params: &ParamNodes, x: NodeId) -> Result<Forward, DiffError> {
        let batch = g.value(x).rows();
        let mut h = x;
        let mut pre = Vec::with_capacity(params.layers.len());
        let last = params.layers.len() - 1;
        for (k, &(w, b)) in params.layers.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            let bias = g.repeat_rows(b, batch)?;
            let a = g.add(lin, bias)?;
            pre.push(a);
            h = if k == last { a } else { g.gelu(a)? };
        }
        let t = g.tanh(h)?;
        let raw = g.scale(t, self.output_scale)?;
        let output = if self.geometry.iter().all(|&geo| geo == Geometry::Box) {
            raw
        } else {
            let mut parts = Vec::with_capacity(self.partition.len());
            for ((&start, &len), &geo) in self.partition_offsets().iter().zip(&self.partition).zip(&self.geometry) {
                let slice = g.slice_cols(raw, start, len)?;
                parts.push(match geo {
                    Geometry::Box => slice,
                    Geometry::Sphere => normalize_rows(g, slice)?.0,
                });
            }
            g.concat(&parts, Axis::Cols)?
        };
        Ok(Forward { pre, raw, output, batch })
    }

    /// Stacked per-sample Jacobians as a `(output_dim·batch) × input_dim`
    /// node. Row `j·batch + n` is `∂f_j(x_n)/∂x`.
    ///
    /// The Jacobian is assembled from the chain of per-layer factors
    /// `S·diag(tanh'(a₄))·W₄ᵀ·diag(gelu'(a₃))·W₃ᵀ·…·W₁ᵀ`, one reverse sweep per
    /// output dimension, all stacked into the same matrix products.
    pub fn jacobian_rows(&self, g: &mut Graph, params: &ParamNodes, fwd: &Forward) -> Result<NodeId, DiffError> {
        let d = self.output_dim();
        let batch = fwd.batch;
        let a_out = *fwd.pre.last().expect("four layers");
        let t = g.tanh_d1(a_out)?;
        let t = g.scale(t, self.output_scale)?;
        let mut masked = Vec::with_capacity(d);
        for j in 0..d {
            let mask = g.constant(Tensor::from_fn(batch, d, |_, c| if c == j { 1.0 } else { 0.0 }));
            masked.push(g.hadamard(t, mask)?);
        }
        let mut rows = g.concat(&masked, Axis::Rows)?;
        for k in (0..params.layers.len()).rev() {
            let (w, _) = params.layers[k];
            rows = g.matmul_nt(rows, w)?;
            if k > 0 {
                let gd = g.gelu_d1(fwd.pre[k - 1])?;
                let stacked = g.concat(&vec![gd; d], Axis::Rows)?;
                rows = g.hadamard(rows, stacked)?;
            }
        }
        if self.geometry.contains(&Geometry::Sphere) {
            rows = self.sphere_jacobian(g, fwd, rows)?;
        }
        Ok(rows)
    }

    /// Applies the row-normalization Jacobian `(I − u uᵀ)/‖y‖` to the blocks
    /// of sphere partitions.
    fn sphere_jacobian(&self, g: &mut Graph, fwd: &Forward, rows: NodeId) -> Result<NodeId, DiffError> {
        let batch = fwd.batch;
        let input_dim = g.value(rows).cols();
        let mut blocks: Vec<NodeId> = Vec::with_capacity(self.output_dim());
        for ((&start, &len), &geo) in self.partition_offsets().iter().zip(&self.partition).zip(&self.geometry) {
            let own: Vec<NodeId> =
                (start..start + len).map(|j| g.slice_rows(rows, j * batch, batch)).collect::<Result<_, _>>()?;
            if geo == Geometry::Box {
                blocks.extend(own);
                continue;
            }
            let slice = g.slice_cols(fwd.raw, start, len)?;
            let (unit, inv_norm) = normalize_rows(g, slice)?;
            let inv_norm = g.repeat_cols(inv_norm, input_dim)?;
            let mut u_cols = Vec::with_capacity(len);
            for k in 0..len {
                let col = g.slice_cols(unit, k, 1)?;
                u_cols.push(g.repeat_cols(col, input_dim)?);
            }
            // uᵀJ per sample
            let mut proj = g.hadamard(u_cols[0], own[0])?;
            for k in 1..len {
                let term = g.hadamard(u_cols[k], own[k])?;
                proj = g.add(proj, term)?;
            }
            for k in 0..len {
                let along = g.hadamard(u_cols[k], proj)?;
                let tangent = g.sub(own[k], along)?;
                blocks.push(g.hadamard(tangent, inv_norm)?);
            }
        }
        g.concat(&blocks, Axis::Rows)
    }

    /// `mean_n ‖J_f(x_n)‖²_F` as a graph scalar.
    pub fn jacobian_frobenius_sq(&self, g: &mut Graph, params: &ParamNodes, fwd: &Forward) -> Result<NodeId, DiffError> {
        let rows = self.jacobian_rows(g, params, fwd)?;
        let sq = g.square(rows)?;
        let s = g.sum(sq)?;
        g.scale(s, 1.0 / fwd.batch.max(1) as f64)
    }

    /// Convenience: regularizer value for a batch outside of training.
    pub fn jacobian_penalty(&self, x: &Tensor) -> Result<f64, EncoderError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let params = self.register(&mut g, false);
        let xn = g.constant(x.clone());
        let fwd = self.forward(&mut g, &params, xn)?;
        let r = self.jacobian_frobenius_sq(&mut g, &params, &fwd)?;
        Ok(g.value(r).item())
    }

    /// Single-sample Jacobian `output_dim × input_dim`.
    pub fn jacobian(&self, x: &[f64]) -> Result<Tensor, EncoderError> {
        let t = Tensor::new(1, x.len(), x.to_vec())?;
        Ok(self.jacobians(&t)?.pop().expect("one row"))
    }
}

/// Returns `(y / ‖y‖ per row, 1/‖y‖ as a column)`.
fn normalize_rows(g: &mut Graph, y: NodeId) -> Result<(NodeId, NodeId), DiffError> {
    let cols = g.value(y).cols();
    let sq = g.square(y)?;
    let norm_sq = g.row_sums(sq)?;
    let log = g.log(norm_sq)?;
    let half = g.scale(log, -0.5)?;
    let inv_norm = g.exp(half)?;
    let rep = g.repeat_cols(inv_norm, cols)?;
    Ok((g.hadamard(y, rep)?, inv_norm))
}

/// Rows per graph when evaluating large inputs without training.
const EVAL_CHUNK: usize = 1024;

impl Model for MlpEncoder {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        MlpEncoder::output_dim(self)
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        self.check_input(x)?;
        let d = MlpEncoder::output_dim(self);
        let mut out = Vec::with_capacity(x.rows() * d);
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(x.rows() - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let mut g = Graph::new();
            let params = self.register(&mut g, false);
            let xn = g.constant(x.select_rows(&idx));
            let fwd = self.forward(&mut g, &params, xn)?;
            out.extend_from_slice(g.value(fwd.output).data());
        }
        Ok(Tensor::new(x.rows(), d, out)?)
    }

    fn jacobians(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError> {
        self.check_input(x)?;
        let d = MlpEncoder::output_dim(self);
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let len = EVAL_CHUNK.min(x.rows() - start);
            let idx: Vec<usize> = (start..start + len).collect();
            let mut g = Graph::new();
            let params = self.register(&mut g, false);
            let xn = g.constant(x.select_rows(&idx));
            let fwd = self.forward(&mut g, &params, xn)?;
            let rows = self.jacobian_rows(&mut g, &params, &fwd)?;
            let stacked = g.value(rows);
            for n in 0..len {
                out.push(Tensor::from_fn(d, self.input_dim, |j, i| stacked.get(j * len + n, i)));
            }
        }
        Ok(out)
    }
}

/// A model followed by a fixed linear map on its output, `x ↦ M·f(x)`.
pub struct LinearHead<'a, M: Model> {
    pub inner: &'a M,
    /// `out × inner.output_dim()`
    pub matrix: Tensor,
}

impl<M: Model> Model for LinearHead<'_, M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.matrix.rows()
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        let y = self.inner.embed(x)?;
        Ok(y.matmul(&self.matrix.transpose())?)
    }

    fn jacobians(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError> {
        self.inner
            .jacobians(x)?
            .into_iter()
            .map(|j| self.matrix.matmul(&j).map_err(EncoderError::from))
            .collect()
    }
}
