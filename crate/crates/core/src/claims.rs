//! Executable theory checks. Each claim trains (or fits) a model, measures
//! the quantity the theory constrains, and runs an ablated negative control
//! that must fail, so a vacuous pass is caught.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, binarize, AttributionConfig, Method};
use crate::dataset::{BinaryMap, Dataset, MixingKind};
use crate::diff::Tensor;
use crate::encoder::{EncoderError, LinearHead, Model};
use crate::eval::{auroc, block_alignment, collapse_score};
use crate::linalg;
use crate::rng::{self, tag};
use crate::sampling::Mode;
use crate::synth::{make_dataset, SynthConfig};
use crate::trainer::{train, Similarity, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    /// Uninformative labels drive the InfoNCE to `log N` and collapse the
    /// embedding; informative labels do not.
    Collapse,
    /// Regularized hybrid training plus the inverted gradient recovers the
    /// ground-truth connectivity.
    Identifiability,
    /// Linear mixing with a minimum-norm linear encoder recovers the map
    /// exactly.
    LinearExact,
    /// Block-diagonal transforms of the embedding leave the binarized
    /// inverted-gradient map unchanged.
    BlockInvariance,
}

impl Claim {
    pub const ALL: [Claim; 4] = [Claim::Collapse, Claim::Identifiability, Claim::LinearExact, Claim::BlockInvariance];

    pub fn statement(self) -> &'static str {
        match self {
            Claim::Collapse => "InfoNCE goodness of fit vanishes and the embedding collapses when labels are independent of the data",
            Claim::Identifiability => "regularized hybrid contrastive training + inverted neuron gradient identifies the zero pattern of the mixing Jacobian",
            Claim::LinearExact => "for linear block mixing the minimum-norm encoder's inverted Jacobian equals the ground-truth map",
            Claim::BlockInvariance => "invertible block-diagonal transforms of the embedding preserve the zero pattern of the inverted Jacobian",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: Claim,
    pub statement: String,
    pub seed: u64,
    pub passed: bool,
    pub metrics: BTreeMap<String, f64>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Verdict {
    fn new(claim: Claim, seed: u64) -> Self {
        Verdict {
            claim,
            statement: claim.statement().to_string(),
            seed,
            passed: false,
            metrics: BTreeMap::new(),
            seconds: 0.0,
            error: None,
        }
    }

    fn metric(&mut self, key: &str, value: f64) {
        self.metrics.insert(key.to_string(), value);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseSetup {
    pub data: SynthConfig,
    pub train: TrainConfig,
    /// Allowed `|InfoNCE − log N|` for shuffled labels.
    pub margin: f64,
    pub max_collapse: f64,
    /// Minimum `log N − InfoNCE` for true labels.
    pub informative_gap: f64,
    pub eval_rows: usize,
}

impl Default for CollapseSetup {
    fn default() -> Self {
        Self {
            data: SynthConfig { observed: vec![1], ..SynthConfig::default() },
            train: TrainConfig {
                mode: Mode::Supervised,
                partition: vec![2],
                batch_size: 256,
                negatives: 256,
                hidden_width: 64,
                steps: 1500,
                lambda_max: 0.0,
                learning_rate: 1e-3,
                // Near a constant map the pull towards collapse is second
                // order in the spread; at τ = 1 Adam's jitter outweighs it.
                similarity: Similarity::NegSqEuclidean { temperature: 0.1 },
                ..TrainConfig::default()
            },
            margin: 0.05,
            max_collapse: 0.01,
            informative_gap: 1.0,
            eval_rows: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifiabilitySetup {
    pub data: SynthConfig,
    /// Hybrid, regularized configuration under test.
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub min_auroc: f64,
    pub min_within_r2: f64,
    /// The unregularized supervised control with the plain gradient must
    /// score at least this much lower.
    pub control_margin: f64,
    pub eval_rows: usize,
}

impl Default for IdentifiabilitySetup {
    fn default() -> Self {
        Self {
            data: SynthConfig { observed: vec![1], ..SynthConfig::default() },
            train: TrainConfig { mode: Mode::Hybrid, partition: vec![2, 2], ..desk_train() },
            attribution: AttributionConfig { gradient_subsample: Some(2000), ..AttributionConfig::default() },
            min_auroc: 0.95,
            min_within_r2: 0.9,
            control_margin: 0.05,
            eval_rows: 2000,
        }
    }
}

/// Reduced training budget used by the claims and the benchmark presets.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        batch_size: 256,
        negatives: 256,
        hidden_width: 64,
        steps: 2000,
        ramp_start: 500,
        ramp_end: 1000,
        learning_rate: 1e-3,
        reg_batch: Some(128),
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSetup {
    pub data: SynthConfig,
    /// Rows used for the closed-form fit.
    pub fit_rows: usize,
    /// Scores at most `rel_eps · max` count as zero.
    pub rel_eps: f64,
    /// Scale of the null-space component added in the unregularized control.
    pub null_scale: f64,
}

impl Default for LinearSetup {
    fn default() -> Self {
        Self {
            data: SynthConfig { t: 4000, mixing: MixingKind::Linear, ..SynthConfig::default() },
            fit_rows: 2000,
            rel_eps: 1e-8,
            null_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClaimsConfig {
    pub collapse: CollapseSetup,
    pub identifiability: IdentifiabilitySetup,
    pub linear: LinearSetup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimsReport {
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
}

/// Affine model `x ↦ W x + b`; its Jacobian is `W` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineModel {
    /// `out × D`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Model for AffineModel {
    fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        let mut y = x.matmul(&self.weight.transpose())?;
        for r in 0..y.rows() {
            for (c, b) in self.bias.iter().enumerate() {
                y.set(r, c, y.get(r, c) + b);
            }
        }
        Ok(y)
    }

    fn jacobians(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError> {
        Ok(vec![self.weight.clone(); x.rows()])
    }
}

fn centered(t: &Tensor) -> (Tensor, Vec<f64>) {
    let n = t.rows().max(1) as f64;
    let mean: Vec<f64> = (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / n).collect();
    (Tensor::from_fn(t.rows(), t.cols(), |r, c| t.get(r, c) - mean[c]), mean)
}

/// Least-squares affine encoder `x → target` whose weight rows have minimum
/// norm, i.e. lie in the span of the centered data: the linear analogue of
/// the Jacobian penalty.
pub fn min_norm_affine(x: &Tensor, target: &Tensor) -> AffineModel {
    let (xc, mx) = centered(x);
    let (yc, my) = centered(target);
    let w_t = linalg::pinv(&xc, 1e-9).matrix.matmul(&yc).expect("row counts match");
    let weight = w_t.transpose();
    let bias = (0..weight.rows()).map(|k| my[k] - (0..weight.cols()).map(|i| weight.get(k, i) * mx[i]).sum::<f64>()).collect();
    AffineModel { weight, bias }
}

/// Adds a random component orthogonal to the data span: same predictions on
/// the data, different Jacobian.
pub fn with_null_component(model: &AffineModel, x: &Tensor, scale: f64, seed: u64) -> AffineModel {
    let (xc, _) = centered(x);
    let d = xc.cols();
    let p = linalg::pinv(&xc, 1e-9).matrix.matmul(&xc).expect("square projector");
    let mut rng = rng::stream(seed, &[tag::ATTRIBUTION, 1]);
    let g = Tensor::from_fn(model.weight.rows(), d, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        scale * v
    });
    let null = Tensor::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) - p.get(i, j));
    let extra = g.matmul(&null).expect("shapes match");
    let weight = Tensor::from_fn(model.weight.rows(), d, |r, c| model.weight.get(r, c) + extra.get(r, c));
    AffineModel { weight, bias: model.bias.clone() }
}

/// Binarizes at `rel_eps` times the largest score.
pub fn relative_binarize(scores: &Tensor, rel_eps: f64) -> BinaryMap {
    binarize(scores, rel_eps * scores.max_abs())
}

/// Random invertible matrix that is block-diagonal over `partition`, or
/// dense when `block_diagonal` is false.
pub fn random_transform(partition: &[usize], block_diagonal: bool, seed: u64) -> Tensor {
    let d: usize = partition.iter().sum();
    let mut rng = rng::stream(seed, &[tag::ATTRIBUTION, 2]);
    let mut block_of = Vec::with_capacity(d);
    for (b, &p) in partition.iter().enumerate() {
        block_of.extend(std::iter::repeat_n(b, p));
    }
    loop {
        let m = Tensor::from_fn(d, d, |i, j| {
            let v: f64 = StandardNormal.sample(&mut rng);
            if block_diagonal && block_of[i] != block_of[j] { 0.0 } else { v + if i == j { 2.0 } else { 0.0 } }
        });
        if linalg::condition_number(&m) < 1e3 {
            return m;
        }
    }
}

fn sample_rows(len: usize, k: usize, seed: u64) -> Vec<usize> {
    if k >= len {
        return (0..len).collect();
    }
    let mut idx = rand::seq::index::sample(&mut rng::stream(seed, &[tag::SUBSAMPLE, 2]), len, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Shuffled labels must end within `margin` of `log N` with a collapsed
/// embedding; the true-label control must end `informative_gap` below.
pub fn check_collapse(setup: &CollapseSetup, seed: u64) -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new(Claim::Collapse, seed);
    let run = |v: &mut Verdict| -> Result<(), String> {
        let (data, _) = make_dataset(&SynthConfig { seed, ..setup.data.clone() }).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { seed, ..setup.train.clone() };
        let log_n = (cfg.negatives as f64).ln();
        let rows = sample_rows(data.len(), setup.eval_rows, seed);
        let x = data.x.select_rows(&rows);

        let shuffled = train(&data.with_shuffled_labels(seed), &cfg).map_err(|e| e.to_string())?;
        let emb = shuffled.encoder.embed(&x).map_err(|e| e.to_string())?;
        let collapse = collapse_score(&emb, cfg.output_scale);
        let gap = (shuffled.trace.final_infonce - log_n).abs();

        let informative = train(&data, &cfg).map_err(|e| e.to_string())?;
        let control_gap = log_n - informative.trace.final_infonce;

        v.metric("log_n", log_n);
        v.metric("shuffled_infonce", shuffled.trace.final_infonce);
        v.metric("shuffled_gap", gap);
        v.metric("collapse_score", collapse);
        v.metric("informative_infonce", informative.trace.final_infonce);
        v.metric("informative_gap", control_gap);
        v.passed = gap < setup.margin && collapse < setup.max_collapse && control_gap >= setup.informative_gap;
        Ok(())
    };
    if let Err(e) = run(&mut v) {
        v.error = Some(e);
    }
    v.seconds = start.elapsed().as_secs_f64();
    v
}

/// Latent columns reordered so block `i` matches embedding slice `i`:
/// observed groups first (in the supervised slice), then the rest.
pub fn hybrid_latent_order(data: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let groups = data.meta.partition.len();
    let mut order: Vec<usize> = data.meta.observed.clone();
    order.extend((0..groups).filter(|g| !data.meta.observed.contains(g)));
    let cols = order.iter().flat_map(|&g| data.group_range(g)).collect();
    let sizes = order.iter().map(|&g| data.meta.partition[g]).collect();
    (cols, sizes)
}

/// Regularized hybrid run scored on the supervised slice against the first
/// observed group, plus block alignment; the control is an unregularized
/// supervised model read out with the plain gradient.
pub fn check_identifiability(setup: &IdentifiabilitySetup, seed: u64) -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new(Claim::Identifiability, seed);
    let run = |v: &mut Verdict| -> Result<(), String> {
        let (data, _) = make_dataset(&SynthConfig { seed, ..setup.data.clone() }).map_err(|e| e.to_string())?;
        let group = *data.meta.observed.first().ok_or("identifiability needs an observed group")?;
        let cfg = TrainConfig { seed, ..setup.train.clone() };
        if cfg.mode != Mode::Hybrid || cfg.partition.len() != data.meta.partition.len() {
            return Err("identifiability expects a hybrid model with one slice per latent group".into());
        }
        let sup = cfg.partition[0];
        let truth = data.group_ground_truth(group).ok_or("no ground truth")?.repeat_col(0, sup);
        let acfg = AttributionConfig { seed, ..setup.attribution.clone() };
        let sup_cols: Vec<usize> = (0..sup).collect();

        let out = train(&data, &cfg).map_err(|e| e.to_string())?;
        let global = attribute(&out.encoder, &data.x, Method::InvertedNeuronGradient, &acfg).map_err(|e| e.to_string())?;
        let score = auroc(&global.select_cols(&sup_cols), &truth).map_err(|e| e.to_string())?.auroc;

        let rows = sample_rows(data.len(), setup.eval_rows, seed);
        let emb = out.encoder.embed(&data.x.select_rows(&rows)).map_err(|e| e.to_string())?;
        let z = data.z.as_ref().ok_or("no latents")?.select_rows(&rows);
        let (cols, sizes) = hybrid_latent_order(&data);
        let z = Tensor::from_fn(z.rows(), cols.len(), |r, c| z.get(r, cols[c]));
        let align = block_alignment(&emb, &z, &cfg.partition, &sizes).map_err(|e| e.to_string())?;
        let within = align.within.iter().copied().fold(f64::INFINITY, f64::min);

        let control_cfg = TrainConfig { mode: Mode::Supervised, partition: vec![sup], lambda_max: 0.0, ..cfg.clone() };
        let control = train(&data, &control_cfg).map_err(|e| e.to_string())?;
        let cg = attribute(&control.encoder, &data.x, Method::NeuronGradient, &acfg).map_err(|e| e.to_string())?;
        let control_score = auroc(&cg.select_cols(&sup_cols), &truth).map_err(|e| e.to_string())?.auroc;

        v.metric("auroc", score);
        v.metric("min_within_r2", within);
        for (i, w) in align.within.iter().enumerate() {
            v.metric(&format!("within_r2_{i}"), *w);
            v.metric(&format!("leakage_r2_{i}"), align.leakage[i]);
        }
        v.metric("control_auroc", control_score);
        v.passed = score > setup.min_auroc && within > setup.min_within_r2 && score - control_score >= setup.control_margin;
        Ok(())
    };
    if let Err(e) = run(&mut v) {
        v.error = Some(e);
    }
    v.seconds = start.elapsed().as_secs_f64();
    v
}

/// Linear mixing: min-norm affine encoder onto all latents, inverted
/// gradient, relative binarization. Must equal the ground truth exactly;
/// adding a null-space component (no regularization) must break it.
pub fn check_linear_exact(setup: &LinearSetup, seed: u64) -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new(Claim::LinearExact, seed);
    let run = |v: &mut Verdict| -> Result<(), String> {
        let (data, model, unreg) = linear_models(setup, seed)?;
        let truth = data.ground_truth.as_ref().ok_or("no ground truth")?;
        let acfg = AttributionConfig { gradient_subsample: Some(16), seed, ..AttributionConfig::default() };
        let map = attribute(&model, &data.x, Method::InvertedNeuronGradient, &acfg).map_err(|e| e.to_string())?;
        let bin = relative_binarize(&map.scores, setup.rel_eps);
        let score = auroc(&map.scores, truth).map_err(|e| e.to_string())?.auroc;
        let ctrl = attribute(&unreg, &data.x, Method::InvertedNeuronGradient, &acfg).map_err(|e| e.to_string())?;
        let ctrl_bin = relative_binarize(&ctrl.scores, setup.rel_eps);
        let mismatches = (0..truth.rows() * truth.cols()).filter(|&k| bin.data()[k] != truth.data()[k]).count();
        let ctrl_mismatches = (0..truth.rows() * truth.cols()).filter(|&k| ctrl_bin.data()[k] != truth.data()[k]).count();
        v.metric("auroc", score);
        v.metric("mismatches", mismatches as f64);
        v.metric("control_mismatches", ctrl_mismatches as f64);
        v.metric("control_auroc", auroc(&ctrl.scores, truth).map_err(|e| e.to_string())?.auroc);
        v.passed = mismatches == 0 && score == 1.0 && ctrl_mismatches > 0;
        Ok(())
    };
    if let Err(e) = run(&mut v) {
        v.error = Some(e);
    }
    v.seconds = start.elapsed().as_secs_f64();
    v
}

/// Dataset plus the min-norm encoder and its null-space-perturbed twin.
pub fn linear_models(setup: &LinearSetup, seed: u64) -> Result<(Dataset, AffineModel, AffineModel), String> {
    let (data, _) = make_dataset(&SynthConfig { seed, ..setup.data.clone() }).map_err(|e| e.to_string())?;
    let z = data.z.as_ref().ok_or("no latents")?;
    let rows = sample_rows(data.len(), setup.fit_rows, seed);
    let x = data.x.select_rows(&rows);
    let model = min_norm_affine(&x, &z.select_rows(&rows));
    let unreg = with_null_component(&model, &x, setup.null_scale, seed);
    Ok((data, model, unreg))
}

/// Composes the min-norm encoder with a random block-diagonal head (must
/// keep the binarized map) and a dense head (negative control, must change
/// it).
pub fn check_block_invariance(setup: &LinearSetup, seed: u64) -> Verdict {
    let start = Instant::now();
    let mut v = Verdict::new(Claim::BlockInvariance, seed);
    let run = |v: &mut Verdict| -> Result<(), String> {
        let (data, model, _) = linear_models(setup, seed)?;
        let acfg = AttributionConfig { gradient_subsample: Some(16), seed, ..AttributionConfig::default() };
        let map = |m: &dyn ModelDyn| -> Result<BinaryMap, String> {
            let g = m.attribute(&data.x, &acfg)?;
            Ok(relative_binarize(&g, setup.rel_eps))
        };
        let base = map(&model)?;
        let identity = LinearHead { inner: &model, matrix: Tensor::identity(model.output_dim()) };
        let block = LinearHead { inner: &model, matrix: random_transform(&data.meta.partition, true, seed) };
        let dense = LinearHead { inner: &model, matrix: random_transform(&data.meta.partition, false, seed) };
        let same_identity = map(&identity)? == base;
        let same_block = map(&block)? == base;
        let same_dense = map(&dense)? == base;
        v.metric("identity_preserved", f64::from(u8::from(same_identity)));
        v.metric("block_preserved", f64::from(u8::from(same_block)));
        v.metric("dense_preserved", f64::from(u8::from(same_dense)));
        v.passed = same_identity && same_block && !same_dense;
        Ok(())
    };
    if let Err(e) = run(&mut v) {
        v.error = Some(e);
    }
    v.seconds = start.elapsed().as_secs_f64();
    v
}

/// Object-safe shim so differently typed heads share one code path.
trait ModelDyn {
    fn attribute(&self, x: &Tensor, cfg: &AttributionConfig) -> Result<Tensor, String>;
}

impl<M: Model> ModelDyn for M {
    fn attribute(&self, x: &Tensor, cfg: &AttributionConfig) -> Result<Tensor, String> {
        attribute(self, x, Method::InvertedNeuronGradient, cfg).map(|g| g.scores).map_err(|e| e.to_string())
    }
}

pub fn check(claim: Claim, cfg: &ClaimsConfig, seed: u64) -> Verdict {
    match claim {
        Claim::Collapse => check_collapse(&cfg.collapse, seed),
        Claim::Identifiability => check_identifiability(&cfg.identifiability, seed),
        Claim::LinearExact => check_linear_exact(&cfg.linear, seed),
        Claim::BlockInvariance => check_block_invariance(&cfg.linear, seed),
    }
}

/// Every `(claim, seed)` pair on at most `jobs` threads, in a fixed order.
pub fn run_claims(cfg: &ClaimsConfig, claims: &[Claim], seeds: &[u64], jobs: usize) -> Result<ClaimsReport, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| e.to_string())?;
    let pairs: Vec<(Claim, u64)> = claims.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let verdicts: Vec<Verdict> = pool.install(|| pairs.par_iter().map(|&(c, s)| check(c, cfg, s)).collect());
    let passed = !verdicts.is_empty() && verdicts.iter().all(|v| v.passed && v.error.is_none());
    Ok(ClaimsReport { verdicts, passed })
}

#[cfg(test)]
mod tests;
