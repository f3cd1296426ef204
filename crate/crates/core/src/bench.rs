//! Experiment grid: training mode × regularization × attribution method ×
//! seed. One model is trained per `(mode, λ, seed)` and shared by all
//! methods; cells fail independently.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionConfig, Method};
use crate::dataset::{BinaryMap, Dataset};
use crate::encoder::Model;
use crate::eval::{auroc_values, bootstrap_ci, linear_decode_r2};
use crate::navsim::{make_nav_dataset, NavConfig};
use crate::rng::{self, tag};
use crate::sampling::Mode;
use crate::synth::{make_dataset, SynthConfig};
use crate::trainer::{goodness_of_fit, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SynthConfig),
    Navsim(NavConfig),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SynthConfig::default())
    }
}

impl DataSpec {
    /// Builds the dataset for one seed; the seed replaces the configured one.
    pub fn build(&self, seed: u64) -> Result<Dataset, String> {
        match self {
            DataSpec::Synthetic(c) => make_dataset(&SynthConfig { seed, ..c.clone() }).map(|d| d.0).map_err(|e| e.to_string()),
            DataSpec::Navsim(c) => make_nav_dataset(&NavConfig { seed, ..c.clone() }).map(|d| d.0).map_err(|e| e.to_string()),
        }
    }
}

/// Which embedding columns are attributed and against which latent group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Target {
    /// Partition slice of the embedding; `0` is the supervised slice in
    /// hybrid mode. Modes with a single slice always use slice 0.
    pub slice: usize,
    /// Latent group of the ground truth; defaults to the first observed one.
    pub group: Option<usize>,
}

impl Default for Target {
    fn default() -> Self {
        Self { slice: 0, group: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub data: DataSpec,
    /// Base training config; mode, partition, λ and seed are set per cell.
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub modes: Vec<Mode>,
    /// The regularized arm uses this; the other arm uses 0.
    pub lambda_max: f64,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub hybrid_partition: Vec<usize>,
    pub single_partition: Vec<usize>,
    pub target: Target,
    pub bootstrap: usize,
    pub level: f64,
    /// Timesteps used for the decoding R² column.
    pub r2_rows: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            modes: vec![Mode::Hybrid, Mode::Supervised, Mode::Regression],
            lambda_max: 0.1,
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            hybrid_partition: vec![2, 2],
            single_partition: vec![2],
            target: Target::default(),
            bootstrap: 1000,
            level: 0.95,
            r2_rows: 2000,
        }
    }
}

impl BenchSpec {
    pub fn partition_for(&self, mode: Mode) -> Vec<usize> {
        if mode == Mode::Hybrid { self.hybrid_partition.clone() } else { self.single_partition.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.modes.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err("modes, methods and seeds must be non-empty".into());
        }
        if !(self.lambda_max.is_finite() && self.lambda_max >= 0.0) {
            return Err("lambda_max must be finite and non-negative".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err("level must lie in (0, 1)".into());
        }
        for &mode in &self.modes {
            let cfg = self.cell_config(mode, self.lambda_max, self.seeds[0]);
            cfg.validate().map_err(|e| format!("{mode:?}: {e}"))?;
        }
        Ok(())
    }

    /// Regularization arms: `[0]` alone when `lambda_max` is zero.
    pub fn lambdas(&self) -> Vec<f64> {
        if self.lambda_max > 0.0 { vec![0.0, self.lambda_max] } else { vec![0.0] }
    }

    pub fn cell_config(&self, mode: Mode, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig { mode, partition: self.partition_for(mode), lambda_max: lambda, seed, ..self.train.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub mode: Mode,
    pub regularized: bool,
    pub seed: u64,
    pub auroc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub gof: f64,
    pub r2: f64,
    /// Training plus attribution time of this cell.
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl BenchRow {
    fn failed(method: Method, mode: Mode, regularized: bool, seed: u64, error: String) -> Self {
        let nan = f64::NAN;
        BenchRow { method, mode, regularized, seed, auroc: nan, ci_lo: nan, ci_hi: nan, gof: nan, r2: nan, seconds: 0.0, error: Some(error) }
    }
}

/// Mean over seeds of one `(method, mode, regularized)` combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub method: Method,
    pub mode: Mode,
    pub regularized: bool,
    pub auroc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub seeds: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummary>,
}

pub const CSV_HEADER: &str = "method,mode,regularized,seed,auroc,ci_lo,ci_hi,gof,r2,seconds";

impl BenchResult {
    /// Failed cells keep their row with empty numeric fields.
    pub fn to_csv(&self) -> String {
        let num = |v: f64| if v.is_finite() { format!("{v:.6}") } else { String::new() };
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out += &format!(
                "{},{},{},{},{},{},{},{},{},{:.3}\n",
                r.method.name(),
                r.mode.name(),
                r.regularized,
                r.seed,
                num(r.auroc),
                num(r.ci_lo),
                num(r.ci_hi),
                num(r.gof),
                num(r.r2),
                r.seconds
            );
        }
        out
    }

    pub fn get(&self, method: Method, mode: Mode, regularized: bool) -> Option<&BenchSummary> {
        self.summary.iter().find(|s| s.method == method && s.mode == mode && s.regularized == regularized)
    }
}

/// Stratified percentile bootstrap of the auROC: positives and negatives
/// are resampled separately so every replicate has both classes.
pub fn auroc_ci(scores: &[f64], labels: &[bool], resamples: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = rng::stream(seed, &[tag::BOOTSTRAP]);
    let mut stats = Vec::with_capacity(resamples);
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    for _ in 0..resamples {
        s.clear();
        l.clear();
        for _ in 0..pos.len() {
            s.push(pos[rng.random_range(0..pos.len())]);
            l.push(true);
        }
        for _ in 0..neg.len() {
            s.push(neg[rng.random_range(0..neg.len())]);
            l.push(false);
        }
        stats.push(auroc_values(&s, &l).ok()?);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some((at(alpha), at(1.0 - alpha)))
}

struct Unit {
    mode: Mode,
    lambda: f64,
    seed: u64,
}

fn target_truth(spec: &BenchSpec, data: &Dataset, slice_len: usize) -> Result<(usize, BinaryMap), String> {
    let group = match spec.target.group {
        Some(g) => g,
        None => *data.meta.observed.first().ok_or("dataset has no observed group; set target.group")?,
    };
    if group >= data.meta.partition.len() {
        return Err(format!("target group {group} out of range"));
    }
    let gt = data.group_ground_truth(group).ok_or("dataset has no ground-truth map")?;
    Ok((group, gt.repeat_col(0, slice_len)))
}

fn run_unit(spec: &BenchSpec, data: &Dataset, unit: &Unit) -> Vec<BenchRow> {
    let regularized = unit.lambda > 0.0;
    let fail_all = |e: String| {
        spec.methods.iter().map(|&m| BenchRow::failed(m, unit.mode, regularized, unit.seed, e.clone())).collect::<Vec<_>>()
    };
    let cfg = spec.cell_config(unit.mode, unit.lambda, unit.seed);
    let partition = cfg.partition.clone();
    let slice = if partition.len() == 1 { 0 } else { spec.target.slice };
    let Some(&slice_len) = partition.get(slice) else {
        return fail_all(format!("slice {slice} not in partition {partition:?}"));
    };
    let (group, truth) = match target_truth(spec, data, slice_len) {
        Ok(t) => t,
        Err(e) => return fail_all(e),
    };
    let start = Instant::now();
    let outcome = match train(data, &cfg) {
        Ok(o) => o,
        Err(e) => return fail_all(e.to_string()),
    };
    let train_secs = start.elapsed().as_secs_f64();
    let gof = if unit.mode == Mode::Regression { f64::NAN } else { goodness_of_fit(&outcome.trace) };
    let r2 = decode_r2(spec, data, &outcome.encoder, group, unit.seed).unwrap_or(f64::NAN);
    let offset: usize = partition[..slice].iter().sum();
    let cols: Vec<usize> = (offset..offset + slice_len).collect();
    let labels: Vec<bool> = truth.data().iter().map(|&v| v != 0).collect();
    spec.methods
        .iter()
        .map(|&method| {
            let t = Instant::now();
            let acfg = AttributionConfig { seed: unit.seed, ..spec.attribution.clone() };
            let global = match attribute(&outcome.encoder, &data.x, method, &acfg) {
                Ok(g) => g,
                Err(e) => return BenchRow::failed(method, unit.mode, regularized, unit.seed, e.to_string()),
            };
            let scores = global.select_cols(&cols);
            let auroc = match auroc_values(scores.data(), &labels) {
                Ok(a) => a,
                Err(e) => return BenchRow::failed(method, unit.mode, regularized, unit.seed, e.to_string()),
            };
            let (ci_lo, ci_hi) = auroc_ci(scores.data(), &labels, spec.bootstrap, spec.level, unit.seed)
                .unwrap_or((f64::NAN, f64::NAN));
            BenchRow {
                method,
                mode: unit.mode,
                regularized,
                seed: unit.seed,
                auroc,
                ci_lo,
                ci_hi,
                gof,
                r2,
                seconds: train_secs + t.elapsed().as_secs_f64(),
                error: None,
            }
        })
        .collect()
}

/// R² of decoding the target latent group from the full embedding.
fn decode_r2<M: Model>(spec: &BenchSpec, data: &Dataset, model: &M, group: usize, seed: u64) -> Option<f64> {
    let z = data.z.as_ref()?;
    let rows: Vec<usize> = if spec.r2_rows < data.len() {
        let mut idx = rand::seq::index::sample(&mut rng::stream(seed, &[tag::SUBSAMPLE, 1]), data.len(), spec.r2_rows).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..data.len()).collect()
    };
    let emb = model.embed(&data.x.select_rows(&rows)).ok()?;
    let range = data.group_range(group);
    let target = z.select_rows(&rows).slice_cols(range.start, range.len());
    linear_decode_r2(&emb, &target).ok().map(|r| r.r2)
}

/// Runs the grid on at most `jobs` threads. Datasets are generated once per
/// seed; a dataset failure marks every cell of that seed as failed.
pub fn run_benchmark(spec: &BenchSpec, jobs: usize) -> Result<BenchResult, String> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let datasets: Vec<Result<Dataset, String>> = spec.seeds.par_iter().map(|&s| spec.data.build(s)).collect();
        let units: Vec<(usize, Unit)> = spec
            .seeds
            .iter()
            .enumerate()
            .flat_map(|(k, &seed)| {
                spec.modes.iter().flat_map(move |&mode| spec.lambdas().into_iter().map(move |lambda| (k, Unit { mode, lambda, seed })))
            })
            .collect();
        let rows: Vec<BenchRow> = units
            .par_iter()
            .flat_map_iter(|(k, unit)| match &datasets[*k] {
                Ok(data) => run_unit(spec, data, unit),
                Err(e) => spec
                    .methods
                    .iter()
                    .map(|&m| BenchRow::failed(m, unit.mode, unit.lambda > 0.0, unit.seed, e.clone()))
                    .collect(),
            })
            .collect();
        Ok(summarize(spec, rows))
    })
}

fn summarize(spec: &BenchSpec, rows: Vec<BenchRow>) -> BenchResult {
    let mut summary = Vec::new();
    for &mode in &spec.modes {
        for lambda in spec.lambdas() {
            let regularized = lambda > 0.0;
            for &method in &spec.methods {
                let cell: Vec<&BenchRow> =
                    rows.iter().filter(|r| r.method == method && r.mode == mode && r.regularized == regularized).collect();
                let ok: Vec<f64> = cell.iter().filter(|r| r.error.is_none()).map(|r| r.auroc).collect();
                let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
                let (ci_lo, ci_hi) = bootstrap_ci(&ok, spec.bootstrap, spec.level, 0).unwrap_or((f64::NAN, f64::NAN));
                summary.push(BenchSummary {
                    method,
                    mode,
                    regularized,
                    auroc: mean,
                    ci_lo,
                    ci_hi,
                    seeds: ok.len(),
                    failures: cell.len() - ok.len(),
                });
            }
        }
    }
    BenchResult { rows, summary }
}

/// Mean auROC of every cell as a `(method, mode, regularized) → value`
/// listing, handy for gap checks.
pub fn summary_table(result: &BenchResult) -> Vec<(Method, Mode, bool, f64)> {
    result.summary.iter().map(|s| (s.method, s.mode, s.regularized, s.auroc)).collect()
}

#[cfg(test)]
mod tests;
