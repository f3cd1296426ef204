use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tsattr::attribution::{attribute as attribute_map, binarize, zscore_binarize, AttributionError};
use tsattr::bench::{run_benchmark, BenchSpec};
use tsattr::config::{RunConfig, Threshold};
use tsattr::dataset::BinaryMap;
use tsattr::encoder::EncoderError;
use tsattr::eval::{auroc, EvalError};
use tsattr::io::{self, IoError};
use tsattr::navsim::{cell_stats, make_nav_dataset, median, CellKind, NavConfig};
use tsattr::synth::{make_dataset, SynthConfig};
use tsattr::trainer::{goodness_of_fit, train as train_encoder, TrainError};

#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent configuration / inputs: exit code 2.
    Config(String),
    /// Non-finite values or numerical breakdown: exit code 3.
    Numerical(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Other(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Encoder(EncoderError::Diff(_)) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Model(EncoderError::Diff(_)) | AttributionError::Shape(..) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Degenerate => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))
}

fn output(cfg: &RunConfig) -> Result<&Path, CliError> {
    required(&cfg.output, "output")
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain data serializes"));
}

pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    let seed = cfg.seed.unwrap_or(cfg.generate.seed);
    if cfg.full_scale {
        SynthConfig { seed, ..SynthConfig::full_scale(seed) }
    } else {
        SynthConfig { seed, ..cfg.generate.clone() }
    }
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = output(cfg)?;
    let synth = synth_config(cfg);
    let (data, _) = make_dataset(&synth).map_err(|e| CliError::Config(e.to_string()))?;
    io::write_dataset(out, &data, cfg.force)?;
    log::info!("wrote {} × {} dataset to {}", data.len(), data.x.cols(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct CellSummary {
    cells: Vec<tsattr::navsim::CellStats>,
    median_grid_score_grid: Option<f64>,
    median_grid_score_place: Option<f64>,
}

fn write_nav(dir: &Path, nav: &NavConfig, bins: usize, force: bool) -> Result<(), CliError> {
    let (data, traj) = make_nav_dataset(nav).map_err(|e| CliError::Config(e.to_string()))?;
    io::write_dataset(dir, &data, force)?;
    let stats = cell_stats(&data, &traj.position, bins);
    let kind_median = |kind: CellKind| {
        let mut g: Vec<f64> = stats.iter().filter(|s| s.kind == kind).map(|s| s.grid_score).filter(|v| v.is_finite()).collect();
        median(&mut g)
    };
    let summary = CellSummary {
        median_grid_score_grid: kind_median(CellKind::Grid),
        median_grid_score_place: kind_median(CellKind::Place),
        cells: stats,
    };
    io::write_json_file(&dir.join("cells.json"), &summary)?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = output(cfg)?;
    let nav = NavConfig { seed: cfg.seed.unwrap_or(cfg.simulate.nav.seed), ..cfg.simulate.nav.clone() };
    match &cfg.simulate.noise_sweep {
        None => write_nav(out, &nav, cfg.simulate.bins, cfg.force)?,
        Some(levels) => {
            io::prepare_dir(out, cfg.force)?;
            for (k, &noise_std) in levels.iter().enumerate() {
                let dir = out.join(format!("noise_{k}"));
                write_nav(&dir, &NavConfig { noise_std, ..nav.clone() }, cfg.simulate.bins, cfg.force)?;
            }
            io::write_json_file(&out.join("sweep.json"), levels)?;
        }
    }
    log::info!("wrote navigation data to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    final_infonce: f64,
    goodness_of_fit: f64,
    steps: usize,
    seconds: f64,
    shuffled_labels: bool,
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let out = output(cfg)?;
    let data = io::read_dataset(required(&cfg.dataset, "dataset")?)?;
    let data = if cfg.train.shuffle_labels { data.with_shuffled_labels(cfg.seed.unwrap_or(cfg.train.config.seed)) } else { data };
    let mut tc = cfg.train.config.clone();
    if cfg.full_scale {
        tc = tc.full_scale();
    }
    if let Some(seed) = cfg.seed {
        tc.seed = seed;
    }
    let outcome = train_encoder(&data, &tc)?;
    io::write_checkpoint(out, &outcome.encoder, cfg.force)?;
    io::write_text(&out.join("trace.csv"), &outcome.trace.to_csv())?;
    let summary = TrainSummary {
        final_infonce: outcome.trace.final_infonce,
        goodness_of_fit: goodness_of_fit(&outcome.trace),
        steps: tc.steps,
        seconds: outcome.trace.seconds,
        shuffled_labels: cfg.train.shuffle_labels,
    };
    io::write_json_file(&out.join("train.json"), &summary)?;
    print_json(&summary);
    Ok(())
}

pub fn threshold_map(scores: &tsattr::diff::Tensor, threshold: Threshold) -> (BinaryMap, Option<f64>) {
    match threshold {
        Threshold::Zscore => (zscore_binarize(scores), None),
        Threshold::Absolute { value } => (binarize(scores, value), Some(value)),
        Threshold::Relative { value } => {
            let t = value * scores.max_abs();
            (binarize(scores, t), Some(t))
        }
    }
}

pub fn attribute(cfg: &RunConfig) -> Result<(), CliError> {
    let out = output(cfg)?;
    let data = io::read_dataset(required(&cfg.dataset, "dataset")?)?;
    let encoder = io::read_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    if encoder.input_dim != data.x.cols() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} inputs, dataset has {}",
            encoder.input_dim,
            data.x.cols()
        )));
    }
    let acfg = tsattr::attribution::AttributionConfig {
        seed: cfg.seed.unwrap_or(cfg.attribute.config.seed),
        ..cfg.attribute.config.clone()
    };
    let global = attribute_map(&encoder, &data.x, cfg.attribute.method, &acfg)?;
    if !global.scores.is_finite() {
        return Err(CliError::Numerical("attribution map has non-finite entries".into()));
    }
    let (binary, threshold) = threshold_map(&global.scores, cfg.attribute.threshold);
    io::prepare_dir(out, cfg.force)?;
    io::write_attribution(out, &global, &binary, threshold)?;
    log::info!("{} map over {} timesteps written to {}", cfg.attribute.method.name(), global.timesteps, out.display());
    Ok(())
}

#[derive(Serialize)]
struct Metrics {
    method: String,
    group: usize,
    columns: Vec<usize>,
    auroc: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    level: f64,
    true_positives: usize,
    false_positives: usize,
    false_negatives: usize,
    true_negatives: usize,
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = output(cfg)?;
    let data = io::read_dataset(required(&cfg.dataset, "dataset")?)?;
    let (global, binary, _) = io::read_attribution(required(&cfg.evaluate.attribution, "evaluate.attribution")?)?;
    if data.ground_truth.is_none() {
        return Err(CliError::Config("dataset has no ground-truth attribution map".into()));
    }
    let group = match cfg.evaluate.group {
        Some(g) => g,
        None => data.meta.observed.first().copied().unwrap_or(0),
    };
    if group >= data.meta.partition.len() {
        return Err(CliError::Config(format!("group {group} out of range")));
    }
    if global.scores.rows() != data.x.cols() {
        return Err(CliError::Config("attribution map does not match the dataset width".into()));
    }
    let columns = cfg.evaluate.columns.clone().unwrap_or_else(|| (0..global.scores.cols()).collect());
    if columns.is_empty() || columns.iter().any(|&c| c >= global.scores.cols()) {
        return Err(CliError::Config("evaluate.columns out of range".into()));
    }
    let truth = data.group_ground_truth(group).expect("checked above").repeat_col(0, columns.len());
    let scores = global.select_cols(&columns);
    let roc = auroc(&scores, &truth)?;
    let labels: Vec<bool> = truth.data().iter().map(|&v| v != 0).collect();
    let seed = cfg.seed.unwrap_or(0);
    let ci = tsattr::bench::auroc_ci(scores.data(), &labels, cfg.evaluate.bootstrap, cfg.evaluate.level, seed);
    let bin = binary.select_cols(&columns);
    let mut counts = [0usize; 4];
    for (&b, &t) in bin.data().iter().zip(truth.data()) {
        counts[usize::from(b) * 2 + usize::from(t)] += 1;
    }
    let metrics = Metrics {
        method: global.method.name().to_string(),
        group,
        columns,
        auroc: roc.auroc,
        ci_lo: ci.map(|c| c.0),
        ci_hi: ci.map(|c| c.1),
        level: cfg.evaluate.level,
        true_negatives: counts[0],
        false_negatives: counts[1],
        false_positives: counts[2],
        true_positives: counts[3],
    };
    io::prepare_dir(out, cfg.force)?;
    let mut csv = String::from("threshold,fpr,tpr\n");
    for k in 0..roc.tpr.len() {
        csv += &format!("{},{},{}\n", roc.thresholds[k], roc.fpr[k], roc.tpr[k]);
    }
    io::write_text(&out.join("roc.csv"), &csv)?;
    io::write_json_file(&out.join("metrics.json"), &metrics)?;
    print_json(&metrics);
    Ok(())
}

pub fn benchmark(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let out = output(cfg)?;
    let mut spec: BenchSpec = cfg.benchmark.clone();
    if let Some(seed) = cfg.seed {
        spec.seeds = vec![seed];
    }
    if cfg.full_scale {
        spec.train = spec.train.full_scale();
    }
    spec.validate().map_err(CliError::Config)?;
    io::prepare_dir(out, cfg.force)?;
    let result = run_benchmark(&spec, jobs).map_err(CliError::Other)?;
    io::write_text(&out.join("results.csv"), &result.to_csv())?;
    io::write_json_file(&out.join("results.json"), &result)?;
    let failures = result.rows.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        log::warn!("{failures} of {} cells failed; see results.json", result.rows.len());
    }
    print!("{}", crate::report::bench_table(&result));
    Ok(())
}
