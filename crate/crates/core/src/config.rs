//! JSON run configuration with `key.path=value` overrides.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attribution::{AttributionConfig, Method};
use crate::bench::BenchSpec;
use crate::claims::{Claim, ClaimsConfig};
use crate::navsim::NavConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override {0:?} must look like key.path=value")]
    Override(String),
    #[error("override {path:?}: {reason}")]
    Path { path: String, reason: String },
}

/// Splits `a.b.c=value`. The value is parsed as JSON when possible and taken
/// as a plain string otherwise, so `mode=hybrid` and `mode="hybrid"` agree.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

/// Sets `path` inside `doc`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut node = doc;
    for (k, key) in path.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::Path {
            path: path.join("."),
            reason: format!("{} is not an object", path[..k].join(".")),
        })?;
        if k + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        node = obj.entry(key.clone()).or_insert(Value::Null);
    }
    Ok(())
}

/// Deep-merges `overlay` into `base`. Objects merge key by key, except that
/// two single-key objects with different keys (an externally tagged enum
/// switching variant) replace each other; everything else is replaced.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let switches_variant = b.len() == 1 && o.len() == 1 && b.keys().next() != o.keys().next();
            if switches_variant {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Starts from `T::default()`, merges `text` (empty means `{}`) over it,
/// applies every override in order and deserializes. Nested sections keep
/// the defaults of their parent rather than of their own type. Unknown keys
/// are rejected by the target types.
pub fn load<T: Serialize + DeserializeOwned + Default>(text: &str, overrides: &[String]) -> Result<T, ConfigError> {
    let mut doc = serde_json::to_value(T::default())?;
    if !text.trim().is_empty() {
        let user: Value = serde_json::from_str(text)?;
        if !user.is_object() {
            return Err(ConfigError::Path { path: String::new(), reason: "config must be a JSON object".into() });
        }
        merge(&mut doc, user);
    }
    for spec in overrides {
        let (path, value) = parse_override(spec)?;
        apply_override(&mut doc, &path, value)?;
    }
    Ok(serde_json::from_value(doc)?)
}

/// How a global map is turned into a connectivity hypothesis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Threshold {
    /// Entries at or above the map mean (z-score 0).
    #[default]
    Zscore,
    /// Entries strictly above `value`.
    Absolute { value: f64 },
    /// Entries strictly above `value · max`.
    Relative { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub nav: NavConfig,
    /// Emits one dataset per noise level under `noise_<k>/` when set.
    pub noise_sweep: Option<Vec<f64>>,
    /// Rate-map bins per side for the per-cell statistics.
    pub bins: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { nav: NavConfig::default(), noise_sweep: None, bins: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Train on labels permuted independently of the observations.
    pub shuffle_labels: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSection {
    pub method: Method,
    pub threshold: Threshold,
    #[serde(flatten)]
    pub config: AttributionConfig,
}

impl Default for AttributeSection {
    fn default() -> Self {
        Self { method: Method::InvertedNeuronGradient, threshold: Threshold::Zscore, config: AttributionConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Directory written by `attribute`.
    pub attribution: Option<PathBuf>,
    /// Latent group of the ground truth; defaults to the first observed one.
    pub group: Option<usize>,
    /// Embedding columns scored; all columns when unset.
    pub columns: Option<Vec<usize>>,
    pub bootstrap: usize,
    pub level: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { attribution: None, group: None, columns: None, bootstrap: 1000, level: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    /// Run the theory checks and write `claims.json` before reporting.
    pub run_claims: bool,
    pub claims: Vec<Claim>,
    pub seeds: Vec<u64>,
    pub setup: ClaimsConfig,
    /// Existing `claims.json` / benchmark `results.json` to summarize.
    pub claims_file: Option<PathBuf>,
    pub results_file: Option<PathBuf>,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            run_claims: false,
            claims: Claim::ALL.to_vec(),
            seeds: vec![0],
            setup: ClaimsConfig::default(),
            claims_file: None,
            results_file: None,
        }
    }
}

/// One document for every subcommand; each reads its own section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Replaces the seed of whichever section the command uses.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    pub force: bool,
    /// Use the full-size generator and training settings.
    pub full_scale: bool,
    pub generate: SynthConfig,
    pub simulate: SimulateSection,
    /// Dataset directory read by train / attribute / evaluate.
    pub dataset: Option<PathBuf>,
    pub train: TrainSection,
    /// Checkpoint directory read by attribute.
    pub checkpoint: Option<PathBuf>,
    pub attribute: AttributeSection,
    pub evaluate: EvaluateSection,
    pub benchmark: BenchSpec,
    pub report: ReportSection,
}

impl RunConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        load(text, overrides)
    }
}
