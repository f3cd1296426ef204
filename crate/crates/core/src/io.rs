//! On-disk formats: dataset and checkpoint directories, attribution
//! artifacts. Arrays are raw little-endian `f64` (or `u8` for binary maps);
//! shapes live in the accompanying `meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{Aggregation, GlobalAttribution, Method};
use crate::dataset::{BinaryMap, Dataset, DatasetMeta};
use crate::diff::Tensor;
use crate::encoder::{Geometry, Layer, MlpEncoder};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Format(String),
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    NotEmpty(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decodes exactly `expected` little-endian `f64` values. Non-finite values
/// are rejected.
pub fn decode_f64s(bytes: &[u8], expected: usize) -> Result<Vec<f64>, IoError> {
    if expected.checked_mul(8) != Some(bytes.len()) {
        return Err(IoError::Format(format!("expected {expected} f64 values, found {} bytes", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(IoError::Format(format!("non-finite value at index {k}")));
    }
    Ok(values)
}

/// Decodes a `rows × cols` map of 0/1 bytes.
pub fn decode_binary_map(bytes: &[u8], rows: usize, cols: usize) -> Result<BinaryMap, IoError> {
    if rows.checked_mul(cols) != Some(bytes.len()) {
        return Err(IoError::Format(format!("expected {rows}x{cols} map, found {} bytes", bytes.len())));
    }
    BinaryMap::new(rows, cols, bytes.to_vec()).ok_or_else(|| IoError::Format("map entries must be 0 or 1".into()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

fn read_tensor(path: &Path, rows: usize, cols: usize) -> Result<Tensor, IoError> {
    let n = rows.checked_mul(cols).ok_or_else(|| IoError::Format(format!("{}: shape overflows", path.display())))?;
    let data = decode_f64s(&read(path)?, n).map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
    Tensor::new(rows, cols, data).map_err(|e| IoError::Format(e.to_string()))
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<(), IoError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(IoError::NotEmpty(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Parses and checks a dataset `meta.json`.
pub fn parse_dataset_meta(bytes: &[u8]) -> Result<DatasetMeta, IoError> {
    let meta: DatasetMeta = serde_json::from_slice(bytes)
        .map_err(|source| IoError::Json { path: PathBuf::from("meta.json"), source })?;
    if meta.partition.iter().sum::<usize>() != meta.latent_dim {
        return Err(IoError::Format("partition does not sum to latent_dim".into()));
    }
    if meta.observed.iter().any(|&g| g >= meta.partition.len()) {
        return Err(IoError::Format("observed group out of range".into()));
    }
    if meta.t.checked_mul(meta.input_dim.max(meta.latent_dim).max(meta.label_dim)).is_none() {
        return Err(IoError::Format("array shapes overflow".into()));
    }
    Ok(meta)
}

pub fn write_dataset(dir: &Path, data: &Dataset, force: bool) -> Result<(), IoError> {
    prepare_dir(dir, force)?;
    write_json(&dir.join("meta.json"), &data.meta)?;
    write(&dir.join("x.f64"), &encode_f64s(data.x.data()))?;
    if let Some(c) = &data.c {
        write(&dir.join("c.f64"), &encode_f64s(c.data()))?;
    }
    if let Some(z) = &data.z {
        write(&dir.join("z.f64"), &encode_f64s(z.data()))?;
    }
    if let Some(a) = &data.ground_truth {
        write(&dir.join("A.u8"), a.data())?;
    }
    for (name, t) in &data.extras {
        write(&dir.join(format!("{name}.f64")), &encode_f64s(t.data()))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let meta = parse_dataset_meta(&read(&dir.join("meta.json"))?)?;
    let x = read_tensor(&dir.join("x.f64"), meta.t, meta.input_dim)?;
    let optional = |name: &str, cols: usize| -> Result<Option<Tensor>, IoError> {
        let path = dir.join(name);
        if path.exists() {
            read_tensor(&path, meta.t, cols).map(Some)
        } else {
            Ok(None)
        }
    };
    let c = if meta.label_dim > 0 { optional("c.f64", meta.label_dim)? } else { None };
    let z = optional("z.f64", meta.latent_dim)?;
    let gt_path = dir.join("A.u8");
    let ground_truth = if gt_path.exists() {
        Some(decode_binary_map(&read(&gt_path)?, meta.input_dim, meta.latent_dim)?)
    } else {
        None
    };
    let mut extras = BTreeMap::new();
    for name in &meta.extras {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(IoError::Format(format!("bad extra array name {name:?}")));
        }
        extras.insert(name.clone(), read_tensor(&dir.join(format!("{name}.f64")), meta.t, 1)?);
    }
    Ok(Dataset { meta, x, c, z, ground_truth, extras })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub partition: Vec<usize>,
    pub geometry: Vec<Geometry>,
    pub output_scale: f64,
    pub seed: u64,
    pub steps: u64,
    /// Weight and bias of every layer, in order.
    pub tensors: Vec<TensorShape>,
}

/// Parses a checkpoint `meta.json` and checks that the declared shapes form
/// a valid encoder.
pub fn parse_checkpoint_meta(bytes: &[u8]) -> Result<CheckpointMeta, IoError> {
    let meta: CheckpointMeta = serde_json::from_slice(bytes)
        .map_err(|source| IoError::Json { path: PathBuf::from("meta.json"), source })?;
    let d: usize = meta.partition.iter().sum();
    let dims = [meta.input_dim, meta.hidden_width, meta.hidden_width, meta.hidden_width, d];
    if meta.tensors.len() != 2 * (dims.len() - 1) || meta.geometry.len() != meta.partition.len() {
        return Err(IoError::Format("checkpoint must list four layers and one geometry per partition".into()));
    }
    for (k, w) in dims.windows(2).enumerate() {
        let (weight, bias) = (&meta.tensors[2 * k], &meta.tensors[2 * k + 1]);
        if (weight.rows, weight.cols) != (w[0], w[1]) || (bias.rows, bias.cols) != (1, w[1]) {
            return Err(IoError::Format(format!("layer {k} has shape {}x{}, expected {}x{}", weight.rows, weight.cols, w[0], w[1])));
        }
    }
    let safe = |f: &str| !f.is_empty() && !f.contains(['/', '\\']) && !f.starts_with('.');
    if !meta.tensors.iter().all(|t| safe(&t.file)) {
        return Err(IoError::Format("tensor file names must be plain file names".into()));
    }
    if !(meta.output_scale.is_finite() && meta.output_scale > 0.0) {
        return Err(IoError::Format("output_scale must be positive".into()));
    }
    Ok(meta)
}

pub fn write_checkpoint(dir: &Path, enc: &MlpEncoder, force: bool) -> Result<(), IoError> {
    prepare_dir(dir, force)?;
    let mut tensors = Vec::new();
    for (k, layer) in enc.layers.iter().enumerate() {
        for (kind, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let file = format!("layer{k}_{kind}.f64");
            write(&dir.join(&file), &encode_f64s(t.data()))?;
            tensors.push(TensorShape { file, rows: t.rows(), cols: t.cols() });
        }
    }
    let meta = CheckpointMeta {
        input_dim: enc.input_dim,
        hidden_width: enc.hidden_width,
        partition: enc.partition.clone(),
        geometry: enc.geometry.clone(),
        output_scale: enc.output_scale,
        seed: enc.seed,
        steps: enc.steps,
        tensors,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn read_checkpoint(dir: &Path) -> Result<MlpEncoder, IoError> {
    let meta = parse_checkpoint_meta(&read(&dir.join("meta.json"))?)?;
    let mut layers = Vec::new();
    for pair in meta.tensors.chunks(2) {
        let weight = read_tensor(&dir.join(&pair[0].file), pair[0].rows, pair[0].cols)?;
        let bias = read_tensor(&dir.join(&pair[1].file), pair[1].rows, pair[1].cols)?;
        layers.push(Layer { weight, bias });
    }
    Ok(MlpEncoder {
        input_dim: meta.input_dim,
        hidden_width: meta.hidden_width,
        partition: meta.partition,
        geometry: meta.geometry,
        output_scale: meta.output_scale,
        seed: meta.seed,
        steps: meta.steps,
        layers,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionMeta {
    pub method: Method,
    pub aggregation: Aggregation,
    pub rows: usize,
    pub cols: usize,
    /// Threshold used for the binary map; `None` means z-score 0.
    pub threshold: Option<f64>,
    pub timesteps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_rank: Option<usize>,
}

pub fn write_attribution(
    dir: &Path,
    global: &GlobalAttribution,
    binary: &BinaryMap,
    threshold: Option<f64>,
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join("attribution.f64"), &encode_f64s(global.scores.data()))?;
    write(&dir.join("attribution_binary.u8"), binary.data())?;
    let meta = AttributionMeta {
        method: global.method,
        aggregation: global.aggregation,
        rows: global.scores.rows(),
        cols: global.scores.cols(),
        threshold,
        timesteps: global.timesteps,
        min_rank: global.min_rank,
    };
    write_json(&dir.join("attribution_meta.json"), &meta)
}

pub fn read_attribution(dir: &Path) -> Result<(GlobalAttribution, BinaryMap, AttributionMeta), IoError> {
    let meta: AttributionMeta = read_json(&dir.join("attribution_meta.json"))?;
    let scores = read_tensor(&dir.join("attribution.f64"), meta.rows, meta.cols)?;
    let binary = decode_binary_map(&read(&dir.join("attribution_binary.u8"))?, meta.rows, meta.cols)?;
    let global = GlobalAttribution {
        method: meta.method,
        aggregation: meta.aggregation,
        scores,
        timesteps: meta.timesteps,
        min_rank: meta.min_rank,
    };
    Ok((global, binary, meta))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write(path, text.as_bytes())
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_json(path, value)
}

pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    read_json(path)
}

#[cfg(test)]
mod tests;
