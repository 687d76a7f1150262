//! Dataset (`LQRF`) and checkpoint (`LQRC`) files.
//!
//! Layout of both formats:
//!
//! ```text
//! <MAGIC>\n
//! <header byte length>\n
//! <pretty-printed JSON header>\n
//! <payload: f32 little-endian sections in manifest order>
//! ```
//!
//! The header carries a manifest entry per tensor with its name, shape, byte
//! offset into the payload and CRC-32 of its bytes. Values are stored as
//! `f32`; reading widens them back to `f64`, so `write ∘ read ∘ write` is the
//! identity on bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{GenerationMeta, Trajectory, TrajectoryDataset};
use crate::lqr::LqrSolution;
use crate::model::{self, ModelConfig, TransformerParams};
use crate::pipeline::{NormStats, PipelineConfig};
use crate::system::LtiSystem;
use crate::tensor::Tensor;
use crate::training::{OptimizerKind, OptimizerState, TrainConfig, TrainState};

pub const DATASET_MAGIC: &str = "LQRF";
pub const CHECKPOINT_MAGIC: &str = "LQRC";
pub const FORMAT_VERSION: u32 = 1;
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}")]
    File { path: String, source: std::io::Error },
    #[error("not a {expected} file")]
    Magic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor {name}: stored bytes fail the integrity check")]
    Integrity { name: String },
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
    #[error("inconsistent contents: {0}")]
    Content(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format: String,
    version: u32,
    code_version: String,
    header: H,
    tensors: Vec<ManifestEntry>,
}

fn encode<H: Serialize>(magic: &str, header: &H, tensors: &[(String, &Tensor<f64>)]) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len();
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            crc32: crc32fast::hash(&payload[offset..]),
        });
    }
    let env = Envelope {
        format: magic.to_string(),
        version: FORMAT_VERSION,
        code_version: CODE_VERSION.to_string(),
        header,
        tensors: manifest,
    };
    let json = serde_json::to_string_pretty(&env).expect("headers serialize");
    let mut out = format!("{magic}\n{}\n{json}\n", json.len()).into_bytes();
    out.extend_from_slice(&payload);
    out
}

fn next_line<'b>(bytes: &'b [u8], pos: &mut usize) -> Option<&'b [u8]> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n')?;
    *pos += end + 1;
    Some(&rest[..end])
}

fn decode<H: DeserializeOwned>(magic: &'static str, bytes: &[u8]) -> Result<(H, Vec<(String, Tensor<f64>)>), IoError> {
    let mut pos = 0;
    if next_line(bytes, &mut pos) != Some(magic.as_bytes()) {
        return Err(IoError::Magic { expected: magic });
    }
    let len: usize = next_line(bytes, &mut pos)
        .and_then(|l| std::str::from_utf8(l).ok())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Header("missing header length".into()))?;
    let json = bytes.get(pos..pos + len).ok_or_else(|| IoError::Header("truncated header".into()))?;
    pos += len + 1;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| IoError::Header(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(IoError::Version(version));
    }
    let env: Envelope<H> = serde_json::from_value(value).map_err(|e| IoError::Header(e.to_string()))?;
    let payload = bytes.get(pos..).ok_or_else(|| IoError::Header("missing payload".into()))?;
    let mut out = Vec::with_capacity(env.tensors.len());
    for m in env.tensors {
        let n: usize = m.shape.iter().product();
        let slice = payload
            .get(m.offset..m.offset + 4 * n)
            .ok_or_else(|| IoError::Tensor { name: m.name.clone(), detail: "payload is truncated".into() })?;
        if crc32fast::hash(slice) != m.crc32 {
            return Err(IoError::Integrity { name: m.name });
        }
        let data = slice
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let t = Tensor::new(m.shape, data).map_err(|e| IoError::Tensor { name: m.name.clone(), detail: e.to_string() })?;
        out.push((m.name, t));
    }
    Ok((env.header, out))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

struct Named {
    tensors: BTreeMap<String, Tensor<f64>>,
}

impl Named {
    fn new(list: Vec<(String, Tensor<f64>)>) -> Self {
        Self { tensors: list.into_iter().collect() }
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f64>, IoError> {
        let t = self.tensors.remove(name).ok_or_else(|| IoError::Tensor { name: name.into(), detail: "missing from manifest".into() })?;
        if t.shape() != shape {
            return Err(IoError::Tensor {
                name: name.into(),
                detail: format!("shape {:?} does not match the expected {:?}", t.shape(), shape),
            });
        }
        Ok(t)
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemRecord {
    pub id: usize,
    pub name: String,
    pub family: String,
    pub n_x: usize,
    pub n_u: usize,
    pub dt: f64,
    pub ic_bound: f64,
    /// Substream seed of this system's initial conditions.
    pub seed: u64,
    pub riccati_residual: f64,
    pub riccati_iterations: usize,
    pub stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n_systems: usize,
    pub trajectories_per_system: usize,
    pub horizon: usize,
    pub generation: GenerationMeta,
    pub systems: Vec<SystemRecord>,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

/// A dataset as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub dataset: TrajectoryDataset,
    pub stats: Option<Vec<NormStats>>,
    pub run_config: Option<serde_json::Value>,
}

pub fn encode_dataset(ds: &TrajectoryDataset, stats: Option<&[NormStats]>, run_config: Option<&serde_json::Value>) -> Result<Vec<u8>, IoError> {
    let n = ds.systems.len();
    if stats.is_some_and(|s| s.len() != n) || ds.solutions.len() != n {
        return Err(IoError::Content("one solution and one statistics record per system required".into()));
    }
    let systems = ds
        .systems
        .iter()
        .zip(&ds.solutions)
        .enumerate()
        .map(|(i, (s, sol))| SystemRecord {
            id: i,
            name: s.name.clone(),
            family: s.family.clone(),
            n_x: s.n_x(),
            n_u: s.n_u(),
            dt: s.dt,
            ic_bound: s.ic_bound,
            seed: crate::rng::derive_seed(ds.meta.seed, crate::rng::DATAGEN, i as u64),
            riccati_residual: sol.residual,
            riccati_iterations: sol.iterations,
            stats: stats.map(|s| s[i]),
        })
        .collect();
    let header = DatasetHeader {
        n_systems: n,
        trajectories_per_system: ds.meta.trajectories_per_system,
        horizon: ds.meta.horizon,
        generation: ds.meta.clone(),
        systems,
        run_config: run_config.cloned(),
    };
    let mut tensors: Vec<(String, &Tensor<f64>)> = Vec::new();
    for (i, (s, sol)) in ds.systems.iter().zip(&ds.solutions).enumerate() {
        for (k, t) in [("A", &s.a), ("B", &s.b), ("Q", &s.q), ("R", &s.r), ("P", &sol.p), ("K", &sol.k)] {
            tensors.push((format!("system{i}.{k}"), t));
        }
    }
    for tr in &ds.trajectories {
        tensors.push((format!("traj{}.{}.X", tr.system_id, tr.init_id), &tr.states));
        tensors.push((format!("traj{}.{}.U", tr.system_id, tr.init_id), &tr.controls));
    }
    Ok(encode(DATASET_MAGIC, &header, &tensors))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile, IoError> {
    let (h, list): (DatasetHeader, _) = decode(DATASET_MAGIC, bytes)?;
    if h.systems.len() != h.n_systems {
        return Err(IoError::Content(format!("header lists {} systems, declares {}", h.systems.len(), h.n_systems)));
    }
    let mut named = Named::new(list);
    let (j, horizon) = (h.trajectories_per_system, h.horizon);
    let mut systems = Vec::with_capacity(h.n_systems);
    let mut solutions = Vec::with_capacity(h.n_systems);
    let mut trajectories = Vec::with_capacity(h.n_systems * j);
    for (i, rec) in h.systems.iter().enumerate() {
        let (n, m) = (rec.n_x, rec.n_u);
        let mut get = |k: &str, shape: &[usize]| named.take(&format!("system{i}.{k}"), shape);
        let (a, b, q, r) = (get("A", &[n, n])?, get("B", &[n, m])?, get("Q", &[n, n])?, get("R", &[m, m])?);
        let (p, k) = (get("P", &[n, n])?, get("K", &[m, n])?);
        let sys = LtiSystem::new(i, rec.name.clone(), rec.family.clone(), a, b, q, r, rec.dt)
            .map_err(|e| IoError::Content(format!("system {i}: {e}")))?
            .with_ic_bound(rec.ic_bound);
        systems.push(sys);
        solutions.push(LqrSolution { p, k, residual: rec.riccati_residual, iterations: rec.riccati_iterations });
        for init in 0..j {
            trajectories.push(Trajectory {
                system_id: i,
                init_id: init,
                states: named.take(&format!("traj{i}.{init}.X"), &[horizon, n])?,
                controls: named.take(&format!("traj{i}.{init}.U"), &[horizon, m])?,
            });
        }
    }
    if let Some(extra) = named.tensors.keys().next() {
        return Err(IoError::Tensor { name: extra.clone(), detail: "not expected by the header".into() });
    }
    let stats = h.systems.iter().map(|s| s.stats).collect::<Option<Vec<_>>>();
    Ok(DatasetFile {
        dataset: TrajectoryDataset { systems, solutions, trajectories, meta: h.generation },
        stats,
        run_config: h.run_config,
    })
}

pub fn save_dataset(path: &Path, ds: &TrajectoryDataset, stats: Option<&[NormStats]>, run_config: Option<&serde_json::Value>) -> Result<(), IoError> {
    write_file(path, &encode_dataset(ds, stats, run_config)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile, IoError> {
    decode_dataset(&read_file(path)?)
}

// ------------------------------------------------------------- checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub pipeline: PipelineConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Statistics per system family, used at inference.
    #[serde(default)]
    pub stats: BTreeMap<String, NormStats>,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn params(&self) -> &TransformerParams<f64> {
        &self.state.params
    }
}

pub fn encode_checkpoint(header: &CheckpointHeader, state: &TrainState) -> Result<Vec<u8>, IoError> {
    let cfg = &state.params.config;
    if *cfg != header.model || state.epoch != header.epoch || state.optimizer.kind != header.optimizer || state.optimizer.step != header.optimizer_step {
        return Err(IoError::Content("checkpoint header disagrees with the training state".into()));
    }
    let names: Vec<String> = model::layout(cfg).into_iter().map(|s| s.name).collect();
    let mut tensors: Vec<(String, &Tensor<f64>)> = names.iter().cloned().zip(&state.params.tensors).collect();
    for (prefix, moments) in [("adam.m.", &state.optimizer.m), ("adam.v.", &state.optimizer.v)] {
        tensors.extend(names.iter().map(|n| format!("{prefix}{n}")).zip(moments.iter()));
    }
    Ok(encode(CHECKPOINT_MAGIC, header, &tensors))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, IoError> {
    let (header, list): (CheckpointHeader, _) = decode(CHECKPOINT_MAGIC, bytes)?;
    header.model.validate().map_err(|e| IoError::Content(e.to_string()))?;
    if !header.model.matches_pipeline(&header.pipeline) {
        return Err(IoError::Content("model and pipeline configs disagree".into()));
    }
    let specs = model::layout(&header.model);
    let mut named = Named::new(list);
    let mut take_all = |prefix: &str| specs.iter().map(|s| named.take(&format!("{prefix}{}", s.name), &s.shape)).collect::<Result<Vec<_>, _>>();
    let tensors = take_all("")?;
    let (m, v) = match header.optimizer {
        OptimizerKind::Adam => (take_all("adam.m.")?, take_all("adam.v.")?),
        OptimizerKind::PlainGd => (Vec::new(), Vec::new()),
    };
    if let Some(extra) = named.tensors.keys().next() {
        return Err(IoError::Tensor { name: extra.clone(), detail: "not expected by the model config".into() });
    }
    let params = TransformerParams::new(header.model, tensors).map_err(|e| IoError::Content(e.to_string()))?;
    let optimizer = OptimizerState { kind: header.optimizer, step: header.optimizer_step, m, v };
    let state = TrainState { params, optimizer, epoch: header.epoch };
    Ok(Checkpoint { header, state })
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, state: &TrainState) -> Result<(), IoError> {
    write_file(path, &encode_checkpoint(header, state)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    decode_checkpoint(&read_file(path)?)
}
