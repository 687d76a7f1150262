//! Masked Cauchy regression, mini-batch updates and few-shot fine-tuning.
//!
//! Training runs in `f64`. At the end of every epoch the parameters and the
//! optimizer moments are rounded to `f32`, so a checkpoint written at that
//! point reproduces the in-memory state exactly and resuming is bit-exact.
//!
//! Each mini-batch is cut into fixed chunks of [`GRAD_CHUNK`] samples whose
//! gradients are computed in parallel and summed in chunk order, so results
//! do not depend on the worker count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Trajectory, TrajectoryDataset};
use crate::model::{self, ModelConfig, ModelError, TransformerParams};
use crate::pipeline::{self, Batch, NormStats, PipelineConfig, PipelineError, SampleSet};
use crate::rng;
use crate::tape::{ParamId, Tape, TapeError, Var};
use crate::tensor::{ShapeError, Tensor};

/// Samples per gradient shard.
pub const GRAD_CHUNK: usize = 64;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model config does not match the pipeline: {0}")]
    Mismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, state: Box<TrainState> },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain-gd" | "gd" | "sgd" => Ok(Self::PlainGd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected plain-gd or adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PlainGd => "plain-gd",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub xi: f64,
    /// Fraction of each system's trajectories used for training.
    pub split: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1e-5,
            batch_size: 4096,
            n_epochs: 500,
            xi: 1.0,
            split: 0.95,
            seed: 0,
            optimizer: OptimizerKind::PlainGd,
            clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(TrainError::Config(format!("eta must be a finite non-negative number, got {}", self.eta)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(TrainError::Config(format!("xi must be positive, got {}", self.xi)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(TrainError::Config(format!("split must lie in (0, 1), got {}", self.split)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `(1/B) Σ_j ln(1 + ‖κ_j ⊙ (pred_j − target_j)‖² / ξ²)`.
pub fn masked_cauchy_loss(preds: &Tensor<f64>, targets: &Tensor<f64>, masks: &Tensor<f64>, xi: f64) -> Result<f64, ShapeError> {
    Ok(masked_cauchy_sum(preds, targets, masks, xi)? / preds.rows() as f64)
}

fn masked_cauchy_sum(preds: &Tensor<f64>, targets: &Tensor<f64>, masks: &Tensor<f64>, xi: f64) -> Result<f64, ShapeError> {
    let r = preds.sub(targets)?.hadamard(masks)?;
    let inv = 1.0 / (xi * xi);
    Ok((0..r.rows()).map(|i| (r.row(i).iter().map(|v| v * v).sum::<f64>() * inv).ln_1p()).sum())
}

/// Sum (not mean) of per-row masked Cauchy terms, recorded on `tape`.
pub fn masked_cauchy_sum_tape(tape: &mut Tape<'_, f64>, pred: Var, target: Var, mask: Var, xi: f64) -> Result<Var, ShapeError> {
    let d = tape.sub(pred, target)?;
    let m = tape.mul(d, mask)?;
    let rs = tape.row_sum_squares(m);
    let scaled = tape.scale(rs, 1.0 / (xi * xi));
    let l = tape.log1p(scaled);
    Ok(tape.sum(l))
}

/// Adam moments; empty for plain gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &TransformerParams<f64>) -> Self {
        let zeros = || params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        match kind {
            OptimizerKind::PlainGd => Self { kind, step: 0, m: Vec::new(), v: Vec::new() },
            OptimizerKind::Adam => Self { kind, step: 0, m: zeros(), v: zeros() },
        }
    }

    fn apply(&mut self, params: &mut TransformerParams<f64>, grads: &[Tensor<f64>], eta: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::PlainGd => {
                for (p, g) in params.tensors.iter_mut().zip(grads) {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= eta * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let (w, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (k, &gi) in g.data().iter().enumerate() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gi;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gi * gi;
                        w[k] -= eta * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: TransformerParams<f64>,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: TransformerParams<f64>, kind: OptimizerKind) -> Self {
        let optimizer = OptimizerState::new(kind, &params);
        Self { params, optimizer, epoch: 0 }
    }

    /// Rounds parameters and moments to the nearest `f32`.
    pub fn snap_to_f32(&mut self) {
        let all = self.params.tensors.iter_mut().chain(&mut self.optimizer.m).chain(&mut self.optimizer.v);
        for t in all {
            for w in t.data_mut() {
                *w = f64::from(*w as f32);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the pre-update mini-batch losses seen during the epoch.
    pub train_loss: f64,
    /// Loss over the validation split after the epoch; `NaN` without one.
    pub val_loss: f64,
    pub wall_seconds: f64,
}

/// Training and validation windows plus the statistics used to build them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: SampleSet,
    pub val: SampleSet,
    pub stats: Vec<NormStats>,
}

/// Per-system statistics over all `J` trajectories of each system.
pub fn system_stats(ds: &TrajectoryDataset) -> Result<Vec<NormStats>, PipelineError> {
    (0..ds.systems.len()).map(|i| pipeline::compute_stats(ds.trajectories_of(i))).collect()
}

/// Statistics pooled over every trajectory of each family.
pub fn family_stats(ds: &TrajectoryDataset) -> Result<std::collections::BTreeMap<String, NormStats>, PipelineError> {
    let mut by_family: std::collections::BTreeMap<String, Vec<&Trajectory>> = Default::default();
    for t in &ds.trajectories {
        by_family.entry(ds.systems[t.system_id].family.clone()).or_default().push(t);
    }
    by_family.into_iter().map(|(f, ts)| Ok((f, pipeline::compute_stats(ts)?))).collect()
}

/// Stratified trajectory-level split: each system keeps
/// `clamp(round(split·J), 1, J−1)` trajectories for training (all of them when `J = 1`).
pub fn split_trajectories(trajs: &[Trajectory], split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_system: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (k, t) in trajs.iter().enumerate() {
        by_system.entry(t.system_id).or_default().push(k);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (sid, mut ids) in by_system {
        ids.shuffle(&mut rng::substream(seed, rng::SPLIT, sid as u64));
        let j = ids.len();
        let n_train = if j == 1 { 1 } else { ((split * j as f64).round() as usize).clamp(1, j - 1) };
        train.extend_from_slice(&ids[..n_train]);
        val.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

impl TrainingData {
    /// Splits `trajs` and windows both halves with `stats[system_id]`.
    pub fn new(cfg: PipelineConfig, trajs: &[Trajectory], stats: Vec<NormStats>, split: f64, seed: u64) -> Result<Self, TrainError> {
        let (tr, va) = split_trajectories(trajs, split, seed);
        let stats_of = |i: usize| stats[i];
        let train = SampleSet::from_trajectories(cfg, tr.iter().map(|&k| &trajs[k]), stats_of)?;
        let val = SampleSet::from_trajectories(cfg, va.iter().map(|&k| &trajs[k]), stats_of)?;
        Ok(Self { train, val, stats })
    }

    pub fn from_dataset(cfg: PipelineConfig, ds: &TrajectoryDataset, split: f64, seed: u64) -> Result<Self, TrainError> {
        let stats = system_stats(ds)?;
        Self::new(cfg, &ds.trajectories, stats, split, seed)
    }
}

/// Summed loss and summed gradients (in layout order) over one batch.
pub fn batch_loss_and_grads(params: &TransformerParams<f64>, batch: &Batch, xi: f64) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let vars = model::bind(&mut tape, params, true);
    let s = tape.constant_ref(&batch.s);
    let pred = model::forward_tape(&mut tape, cfg, &vars, s)?;
    let target = tape.constant_ref(&batch.targets);
    let mask = tape.constant_ref(&batch.masks);
    let loss = masked_cauchy_sum_tape(&mut tape, pred, target, mask, xi)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?.into_map();
    let out = params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| grads.remove(&ParamId(i)).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, out))
}

/// Mean loss and mean gradient over `ids`, reduced in fixed chunk order.
pub fn mean_loss_and_grads(params: &TransformerParams<f64>, set: &SampleSet, ids: &[usize], xi: f64) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
    let parts = ids
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| batch_loss_and_grads(params, &set.batch(chunk), xi))
        .collect::<Result<Vec<_>, _>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| TrainError::Config("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi)?;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((loss * inv, grads))
}

/// Mean loss over every sample of `set`; `NaN` when empty.
pub fn evaluate_loss(params: &TransformerParams<f64>, set: &SampleSet, xi: f64) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let ids: Vec<usize> = (0..set.len()).collect();
    let sums = ids
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let b = set.batch(chunk);
            let pred = model::predict_batch(params, &b.s)?;
            Ok(masked_cauchy_sum(&pred, &b.targets, &b.masks, xi)?)
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(sums.iter().sum::<f64>() / set.len() as f64)
}

fn check_compat(model: &ModelConfig, pipe: &PipelineConfig) -> Result<(), TrainError> {
    if !model.matches_pipeline(pipe) {
        return Err(TrainError::Mismatch(format!(
            "model expects w = {}, d_in = {}, n_u_max = {}; data has w = {}, d_in = {}, n_u_max = {}",
            model.window,
            model.d_in,
            model.n_u_max,
            pipe.window,
            pipe.d_in(),
            pipe.n_u_max
        )));
    }
    Ok(())
}

/// Runs epochs `state.epoch + 1 ..= cfg.n_epochs`, calling `observer` after
/// each one with the snapped state.
pub fn train(
    data: &TrainingData,
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &TrainState),
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate()?;
    check_compat(&state.params.config, &data.train.config)?;
    if state.optimizer.kind != cfg.optimizer {
        return Err(TrainError::Config(format!(
            "state was trained with {}, config asks for {}",
            state.optimizer.kind, cfg.optimizer
        )));
    }
    if data.train.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.n_epochs {
        let started = Instant::now();
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, rng::SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = mean_loss_and_grads(&state.params, &data.train, ids, cfg.xi)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch: b, state: Box::new(state.clone()) });
            }
            if let Some(c) = cfg.clip {
                let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    let s = c / norm;
                    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
                }
            }
            state.optimizer.apply(&mut state.params, &grads, cfg.eta);
            total += loss;
            batches += 1;
        }
        state.snap_to_f32();
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_loss: evaluate_loss(&state.params, &data.val, cfg.xi)?,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        observer(&record, state);
        history.push(record);
    }
    Ok(history)
}

/// Continues training pretrained parameters on new data with a fresh
/// optimizer for `cfg.n_epochs` epochs (one for the few-shot protocol).
pub fn finetune(
    data: &TrainingData,
    pretrained: &TransformerParams<f64>,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord, &TrainState),
) -> Result<(TransformerParams<f64>, Vec<EpochRecord>), TrainError> {
    let mut state = TrainState::new(pretrained.clone(), cfg.optimizer);
    let history = train(data, &mut state, cfg, observer)?;
    Ok((state.params, history))
}

/// Median of a non-empty slice, ignoring NaNs; `NaN` if nothing remains.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
