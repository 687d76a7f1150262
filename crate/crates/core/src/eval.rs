//! Closed-loop deployment of a policy and the reported metrics.
//!
//! A rollout standardizes each new state with the system's statistics, slides
//! it into the `(w+1)`-row window (rows before `t = 0` are all zero), queries
//! the policy, de-standardizes its output and applies the first `n_u` entries.
//! Rollouts of one system run in lockstep so every policy query is batched.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{Trajectory, TrajectoryDataset};
use crate::linalg;
use crate::lqr::{self, LqrError, LqrSolution, DEFAULT_BLOWUP};
use crate::model::{self, ModelConfig, ModelError, TransformerParams};
use crate::pipeline::{self, NormStats, PipelineConfig, PipelineError};
use crate::rng;
use crate::system::{make_variants, LtiSystem, SystemError, VariantSpec};
use crate::tensor::{ShapeError, Tensor};
use crate::training::{self, TrainConfig, TrainError, TrainState, TrainingData};

/// A rollout counts as stabilized when it never trips the divergence guard
/// and `‖x_T‖ ≤ STABILIZED_DECAY · ‖x_0‖`.
pub const STABILIZED_DECAY: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Lqr(#[from] LqrError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
}

/// A policy acting on standardized windows.
pub trait StandardizedPolicy: Sync {
    fn pipeline(&self) -> &PipelineConfig;
    /// `B` stacked windows (`B·(w+1) × d_in`) to `B × n_u_max` standardized controls.
    fn predict(&self, s: &Tensor<f64>) -> Result<Tensor<f64>, EvalError>;
}

pub struct TransformerPolicy<'a> {
    pub params: &'a TransformerParams<f64>,
    pub pipeline: PipelineConfig,
}

impl<'a> TransformerPolicy<'a> {
    pub fn new(params: &'a TransformerParams<f64>, pipeline: PipelineConfig) -> Result<Self, EvalError> {
        if !params.config.matches_pipeline(&pipeline) {
            return Err(EvalError::Invalid("model config does not match the pipeline".into()));
        }
        Ok(Self { params, pipeline })
    }
}

impl StandardizedPolicy for TransformerPolicy<'_> {
    fn pipeline(&self) -> &PipelineConfig {
        &self.pipeline
    }

    fn predict(&self, s: &Tensor<f64>) -> Result<Tensor<f64>, EvalError> {
        Ok(model::predict_batch(self.params, s)?)
    }
}

/// `u = −K x` routed through the standardized interface: reads `x̂_t` from
/// the last window row, de-standardizes, applies the gain and standardizes
/// the padded control.
pub struct LqrOraclePolicy<'a> {
    pub solution: &'a LqrSolution<f64>,
    pub stats: NormStats,
    pub pipeline: PipelineConfig,
}

impl StandardizedPolicy for LqrOraclePolicy<'_> {
    fn pipeline(&self) -> &PipelineConfig {
        &self.pipeline
    }

    fn predict(&self, s: &Tensor<f64>) -> Result<Tensor<f64>, EvalError> {
        let n = self.pipeline.seq_len();
        let n_x = self.solution.k.cols();
        let batch = s.rows() / n;
        let mut out = Vec::with_capacity(batch * self.pipeline.n_u_max);
        for b in 0..batch {
            let x = self.stats.destandardize_state(&s.row(b * n + n - 1)[..n_x]);
            let u = self.solution.control(&x);
            out.extend(pipeline::pad(&self.stats.standardize_control(&u), self.pipeline.n_u_max)?);
        }
        Ok(Tensor::new(vec![batch, self.pipeline.n_u_max], out)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRollout {
    pub system_id: usize,
    pub x0: Vec<f64>,
    /// States visited before each control, `steps × n_x`.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// `+∞` iff diverged.
    pub cost: f64,
    pub diverged: bool,
    /// `‖x_T‖`, or `+∞` when diverged.
    pub final_norm: f64,
}

impl PolicyRollout {
    pub fn stabilized(&self) -> bool {
        let n0 = norm(&self.x0);
        !self.diverged && self.final_norm <= STABILIZED_DECAY * n0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

struct Live {
    x: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    out: PolicyRollout,
    done: bool,
}

/// Runs one closed-loop rollout per initial state, querying `policy` once per
/// step for all rollouts still running.
pub fn rollout_batch(
    sys: &LtiSystem<f64>,
    policy: &dyn StandardizedPolicy,
    stats: &NormStats,
    x0s: &[Vec<f64>],
    horizon: usize,
    blowup: f64,
) -> Result<Vec<PolicyRollout>, EvalError> {
    let cfg = *policy.pipeline();
    let (n_x, n_u) = (sys.n_x(), sys.n_u());
    let enc = pipeline::dim_encoding(n_x, n_u, &cfg)?;
    let (seq, d_in) = (cfg.seq_len(), cfg.d_in());
    if let Some(bad) = x0s.iter().find(|x| x.len() != n_x) {
        return Err(EvalError::Invalid(format!("initial state of length {} for a system with {n_x} states", bad.len())));
    }
    let mut live: Vec<Live> = x0s
        .iter()
        .map(|x0| Live {
            x: x0.clone(),
            history: VecDeque::with_capacity(seq),
            out: PolicyRollout {
                system_id: sys.id,
                x0: x0.clone(),
                states: Vec::with_capacity(horizon),
                controls: Vec::with_capacity(horizon),
                cost: 0.0,
                diverged: false,
                final_norm: 0.0,
            },
            done: false,
        })
        .collect();
    for _ in 0..horizon {
        for l in live.iter_mut().filter(|l| !l.done) {
            if !(norm(&l.x) <= blowup) {
                l.done = true;
                l.out.diverged = true;
                continue;
            }
            let mut row = pipeline::pad(&stats.standardize_state(&l.x), cfg.n_x_max)?;
            row.extend_from_slice(&enc);
            if l.history.len() == seq {
                l.history.pop_front();
            }
            l.history.push_back(row);
        }
        let active: Vec<usize> = (0..live.len()).filter(|&k| !live[k].done).collect();
        if active.is_empty() {
            break;
        }
        let mut s = vec![0.0; active.len() * seq * d_in];
        for (chunk, &k) in s.chunks_exact_mut(seq * d_in).zip(&active) {
            // history holds x̂ for τ = t+1−len..t; earlier rows stay zero
            let h = &live[k].history;
            let first = seq - h.len();
            for (r, row) in h.iter().enumerate() {
                chunk[(first + r) * d_in..(first + r + 1) * d_in].copy_from_slice(row);
            }
        }
        let pred = policy.predict(&Tensor::new(vec![active.len() * seq, d_in], s)?)?;
        for (b, &k) in active.iter().enumerate() {
            let l = &mut live[k];
            let u = stats.destandardize_control(&pred.row(b)[..n_u]);
            l.out.cost += sys.stage_cost(&l.x, &u);
            let next = sys.step(&l.x, &u);
            l.out.states.push(std::mem::replace(&mut l.x, next));
            l.out.controls.push(u);
        }
    }
    Ok(live
        .into_iter()
        .map(|mut l| {
            if l.out.diverged || !l.out.cost.is_finite() || !norm(&l.x).is_finite() {
                l.out.diverged = true;
                l.out.cost = f64::INFINITY;
                l.out.final_norm = f64::INFINITY;
            } else {
                l.out.final_norm = norm(&l.x);
            }
            l.out
        })
        .collect())
}

/// Single rollout; see [`rollout_batch`].
pub fn rollout_policy(
    sys: &LtiSystem<f64>,
    policy: &dyn StandardizedPolicy,
    stats: &NormStats,
    x0: &[f64],
    horizon: usize,
) -> Result<PolicyRollout, EvalError> {
    Ok(rollout_batch(sys, policy, stats, &[x0.to_vec()], horizon, DEFAULT_BLOWUP)?.remove(0))
}

/// `count` evaluation initial states in the system's box, redrawing exact zeros.
pub fn evaluation_initial_conditions(sys: &LtiSystem<f64>, count: usize, seed: u64, index: u64) -> Result<Vec<Vec<f64>>, EvalError> {
    if !(sys.ic_bound > 0.0) {
        return Err(EvalError::Invalid(format!("{}: initial-condition bound must be positive", sys.name)));
    }
    let mut stream = rng::substream(seed, rng::EVAL, index);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = crate::datagen::sample_initial_conditions(sys.n_x(), 1, sys.ic_bound, &mut stream).remove(0);
        if x.iter().any(|&v| v != 0.0) {
            out.push(x);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEval {
    pub x0: Vec<f64>,
    pub policy_cost: f64,
    pub optimal_cost: f64,
    /// `(J_π − J*) / J*`; `NaN` when diverged.
    pub ratio: f64,
    pub diverged: bool,
    pub stabilized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuboptReport {
    /// Sum of per-trajectory ratios over non-diverged rollouts; `NaN` if all diverged.
    pub delta: f64,
    /// `delta` divided by the number of non-diverged rollouts.
    pub mean_ratio: f64,
    pub n_diverged: usize,
    pub stabilized_fraction: f64,
    pub trajectories: Vec<TrajectoryEval>,
}

/// Relative sub-optimality of `policy` against the LQR law from `x0s`, both
/// costs truncated at `horizon`.
pub fn relative_suboptimality(
    sys: &LtiSystem<f64>,
    sol: &LqrSolution<f64>,
    policy: &dyn StandardizedPolicy,
    stats: &NormStats,
    x0s: &[Vec<f64>],
    horizon: usize,
) -> Result<SuboptReport, EvalError> {
    let rollouts = rollout_batch(sys, policy, stats, x0s, horizon, DEFAULT_BLOWUP)?;
    let mut trajectories = Vec::with_capacity(x0s.len());
    for r in rollouts {
        let opt = lqr::closed_loop_cost(sys, |x| sol.control(x), &r.x0, horizon, DEFAULT_BLOWUP);
        if opt.diverged || !(opt.cost > 0.0) {
            return Err(EvalError::Invalid(format!("{}: optimal cost {} is not a valid denominator", sys.name, opt.cost)));
        }
        trajectories.push(TrajectoryEval {
            ratio: if r.diverged { f64::NAN } else { (r.cost - opt.cost) / opt.cost },
            stabilized: r.stabilized(),
            x0: r.x0,
            policy_cost: r.cost,
            optimal_cost: opt.cost,
            diverged: r.diverged,
        });
    }
    let n = trajectories.len();
    let n_diverged = trajectories.iter().filter(|t| t.diverged).count();
    let kept = n - n_diverged;
    let delta: f64 = if kept > 0 { trajectories.iter().filter(|t| !t.diverged).map(|t| t.ratio).sum() } else { f64::NAN };
    Ok(SuboptReport {
        delta,
        mean_ratio: delta / kept as f64,
        n_diverged,
        stabilized_fraction: trajectories.iter().filter(|t| t.stabilized).count() as f64 / n.max(1) as f64,
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEval {
    pub family: String,
    pub system: String,
    pub index: usize,
    pub stats: NormStats,
    /// `ρ(A − BK)^T`, bounding the truncated cost tail.
    pub tail_bound: f64,
    pub report: SuboptReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    /// Perturbation bound, `None` when evaluating given systems.
    pub delta: Option<f64>,
    pub n_variants: Option<usize>,
    pub j_eval: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: EvalMeta,
    pub variants: Vec<VariantEval>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    pub n_systems: usize,
    pub median_delta: f64,
    pub q1_delta: f64,
    pub q3_delta: f64,
    pub max_delta: f64,
    pub median_mean_ratio: f64,
    pub stabilized_fraction: f64,
    pub n_diverged: usize,
}

/// Linear-interpolation quantile of the non-NaN values; `NaN` if none.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl EvalReport {
    pub fn deltas(&self) -> Vec<f64> {
        self.variants.iter().map(|v| v.report.delta).collect()
    }

    pub fn median_delta(&self) -> f64 {
        quantile(&self.deltas(), 0.5)
    }

    pub fn stabilized_fraction(&self) -> f64 {
        let (stab, total) = self.variants.iter().fold((0usize, 0usize), |(s, n), v| {
            (s + v.report.trajectories.iter().filter(|t| t.stabilized).count(), n + v.report.trajectories.len())
        });
        stab as f64 / total.max(1) as f64
    }

    /// One row per family, in order of first appearance.
    pub fn summary(&self) -> Vec<FamilySummary> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&VariantEval>> = BTreeMap::new();
        for v in &self.variants {
            if !groups.contains_key(v.family.as_str()) {
                order.push(&v.family);
            }
            groups.entry(&v.family).or_default().push(v);
        }
        order
            .into_iter()
            .map(|f| {
                let g = &groups[f];
                let d: Vec<f64> = g.iter().map(|v| v.report.delta).collect();
                let m: Vec<f64> = g.iter().map(|v| v.report.mean_ratio).collect();
                let (stab, total) = g.iter().fold((0usize, 0usize), |(s, n), v| {
                    (s + v.report.trajectories.iter().filter(|t| t.stabilized).count(), n + v.report.trajectories.len())
                });
                FamilySummary {
                    family: f.to_string(),
                    n_systems: g.len(),
                    median_delta: quantile(&d, 0.5),
                    q1_delta: quantile(&d, 0.25),
                    q3_delta: quantile(&d, 0.75),
                    max_delta: quantile(&d, 1.0),
                    median_mean_ratio: quantile(&m, 0.5),
                    stabilized_fraction: stab as f64 / total.max(1) as f64,
                    n_diverged: g.iter().map(|v| v.report.n_diverged).sum(),
                }
            })
            .collect()
    }

    /// One row per (system, trajectory).
    pub fn write_rows_csv(&self, out: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["family", "system", "index", "trajectory", "policy_cost", "optimal_cost", "ratio", "diverged", "stabilized", "tail_bound"])?;
        for v in &self.variants {
            for (j, t) in v.report.trajectories.iter().enumerate() {
                w.write_record([
                    v.family.clone(),
                    v.system.clone(),
                    v.index.to_string(),
                    j.to_string(),
                    t.policy_cost.to_string(),
                    t.optimal_cost.to_string(),
                    t.ratio.to_string(),
                    t.diverged.to_string(),
                    t.stabilized.to_string(),
                    v.tail_bound.to_string(),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_summary_csv(&self, out: impl Write) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        for s in self.summary() {
            w.serialize(s)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Evaluates each system with its paired statistics. Initial states for
/// `systems[k]` come from the `eval` substream `k` of `seed`.
pub fn evaluate_systems(
    systems: &[LtiSystem<f64>],
    stats: &[NormStats],
    policy: &dyn StandardizedPolicy,
    j_eval: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if systems.len() != stats.len() {
        return Err(EvalError::Invalid("one statistics record per system required".into()));
    }
    let variants = systems
        .par_iter()
        .zip(stats)
        .enumerate()
        .map(|(k, (sys, st))| {
            let sol = lqr::lqr(sys)?;
            let x0s = evaluation_initial_conditions(sys, j_eval, seed, k as u64)?;
            let report = relative_suboptimality(sys, &sol, policy, st, &x0s, horizon)?;
            let rho = linalg::spectral_radius(&sol.closed_loop(sys))?;
            Ok(VariantEval {
                family: sys.family.clone(),
                system: sys.name.clone(),
                index: k,
                stats: *st,
                tail_bound: rho.powi(horizon as i32),
                report,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvalReport {
        meta: EvalMeta { delta: None, n_variants: None, j_eval, horizon, seed },
        variants,
        warnings: Vec::new(),
    })
}

/// Draws `n_variants` perturbed copies of each base at `±delta` and evaluates
/// them with `stats_of(family)`. Variant draws for base `b` use seed
/// `derive_seed(seed, "variants", b)`; a family whose variants cannot be
/// drawn is skipped with a warning.
#[allow(clippy::too_many_arguments)]
pub fn robustness_study(
    bases: &[LtiSystem<f64>],
    delta: f64,
    n_variants: usize,
    policy: &dyn StandardizedPolicy,
    stats_of: impl Fn(&str) -> Option<NormStats>,
    j_eval: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let mut systems = Vec::new();
    let mut stats = Vec::new();
    let mut warnings = Vec::new();
    for (b, base) in bases.iter().enumerate() {
        let Some(st) = stats_of(&base.family) else {
            warnings.push(format!("{}: no normalization statistics, skipped", base.family));
            continue;
        };
        let spec = VariantSpec {
            base_name: base.family.clone(),
            delta,
            seed: rng::derive_seed(seed, rng::VARIANTS, b as u64),
            count: n_variants,
        };
        match make_variants(base, &spec, systems.len()) {
            Ok(vs) => {
                stats.extend(std::iter::repeat_n(st, vs.len()));
                systems.extend(vs);
            }
            Err(e) => warnings.push(format!("{}: {e}", base.family)),
        }
    }
    let mut report = evaluate_systems(&systems, &stats, policy, j_eval, horizon, seed)?;
    report.meta.delta = Some(delta);
    report.meta.n_variants = Some(n_variants);
    report.warnings = warnings;
    Ok(report)
}

/// Zero-shot and post-fine-tuning results for previously unseen systems.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotOutcome {
    pub val_loss_before: f64,
    pub val_loss_after: f64,
    pub zero_shot: EvalReport,
    pub finetuned: EvalReport,
    pub params: TransformerParams<f64>,
}

/// Fine-tunes `pretrained` on `data` and evaluates `systems` before and after.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_study(
    pretrained: &TransformerParams<f64>,
    data: &TrainingData,
    train_cfg: &TrainConfig,
    systems: &[LtiSystem<f64>],
    stats: &[NormStats],
    j_eval: usize,
    horizon: usize,
    seed: u64,
) -> Result<FewShotOutcome, EvalError> {
    let pcfg = data.train.config;
    let val_loss_before = training::evaluate_loss(pretrained, &data.val, train_cfg.xi)?;
    let zero_shot = evaluate_systems(systems, stats, &TransformerPolicy::new(pretrained, pcfg)?, j_eval, horizon, seed)?;
    let (params, _) = training::finetune(data, pretrained, train_cfg, |_, _| {})?;
    let val_loss_after = training::evaluate_loss(&params, &data.val, train_cfg.xi)?;
    let finetuned = evaluate_systems(systems, stats, &TransformerPolicy::new(&params, pcfg)?, j_eval, horizon, seed)?;
    Ok(FewShotOutcome { val_loss_before, val_loss_after, zero_shot, finetuned, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Swept value (`w` or `J`).
    pub value: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub epochs: usize,
}

/// Fixed architecture shared by every ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationModel {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
}

impl AblationModel {
    fn config(&self, p: &PipelineConfig) -> ModelConfig {
        ModelConfig::for_pipeline(p, self.d_model, self.heads, self.blocks, self.d_ff)
    }
}

fn train_once(data: &TrainingData, pcfg: &PipelineConfig, arch: &AblationModel, cfg: &TrainConfig, value: usize) -> Result<AblationRow, EvalError> {
    let params = model::init_params::<f64>(&arch.config(pcfg), cfg.seed)?;
    let mut state = TrainState::new(params, cfg.optimizer);
    let hist = training::train(data, &mut state, cfg, |_, _| {})?;
    let last = hist.last();
    Ok(AblationRow {
        value,
        train_loss: last.map_or(f64::NAN, |r| r.train_loss),
        val_loss: last.map_or_else(|| training::evaluate_loss(&state.params, &data.val, cfg.xi).unwrap_or(f64::NAN), |r| r.val_loss),
        epochs: hist.len(),
    })
}

/// One model per window length under identical budgets and splits.
pub fn ablation_window(
    ds: &TrajectoryDataset,
    w_values: &[usize],
    base: &PipelineConfig,
    arch: &AblationModel,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    let stats = training::system_stats(ds)?;
    w_values
        .iter()
        .map(|&w| {
            let pcfg = PipelineConfig { window: w, ..*base };
            let data = TrainingData::new(pcfg, &ds.trajectories, stats.clone(), cfg.split, cfg.seed)?;
            train_once(&data, &pcfg, arch, cfg, w)
        })
        .collect()
}

/// One model per training-set size. The validation trajectories are fixed
/// by one split of the full data; run `J` trains on the first `J` remaining
/// trajectories of every system.
pub fn ablation_data_volume(
    ds: &TrajectoryDataset,
    j_values: &[usize],
    pcfg: &PipelineConfig,
    arch: &AblationModel,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>, EvalError> {
    let stats = training::system_stats(ds)?;
    let (train_ids, val_ids) = training::split_trajectories(&ds.trajectories, cfg.split, cfg.seed);
    let mut per_system: BTreeMap<usize, Vec<&Trajectory>> = BTreeMap::new();
    for &k in &train_ids {
        per_system.entry(ds.trajectories[k].system_id).or_default().push(&ds.trajectories[k]);
    }
    let available = per_system.values().map(Vec::len).min().unwrap_or(0);
    if let Some(&j) = j_values.iter().find(|&&j| j == 0 || j > available) {
        return Err(EvalError::Invalid(format!("J = {j} requested but only {available} training trajectories per system are available")));
    }
    let stats_of = |i: usize| stats[i];
    let val = pipeline::SampleSet::from_trajectories(*pcfg, val_ids.iter().map(|&k| &ds.trajectories[k]), stats_of)?;
    j_values
        .iter()
        .map(|&j| {
            let train = pipeline::SampleSet::from_trajectories(*pcfg, per_system.values().flat_map(|v| v[..j].iter().copied()), stats_of)?;
            let data = TrainingData { train, val: val.clone(), stats: stats.clone() };
            train_once(&data, pcfg, arch, cfg, j)
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], axis: &str, out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([axis, "train_loss", "val_loss", "epochs"])?;
    for r in rows {
        w.write_record([r.value.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.epochs.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
