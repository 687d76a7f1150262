//! Standardization, padding, dimension encoding and windowing.
//!
//! A sample at time `t` is the matrix `S_t` of shape `(w+1) × d_in` whose rows
//! are `[pad(x̂_τ), enc(n_x, n_u)]` for `τ = t−w..t`. Rows with `τ < 0` are
//! entirely zero, encoding bits included.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Trajectory;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("degenerate data: {0} has zero spread")]
    Degenerate(&'static str),
    #[error("need at least two entries to estimate spread, got {0}")]
    TooFew(usize),
    #[error("vector of length {len} does not fit in {target}")]
    TooLong { len: usize, target: usize },
    #[error("dimension n_x = {n_x}, n_u = {n_u} outside 1..={n_x_max} × 1..={n_u_max}")]
    DimensionRange { n_x: usize, n_u: usize, n_x_max: usize, n_u_max: usize },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("encoding bits {0:?} are not a valid dimension code")]
    BadCode(Vec<f64>),
}

/// Scalar standardization constants of one system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu_x: f64,
    pub sigma_x: f64,
    pub mu_u: f64,
    pub sigma_u: f64,
}

impl NormStats {
    pub const IDENTITY: Self = Self {
        mu_x: 0.0,
        sigma_x: 1.0,
        mu_u: 0.0,
        sigma_u: 1.0,
    };

    pub fn standardize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mu_x) / self.sigma_x).collect()
    }

    pub fn standardize_control(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| (v - self.mu_u) / self.sigma_u).collect()
    }

    pub fn destandardize_state(&self, x_hat: &[f64]) -> Vec<f64> {
        x_hat.iter().map(|v| self.sigma_x * v + self.mu_x).collect()
    }

    /// `u = σ_u ū + μ_u`.
    pub fn destandardize_control(&self, u_bar: &[f64]) -> Vec<f64> {
        u_bar.iter().map(|v| self.sigma_u * v + self.mu_u).collect()
    }
}

/// Grand mean over all entries and `sqrt(Σ_t ‖v_t − μ1‖² / (count − 1))`
/// where `count` is the number of vectors, not entries.
fn scalar_stats<'a>(blocks: impl Iterator<Item = &'a Tensor<f64>> + Clone, what: &'static str) -> Result<(f64, f64), PipelineError> {
    let (mut entries, mut vectors, mut total) = (0usize, 0usize, 0.0);
    for b in blocks.clone() {
        entries += b.len();
        vectors += b.rows();
        total += b.data().iter().sum::<f64>();
    }
    if entries < 2 || vectors < 2 {
        return Err(PipelineError::TooFew(entries.min(vectors)));
    }
    let mu = total / entries as f64;
    let ss: f64 = blocks.flat_map(|b| b.data().iter()).map(|v| (v - mu) * (v - mu)).sum();
    let sigma = (ss / (vectors - 1) as f64).sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(PipelineError::Degenerate(what));
    }
    Ok((mu, sigma))
}

/// Statistics over all trajectories of one system (or any pooled group).
pub fn compute_stats<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Result<NormStats, PipelineError> {
    let trajs: Vec<&Trajectory> = trajs.into_iter().collect();
    let (mu_x, sigma_x) = scalar_stats(trajs.iter().map(|t| &t.states), "state data")?;
    let (mu_u, sigma_u) = scalar_stats(trajs.iter().map(|t| &t.controls), "control data")?;
    Ok(NormStats {
        mu_x,
        sigma_x,
        mu_u,
        sigma_u,
    })
}

/// `v` followed by zeros up to `target`.
pub fn pad(v: &[f64], target: usize) -> Result<Vec<f64>, PipelineError> {
    if v.len() > target {
        return Err(PipelineError::TooLong { len: v.len(), target });
    }
    let mut out = v.to_vec();
    out.resize(target, 0.0);
    Ok(out)
}

fn bits_for(max: usize) -> usize {
    // ⌈log₂ max⌉, with at least one bit
    (usize::BITS - (max.max(2) - 1).leading_zeros()) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub window: usize,
    pub n_x_max: usize,
    pub n_u_max: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 12,
            n_x_max: 12,
            n_u_max: 6,
            stride: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.window == 0 || self.n_x_max == 0 || self.n_u_max == 0 || self.stride == 0 {
            return Err(PipelineError::Config(format!("all sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `⌈log₂ n_x_max⌉`.
    pub fn d_x(&self) -> usize {
        bits_for(self.n_x_max)
    }

    /// `⌈log₂ n_u_max⌉`.
    pub fn d_u(&self) -> usize {
        bits_for(self.n_u_max)
    }

    pub fn d_in(&self) -> usize {
        self.n_x_max + self.d_x() + self.d_u()
    }

    /// Rows per sample, `w + 1`.
    pub fn seq_len(&self) -> usize {
        self.window + 1
    }

    fn check_dims(&self, n_x: usize, n_u: usize) -> Result<(), PipelineError> {
        if n_x == 0 || n_u == 0 || n_x > self.n_x_max || n_u > self.n_u_max {
            return Err(PipelineError::DimensionRange {
                n_x,
                n_u,
                n_x_max: self.n_x_max,
                n_u_max: self.n_u_max,
            });
        }
        Ok(())
    }
}

fn msb_first(value: usize, width: usize) -> impl Iterator<Item = f64> {
    (0..width).rev().map(move |b| ((value >> b) & 1) as f64)
}

/// MSB-first binary of `n_x` (`d_x` bits) followed by `n_u` (`d_u` bits).
///
/// The width is `⌈log₂ max⌉`, so a value equal to a power-of-two maximum
/// (e.g. `n_x = 8` with `n_x_max = 8`) would not fit; such configs are
/// rejected here rather than silently wrapped.
pub fn dim_encoding(n_x: usize, n_u: usize, cfg: &PipelineConfig) -> Result<Vec<f64>, PipelineError> {
    cfg.check_dims(n_x, n_u)?;
    if n_x >> cfg.d_x() != 0 || n_u >> cfg.d_u() != 0 {
        return Err(PipelineError::Config(format!(
            "n_x = {n_x} or n_u = {n_u} needs more than {} / {} bits",
            cfg.d_x(),
            cfg.d_u()
        )));
    }
    Ok(msb_first(n_x, cfg.d_x()).chain(msb_first(n_u, cfg.d_u())).collect())
}

/// Inverse of [`dim_encoding`].
pub fn decode_dims(bits: &[f64], cfg: &PipelineConfig) -> Result<(usize, usize), PipelineError> {
    if bits.len() != cfg.d_x() + cfg.d_u() || bits.iter().any(|&b| b != 0.0 && b != 1.0) {
        return Err(PipelineError::BadCode(bits.to_vec()));
    }
    let fold = |bs: &[f64]| bs.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
    let (n_x, n_u) = (fold(&bits[..cfg.d_x()]), fold(&bits[cfg.d_x()..]));
    cfg.check_dims(n_x, n_u)?;
    Ok((n_x, n_u))
}

/// `n_u` ones followed by `n_u_max − n_u` zeros.
pub fn make_mask(n_u: usize, n_u_max: usize) -> Result<Vec<f64>, PipelineError> {
    if n_u == 0 || n_u > n_u_max {
        return Err(PipelineError::DimensionRange {
            n_x: 1,
            n_u,
            n_x_max: 1,
            n_u_max,
        });
    }
    Ok((0..n_u_max).map(|k| if k < n_u { 1.0 } else { 0.0 }).collect())
}

/// One supervised example `(S_t, ū_t, κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    /// `(w+1) × d_in`.
    pub s: Tensor<f64>,
    pub u_bar: Vec<f64>,
    pub kappa: Vec<f64>,
    pub system_id: usize,
}

/// A trajectory after standardization, padding and encoding, from which
/// windows are cut on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedTrajectory {
    pub system_id: usize,
    /// `T × d_in`: padded standardized state followed by the encoding bits.
    pub rows: Tensor<f64>,
    /// `T × n_u_max`: padded standardized controls.
    pub targets: Tensor<f64>,
    pub kappa: Vec<f64>,
}

impl ProcessedTrajectory {
    pub fn new(traj: &Trajectory, stats: &NormStats, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let (n_x, n_u) = (traj.states.cols(), traj.controls.cols());
        let code = dim_encoding(n_x, n_u, cfg)?;
        let kappa = make_mask(n_u, cfg.n_u_max)?;
        let t_len = traj.len();
        let mut rows = Vec::with_capacity(t_len * cfg.d_in());
        let mut targets = Vec::with_capacity(t_len * cfg.n_u_max);
        for t in 0..t_len {
            rows.extend(pad(&stats.standardize_state(traj.states.row(t)), cfg.n_x_max)?);
            rows.extend_from_slice(&code);
            targets.extend(pad(&stats.standardize_control(traj.controls.row(t)), cfg.n_u_max)?);
        }
        Ok(Self {
            system_id: traj.system_id,
            rows: Tensor::new(vec![t_len, cfg.d_in()], rows).expect("sized above"),
            targets: Tensor::new(vec![t_len, cfg.n_u_max], targets).expect("sized above"),
            kappa,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes `S_t` into `out` (length `(w+1)·d_in`).
    pub fn write_window(&self, t: usize, window: usize, out: &mut [f64]) {
        let d_in = self.rows.cols();
        debug_assert_eq!(out.len(), (window + 1) * d_in);
        for (r, dst) in out.chunks_exact_mut(d_in).enumerate() {
            // row r holds time t − w + r
            match (t + r).checked_sub(window) {
                Some(tau) => dst.copy_from_slice(self.rows.row(tau)),
                None => dst.fill(0.0),
            }
        }
    }

    pub fn sample(&self, t: usize, window: usize) -> TrainingSample {
        let d_in = self.rows.cols();
        let mut s = vec![0.0; (window + 1) * d_in];
        self.write_window(t, window, &mut s);
        TrainingSample {
            s: Tensor::new(vec![window + 1, d_in], s).expect("sized above"),
            u_bar: self.targets.row(t).to_vec(),
            kappa: self.kappa.clone(),
            system_id: self.system_id,
        }
    }
}

/// All stride-spaced windows of one trajectory.
pub fn window_samples(traj: &Trajectory, stats: &NormStats, cfg: &PipelineConfig) -> Result<Vec<TrainingSample>, PipelineError> {
    cfg.validate()?;
    let p = ProcessedTrajectory::new(traj, stats, cfg)?;
    Ok((0..p.len()).step_by(cfg.stride).map(|t| p.sample(t, cfg.window)).collect())
}

/// A windowed dataset backed by processed trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub config: PipelineConfig,
    pub trajectories: Vec<ProcessedTrajectory>,
    /// `(trajectory, t)` of every sample.
    pub index: Vec<(u32, u32)>,
}

/// A stacked mini-batch: `s` is `(B·(w+1)) × d_in`, the others `B × n_u_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub s: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub masks: Tensor<f64>,
}

impl SampleSet {
    pub fn new(config: PipelineConfig, trajectories: Vec<ProcessedTrajectory>) -> Result<Self, PipelineError> {
        config.validate()?;
        if let Some(bad) = trajectories.iter().find(|p| p.rows.cols() != config.d_in() || p.targets.cols() != config.n_u_max) {
            return Err(PipelineError::Config(format!(
                "trajectory of system {} was processed with a different config",
                bad.system_id
            )));
        }
        let index = trajectories
            .iter()
            .enumerate()
            .flat_map(|(k, p)| (0..p.len()).step_by(config.stride).map(move |t| (k as u32, t as u32)))
            .collect();
        Ok(Self {
            config,
            trajectories,
            index,
        })
    }

    /// Processes `trajs`, taking each one's statistics from `stats_of(system_id)`.
    pub fn from_trajectories<'a>(
        config: PipelineConfig,
        trajs: impl IntoIterator<Item = &'a Trajectory>,
        stats_of: impl Fn(usize) -> NormStats,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let processed = trajs
            .into_iter()
            .map(|t| ProcessedTrajectory::new(t, &stats_of(t.system_id), &config))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(config, processed)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn sample(&self, i: usize) -> TrainingSample {
        let (k, t) = self.index[i];
        self.trajectories[k as usize].sample(t as usize, self.config.window)
    }

    pub fn batch(&self, ids: &[usize]) -> Batch {
        let cfg = &self.config;
        let per = cfg.seq_len() * cfg.d_in();
        let mut s = vec![0.0; ids.len() * per];
        let mut targets = Vec::with_capacity(ids.len() * cfg.n_u_max);
        let mut masks = Vec::with_capacity(ids.len() * cfg.n_u_max);
        for (chunk, &i) in s.chunks_exact_mut(per).zip(ids) {
            let (k, t) = self.index[i];
            let p = &self.trajectories[k as usize];
            p.write_window(t as usize, cfg.window, chunk);
            targets.extend_from_slice(p.targets.row(t as usize));
            masks.extend_from_slice(&p.kappa);
        }
        Batch {
            s: Tensor::new(vec![ids.len() * cfg.seq_len(), cfg.d_in()], s).expect("sized above"),
            targets: Tensor::new(vec![ids.len(), cfg.n_u_max], targets).expect("sized above"),
            masks: Tensor::new(vec![ids.len(), cfg.n_u_max], masks).expect("sized above"),
        }
    }
}
