//! Run configuration: full-scale defaults, overridden by a TOML file, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use lqrf::model::ModelConfig;
use lqrf::pipeline::PipelineConfig;
use lqrf::training::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub systems: String,
    pub n_variants: usize,
    pub delta: f64,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub dt: f64,
    pub window: usize,
    pub n_x_max: usize,
    pub n_u_max: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    pub sequential: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub xi: f64,
    pub split: f64,
    pub optimizer: OptimizerKind,
    pub clip: Option<f64>,
    pub checkpoint_every: usize,
    pub eval_variants: usize,
    pub j_eval: usize,
    pub window_values: Vec<usize>,
    pub data_values: Vec<usize>,
    pub workers: Option<usize>,
    /// Not recorded in artifacts, so identical runs in different directories produce identical files.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            systems: "seen".into(),
            n_variants: 50,
            delta: 0.3,
            j: 50,
            t: 1250,
            dt: 0.02,
            window: 12,
            n_x_max: 12,
            n_u_max: 6,
            d_model: 64,
            heads: 16,
            blocks: 4,
            d_ff: 256,
            sequential: false,
            epochs: 500,
            batch: 4096,
            lr: 1e-5,
            xi: 1.0,
            split: 0.95,
            optimizer: OptimizerKind::PlainGd,
            clip: None,
            checkpoint_every: 10,
            eval_variants: 20,
            j_eval: 25,
            window_values: vec![1, 4, 8, 12],
            data_values: vec![2, 5, 10, 20],
            workers: None,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig { window: self.window, n_x_max: self.n_x_max, n_u_max: self.n_u_max, stride: 1 }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            sequential: self.sequential,
            ..ModelConfig::for_pipeline(&self.pipeline(), self.d_model, self.heads, self.blocks, self.d_ff)
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            eta: self.lr,
            batch_size: self.batch,
            n_epochs: self.epochs,
            xi: self.xi,
            split: self.split,
            seed: self.seed,
            optimizer: self.optimizer,
            clip: self.clip,
        }
    }

    /// Checks every module-level invariant before any phase runs.
    pub fn validate(&self) -> anyhow::Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            bail!("--delta must lie in [0, 1), got {}", self.delta);
        }
        if self.j == 0 || self.t == 0 {
            bail!("--J and --T must be positive");
        }
        if !(self.dt > 0.0) {
            bail!("--dt must be positive, got {}", self.dt);
        }
        if self.j_eval == 0 {
            bail!("j_eval must be positive");
        }
        if self.workers == Some(0) {
            bail!("--workers must be positive");
        }
        self.pipeline().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_full_scale() {
        let c = RunConfig::default();
        assert_eq!((c.dt, c.t, c.j, c.delta), (0.02, 1250, 50, 0.3));
        assert_eq!((c.window, c.n_x_max, c.n_u_max, c.d_model, c.heads, c.blocks, c.d_ff), (12, 12, 6, 64, 16, 4, 256));
        assert_eq!((c.epochs, c.batch, c.lr), (500, 4096, 1e-5));
        // 17 seen systems × 50 variants = N = 850
        assert_eq!(17 * c.n_variants, 850);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults_and_rejects_unknown_keys() {
        let c: RunConfig = toml::from_str("J = 5\noptimizer = \"adam\"").unwrap();
        assert_eq!(c.j, 5);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.t, 1250);
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }
}
