//! Run configuration. One JSON file describes an experiment end to end and is
//! embedded verbatim in every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::SparsityPattern;
use crate::error::{Error, Result};
use crate::router::AnnealSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_head: 16,
            vocab: 64,
            seq_len: 64,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseKind {
    Streaming,
    BlockSparse,
}

/// Pattern used by heads routed to SA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub kind: SparseKind,
    pub sink: usize,
    pub window: usize,
    pub block_size: usize,
    pub mass_threshold: f64,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            kind: SparseKind::Streaming,
            sink: 4,
            window: 32,
            block_size: 4,
            mass_threshold: 0.9,
        }
    }
}

impl PatternConfig {
    pub fn pattern(&self) -> SparsityPattern {
        match self.kind {
            SparseKind::Streaming => SparsityPattern::Streaming {
                sink: self.sink,
                window: self.window,
            },
            SparseKind::BlockSparse => SparsityPattern::BlockSparse {
                block_size: self.block_size,
                mass_threshold: self.mass_threshold,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub n_edge: usize,
    pub hidden_mult: usize,
    pub anneal: AnnealSchedule,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            n_edge: 4,
            hidden_mult: 4,
            anneal: AnnealSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Steps taken before the accuracy floors may end training.
    pub min_steps: usize,
    pub max_steps: usize,
    /// Sequences per task per step.
    pub batch_per_task: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub accuracy_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            min_steps: 400,
            max_steps: 800,
            batch_per_task: 8,
            lr: 3e-3,
            eval_every: 50,
            eval_samples: 200,
            accuracy_floor: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaUpdate {
    /// `lambda1 += eta * d`, `lambda2 += eta * d^2`.
    Plain,
    /// AdamW ascent on the same gradients, sharing the router betas.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per task per step; every step sees every task.
    pub batch: usize,
    pub router_lr: f64,
    pub reg_lr: f64,
    pub warmup_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub target_robust: f64,
    pub target_sensitive: f64,
    pub lambda_init_max: f64,
    pub lambda_update: LambdaUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            router_lr: 5e-4,
            reg_lr: 1e-3,
            warmup_ratio: 0.2,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            target_robust: 1.0,
            target_sensitive: 0.7,
            lambda_init_max: 0.1,
            lambda_update: LambdaUpdate::Adamw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    pub msr_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            msr_grid: vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pattern: PatternConfig,
    pub router: RouterConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            pattern: PatternConfig::default(),
            router: RouterConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn fraction(name: &str, v: f64, lo_open: bool) -> Result<()> {
    let ok = if lo_open { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    require(ok, || format!("{name} must lie in {}0, 1], got {v}", if lo_open { "(" } else { "[" }))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        require(m.layers >= 1, || "model.layers must be >= 1".into())?;
        require(m.heads >= 1, || "model.heads must be >= 1".into())?;
        require(m.d_head >= 1, || "model.d_head must be >= 1".into())?;
        require(m.mlp_hidden >= 1, || "model.mlp_hidden must be >= 1".into())?;
        require(m.vocab >= crate::tasks::MIN_VOCAB, || {
            format!("model.vocab must be >= {} for the task vocabulary", crate::tasks::MIN_VOCAB)
        })?;
        require(m.seq_len >= 8, || format!("model.seq_len must be >= 8, got {}", m.seq_len))?;

        let p = &self.pattern;
        require(p.window >= 1, || "pattern.window must be >= 1".into())?;
        require(p.block_size >= 1, || "pattern.block_size must be >= 1".into())?;
        fraction("pattern.mass_threshold", p.mass_threshold, true)?;

        require(self.router.n_edge >= 1, || "router.n_edge must be >= 1".into())?;
        require(self.router.hidden_mult >= 1, || "router.hidden_mult must be >= 1".into())?;
        self.router.anneal.validate()?;

        let pt = &self.pretrain;
        require(pt.batch_per_task >= 1, || "pretrain.batch_per_task must be >= 1".into())?;
        require(pt.lr > 0.0, || "pretrain.lr must be positive".into())?;
        require(pt.eval_every >= 1, || "pretrain.eval_every must be >= 1".into())?;
        require(pt.eval_samples >= 1, || "pretrain.eval_samples must be >= 1".into())?;
        fraction("pretrain.accuracy_floor", pt.accuracy_floor, false)?;

        let t = &self.train;
        require(t.steps >= 1, || "train.steps must be >= 1".into())?;
        require(t.batch >= 1, || "train.batch must be >= 1".into())?;
        require(t.router_lr > 0.0 && t.reg_lr > 0.0, || "learning rates must be positive".into())?;
        require((0.0..1.0).contains(&t.warmup_ratio), || {
            format!("train.warmup_ratio must lie in [0, 1), got {}", t.warmup_ratio)
        })?;
        require((0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2), || {
            "optimizer betas must lie in [0, 1)".into()
        })?;
        require(t.weight_decay >= 0.0, || "train.weight_decay must be >= 0".into())?;
        fraction("train.target_robust", t.target_robust, true)?;
        fraction("train.target_sensitive", t.target_sensitive, true)?;
        require(t.lambda_init_max >= 0.0, || "train.lambda_init_max must be >= 0".into())?;

        require(self.eval.samples >= 1, || "eval.samples must be >= 1".into())?;
        for &g in &self.eval.msr_grid {
            fraction("eval.msr_grid entry", g, false)?;
        }
        crate::tasks::TaskSpec::new(crate::tasks::TaskKind::Needle, self).check()?;
        Ok(())
    }

    pub fn router_hidden(&self) -> usize {
        self.router.hidden_mult * self.model.d_head
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 5, "train": {"steps": 10}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch, 4);
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let mut c = RunConfig::default();
        c.pattern.window = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.train.target_sensitive = 1.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("target_sensitive"), "{msg}");
    }
}
