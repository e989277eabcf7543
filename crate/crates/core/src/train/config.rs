use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, PoolMode, QueryMode};

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub fixture: PathBuf,
    pub hierarchy: PathBuf,
    pub train_annotations: PathBuf,
    pub eval_annotations: Option<PathBuf>,
    /// Missing: every attribute is base.
    pub split: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.fixture);
        fix(&mut self.hierarchy);
        fix(&mut self.train_annotations);
        if let Some(p) = self.eval_annotations.as_mut() {
            fix(p);
        }
        if let Some(p) = self.split.as_mut() {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub heads: usize,
    pub positional_encoding: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.d,
            d_ff: m.d_ff,
            blocks: m.blocks,
            heads: m.heads,
            positional_encoding: m.positional_encoding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs after this one (1-based) use `lr_after_drop`.
    pub lr_drop_epoch: Option<usize>,
    pub lr_after_drop: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_drop_epoch: None,
            lr_after_drop: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(e) if epoch > e => self.lr_after_drop,
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub sqi: bool,
    pub md: bool,
    pub scr: bool,
    pub zrse: bool,
    pub query_mode: QueryMode,
    pub pool_mode: PoolMode,
    pub zrse_topk: usize,
    pub zrse_novel_only: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            sqi: true,
            md: true,
            scr: true,
            zrse: true,
            query_mode: QueryMode::Superclass,
            pool_mode: PoolMode::AttObj,
            zrse_topk: 2,
            zrse_novel_only: false,
        }
    }
}

/// Positive-count boundaries for head/medium/tail grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyThresholds {
    pub head_min: usize,
    pub medium_min: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ArchConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub frequency_groups: Option<FrequencyThresholds>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            model: ArchConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 9,
            batch_size: 16,
            seed: 0,
            toggles: Toggles::default(),
            frequency_groups: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.model.d,
            d_ff: self.model.d_ff,
            blocks: self.model.blocks,
            heads: self.model.heads,
            positional_encoding: self.model.positional_encoding,
            query_mode: self.toggles.query_mode,
            pool_mode: self.toggles.pool_mode,
            sqi: self.toggles.sqi,
            md: self.toggles.md,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let o = &self.optimizer;
        let rates = [("lr", o.lr), ("lr_after_drop", o.lr_after_drop), ("eps", o.eps)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        self.loss.validate()?;
        self.model_config().validate()?;
        if self.toggles.scr && self.loss.lambda > 0.0 && self.toggles.query_mode != QueryMode::Superclass {
            return bad("scr needs query_mode = superclass (or lambda = 0)".into());
        }
        if let Some(f) = self.frequency_groups {
            if f.medium_min > f.head_min {
                return bad("frequency_groups.medium_min exceeds head_min".into());
            }
        }
        Ok(())
    }

    /// Loss weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.toggles.scr {
            self.loss.lambda
        } else {
            0.0
        }
    }
}
