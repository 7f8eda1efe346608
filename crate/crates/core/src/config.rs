//! Resolved settings for a training or verification run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{render, KvFile};
use crate::losses::{LossWeights, DEFAULT_SETS, DEFAULT_TAU};
use crate::model::ModelConfig;
use crate::sampler::BudgetConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub devices: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mask_ratio: f64,
    pub sets: usize,
    pub tau: f64,
    pub overfit: bool,
    /// Tiles used for target standardization statistics.
    pub stats_tiles: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            batch_size: 4,
            devices: 2,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            mask_ratio: 0.75,
            sets: DEFAULT_SETS,
            tau: DEFAULT_TAU,
            overfit: false,
            stats_tiles: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.devices < 2 || self.devices > self.batch_size {
            return bad("need at least two devices and no more devices than samples");
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return bad("need 0 <= min_lr <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1)");
        }
        if self.sets < 2 || !(self.tau > 0.0) || self.weight_decay < 0.0 {
            return bad("need sets >= 2, tau > 0, weight_decay >= 0");
        }
        if self.stats_tiles == 0 {
            return bad("stats_tiles must be positive");
        }
        Ok(())
    }

    /// Learning rate for 1-based `step`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Budget used by the toy trainer: small footprints and a short sequence.
pub fn toy_budget() -> BudgetConfig {
    BudgetConfig {
        max_tokens: 96,
        ground_cover_min_m: 960.0,
        ground_cover_max_m: 1920.0,
        ..BudgetConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Band registry file; the built-in table when absent.
    pub registry: Option<PathBuf>,
    pub model: ModelConfig,
    pub budget: BudgetConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            registry: None,
            model: ModelConfig::desk(),
            budget: toy_budget(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, &Self::default())
    }

    /// Parses `text`, taking every key it omits from `base`.
    pub fn parse_over(text: &str, base: &Self) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let d = base;
        let registry: String = kv.take("run.registry", String::new())?;
        let b = &d.budget;
        let t = &d.train;
        let cfg = Self {
            seed: kv.take("run.seed", d.seed)?,
            out_dir: PathBuf::from(kv.take("run.out", d.out_dir.display().to_string())?),
            registry: (!registry.is_empty()).then(|| PathBuf::from(registry)),
            model: ModelConfig::from_kv(&mut kv, &d.model)?,
            budget: BudgetConfig {
                max_tokens: kv.take("budget.max_tokens", b.max_tokens)?,
                patch_min: kv.take("budget.patch_min", b.patch_min)?,
                patch_max: kv.take("budget.patch_max", b.patch_max)?,
                ground_cover_min_m: kv.take("budget.ground_cover_min_m", b.ground_cover_min_m)?,
                ground_cover_max_m: kv.take("budget.ground_cover_max_m", b.ground_cover_max_m)?,
                grid_min: kv.take("budget.grid_min", b.grid_min)?,
                grid_max: kv.take("budget.grid_max", b.grid_max)?,
            },
            train: TrainConfig {
                steps: kv.take("train.steps", t.steps)?,
                batch_size: kv.take("train.batch_size", t.batch_size)?,
                devices: kv.take("train.devices", t.devices)?,
                lr: kv.take("train.lr", t.lr)?,
                min_lr: kv.take("train.min_lr", t.min_lr)?,
                warmup_steps: kv.take("train.warmup_steps", t.warmup_steps)?,
                weight_decay: kv.take("train.weight_decay", t.weight_decay)?,
                beta1: kv.take("train.beta1", t.beta1)?,
                beta2: kv.take("train.beta2", t.beta2)?,
                eps: kv.take("train.eps", t.eps)?,
                mask_ratio: kv.take("train.mask_ratio", t.mask_ratio)?,
                sets: kv.take("train.sets", t.sets)?,
                tau: kv.take("train.tau", t.tau)?,
                overfit: kv.take("train.overfit", t.overfit)?,
                stats_tiles: kv.take("train.stats_tiles", t.stats_tiles)?,
            },
            weights: LossWeights::from_kv(&mut kv, &d.weights)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn load_over(path: &Path, base: &Self) -> Result<Self> {
        Self::parse_over(&std::fs::read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.budget.validate()?;
        self.train.validate()?;
        self.weights.validate()
    }

    pub fn render(&self) -> String {
        let b = &self.budget;
        let t = &self.train;
        let mut run = vec![("seed", self.seed.to_string()), ("out", self.out_dir.display().to_string())];
        if let Some(r) = &self.registry {
            run.push(("registry", r.display().to_string()));
        }
        render(&[
            ("run", run),
            ("model", self.model.to_kv()),
            (
                "budget",
                vec![
                    ("max_tokens", b.max_tokens.to_string()),
                    ("patch_min", b.patch_min.to_string()),
                    ("patch_max", b.patch_max.to_string()),
                    ("ground_cover_min_m", b.ground_cover_min_m.to_string()),
                    ("ground_cover_max_m", b.ground_cover_max_m.to_string()),
                    ("grid_min", b.grid_min.to_string()),
                    ("grid_max", b.grid_max.to_string()),
                ],
            ),
            (
                "train",
                vec![
                    ("steps", t.steps.to_string()),
                    ("batch_size", t.batch_size.to_string()),
                    ("devices", t.devices.to_string()),
                    ("lr", t.lr.to_string()),
                    ("min_lr", t.min_lr.to_string()),
                    ("warmup_steps", t.warmup_steps.to_string()),
                    ("weight_decay", t.weight_decay.to_string()),
                    ("beta1", t.beta1.to_string()),
                    ("beta2", t.beta2.to_string()),
                    ("eps", t.eps.to_string()),
                    ("mask_ratio", t.mask_ratio.to_string()),
                    ("sets", t.sets.to_string()),
                    ("tau", t.tau.to_string()),
                    ("overfit", t.overfit.to_string()),
                    ("stats_tiles", t.stats_tiles.to_string()),
                ],
            ),
            ("weights", self.weights.to_kv()),
        ])
    }
}
