//! Run configuration: a flat JSON object whose keys are the fields of
//! [`TrainConfig`]. Missing keys take the value of the selected profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BuildOptions, WidthConfig};
use crate::optim::{AdamConfig, GroupConfig};
use crate::pruner::PruneOptions;
use crate::quantizer::{B_INIT, B_MAX};
use crate::size::SizeMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    /// Learning-rate multiplier applied on a plateau.
    pub factor: f64,
    /// Evaluations without improvement before reducing.
    pub patience: usize,
    /// Floor as a fraction of each group's initial learning rate.
    pub min_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-width network, full CIFAR-10, full training budget.
    Paper,
    /// Quarter-width network on a small synthetic set.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            other => Err(format!("unknown profile `{other}` (expected paper or desk)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr_weights: f64,
    pub lr_quant: f64,
    pub eps_weights: f64,
    pub eps_quant: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub main_steps: usize,
    /// Upper bound on steps spent annealing after `main_steps`.
    pub anneal_max_steps: usize,
    pub prune_interval: usize,
    pub prune_warmup: usize,
    pub prune_residual: bool,
    pub bias_tol: f32,
    pub bias_drain_weight: f64,
    pub b_init: f32,
    pub b_max: f32,
    pub size_mode: SizeMode,
    pub seed: u64,
    pub plateau: Plateau,
    pub eval_interval: usize,
    pub eval_batch_size: usize,
    /// Multiplier on the default channel widths (64/128/256/512).
    pub width_scale: f64,
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
    /// `cifar10`, `two-gaussians-images` or `striped-patterns`.
    pub dataset: String,
    /// CIFAR-10 binary directory; falls back to `SELFCOMP_DATA`.
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training examples.
    pub train_subset: Option<usize>,
    /// Use only the first N evaluation examples.
    pub eval_subset: Option<usize>,
    pub synthetic_train_size: usize,
    pub synthetic_test_size: usize,
    pub augment: bool,
    /// Record wall time per step; off makes metrics files reproducible byte for byte.
    pub record_step_time: bool,
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn paper() -> Self {
        Self {
            gamma: 0.01,
            lr_weights: 1e-3,
            lr_quant: 0.5,
            eps_weights: 1e-5,
            eps_quant: 1e-3,
            weight_decay: 5e-4,
            batch_size: 512,
            main_steps: 850,
            anneal_max_steps: 2000,
            prune_interval: 50,
            prune_warmup: 100,
            prune_residual: true,
            bias_tol: 1e-5,
            bias_drain_weight: 1.0,
            b_init: B_INIT,
            b_max: B_MAX,
            size_mode: SizeMode::Coupled,
            seed: 0,
            plateau: Plateau {
                factor: 0.5,
                patience: 5,
                min_lr: 1e-5,
            },
            eval_interval: 50,
            eval_batch_size: 500,
            width_scale: 1.0,
            quantize_first_layer: true,
            quantize_last_layer: true,
            dataset: "cifar10".into(),
            data_dir: None,
            train_subset: None,
            eval_subset: None,
            synthetic_train_size: 5000,
            synthetic_test_size: 1000,
            augment: true,
            record_step_time: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            gamma: 0.1,
            batch_size: 32,
            main_steps: 600,
            anneal_max_steps: 0,
            width_scale: 0.25,
            dataset: "striped-patterns".into(),
            train_subset: Some(5000),
            eval_subset: Some(1000),
            synthetic_train_size: 5000,
            synthetic_test_size: 500,
            ..Self::paper()
        }
    }

    /// Parse a JSON object, filling absent keys from `base`.
    pub fn from_json(text: &str, base: &TrainConfig) -> Result<Self> {
        let overrides: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("not valid JSON: {e}")))?;
        let serde_json::Value::Object(overrides) = overrides else {
            return Err(Error::Config("configuration must be a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base)?;
        let obj = merged.as_object_mut().expect("struct serializes to an object");
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text, base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        need(self.gamma.is_finite() && self.gamma >= 0.0, "gamma must be a non-negative number");
        for (v, name) in [
            (self.lr_weights, "lr_weights"),
            (self.lr_quant, "lr_quant"),
            (self.eps_weights, "eps_weights"),
            (self.eps_quant, "eps_quant"),
            (self.width_scale, "width_scale"),
        ] {
            need(v.is_finite() && v > 0.0, &format!("{name} must be positive"));
        }
        need(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be non-negative");
        need(
            self.bias_drain_weight.is_finite() && self.bias_drain_weight >= 0.0,
            "bias_drain_weight must be non-negative",
        );
        need(self.bias_tol.is_finite() && self.bias_tol > 0.0, "bias_tol must be positive");
        need(self.batch_size > 0, "batch_size must be positive");
        need(self.eval_batch_size > 0, "eval_batch_size must be positive");
        need(self.prune_interval > 0, "prune_interval must be positive");
        need(self.eval_interval > 0, "eval_interval must be positive");
        need(self.b_max.is_finite() && self.b_max > 0.0, "b_max must be positive");
        need(
            self.b_init > 1.0 && self.b_init <= self.b_max,
            "b_init must lie in (1, b_max]",
        );
        need(
            self.plateau.factor > 0.0 && self.plateau.factor < 1.0,
            "plateau.factor must lie in (0, 1)",
        );
        need(self.plateau.patience > 0, "plateau.patience must be positive");
        need(
            self.plateau.min_lr > 0.0 && self.plateau.min_lr < 1.0,
            "plateau.min_lr must lie in (0, 1)",
        );
        need(self.synthetic_train_size > 0, "synthetic_train_size must be positive");
        need(self.synthetic_test_size > 0, "synthetic_test_size must be positive");
        need(self.train_subset != Some(0), "train_subset must be positive");
        need(self.eval_subset != Some(0), "eval_subset must be positive");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn widths(&self) -> WidthConfig {
        WidthConfig::default().scaled(self.width_scale)
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            seed: self.seed,
            b_init: self.b_init,
            quantize_first_layer: self.quantize_first_layer,
            quantize_last_layer: self.quantize_last_layer,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weights: GroupConfig {
                lr: self.lr_weights,
                eps: self.eps_weights,
                weight_decay: self.weight_decay,
            },
            other: GroupConfig {
                lr: self.lr_weights,
                eps: self.eps_weights,
                weight_decay: 0.0,
            },
            quant: GroupConfig {
                lr: self.lr_quant,
                eps: self.eps_quant,
                weight_decay: 0.0,
            },
            beta1: 0.9,
            beta2: 0.999,
            b_max: self.b_max,
        }
    }

    pub fn prune_options(&self) -> PruneOptions {
        PruneOptions {
            bias_tol: self.bias_tol,
            prune_residual: self.prune_residual,
        }
    }
}
