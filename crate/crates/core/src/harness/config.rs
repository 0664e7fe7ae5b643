use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::TruncationPolicy;
use crate::optim::AdamHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MatrixRecovery,
    TwoClass,
    CustomCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Hb,
    Adam,
    LrHb,
    LrAdam,
    LrAdamNaive,
    LoraAdam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Hb,
        OptimizerKind::Adam,
        OptimizerKind::LrHb,
        OptimizerKind::LrAdam,
        OptimizerKind::LrAdamNaive,
        OptimizerKind::LoraAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Hb => "hb",
            OptimizerKind::Adam => "adam",
            OptimizerKind::LrHb => "lr-hb",
            OptimizerKind::LrAdam => "lr-adam",
            OptimizerKind::LrAdamNaive => "lr-adam-naive",
            OptimizerKind::LoraAdam => "lora-adam",
        }
    }

    /// Whether the optimizer trains factored layers.
    pub fn is_low_rank(self) -> bool {
        !matches!(self, OptimizerKind::Hb | OptimizerKind::Adam)
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("optimizer", format!("unknown optimizer `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// `λ_k = λ (1 − k / max_steps)`
    Linear,
}

/// Everything that determines a run. Missing fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub init_rank: usize,
    pub r_min: usize,
    pub r_max: Option<usize>,
    pub max_steps: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,

    /// Matrix side for matrix recovery, feature count for two-class.
    pub dim: usize,
    pub true_rank: usize,
    pub noise: f64,
    pub n_samples: usize,
    /// Width of the hidden layer of the two-class network.
    pub hidden: usize,
    pub lr_schedule: LrSchedule,
    /// Checkpoint directory providing initial weights for `custom-checkpoint`.
    pub init_checkpoint: Option<PathBuf>,
    pub momentum_guard: bool,
    /// Multiplier on the `N(0, 1/n_in)` dense initialization.
    pub init_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::MatrixRecovery,
            optimizer: OptimizerKind::LrAdam,
            lambda: 1e-2,
            gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            tau: 0.1,
            init_rank: 8,
            r_min: 2,
            r_max: None,
            max_steps: 100,
            batch_size: 0,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dim: 32,
            true_rank: 5,
            noise: 0.0,
            n_samples: 400,
            hidden: 32,
            lr_schedule: LrSchedule::Constant,
            init_checkpoint: None,
            momentum_guard: false,
            init_scale: 1.0,
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            // the key on the offending line, else the first quoted name in the message
            let from_span = e.span().and_then(|sp| {
                let start = s[..sp.start].rfind('\n').map_or(0, |i| i + 1);
                let line = s[start..].lines().next()?;
                let (key, _) = line.split_once('=')?;
                Some(key.trim().trim_matches('"').to_string())
            });
            let field = from_span
                .filter(|k| !k.is_empty())
                .or_else(|| e.message().split('`').nth(1).map(str::to_string))
                .unwrap_or_else(|| "<document>".to_string());
            Error::config(field, e.message().trim().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        check(
            finite_nonneg(self.lambda),
            "lambda",
            "must be finite and >= 0",
        )?;
        check(
            finite_nonneg(self.gamma) && self.gamma <= 1.0,
            "gamma",
            "must lie in [0, 1]",
        )?;
        check(
            (0.0..1.0).contains(&self.beta1),
            "beta1",
            "must lie in [0, 1)",
        )?;
        check(
            (0.0..1.0).contains(&self.beta2),
            "beta2",
            "must lie in [0, 1)",
        )?;
        check(
            self.eps.is_finite() && self.eps > 0.0,
            "eps",
            "must be positive",
        )?;
        check(
            finite_nonneg(self.weight_decay),
            "weight_decay",
            "must be finite and >= 0",
        )?;
        check(
            finite_nonneg(self.tau) && self.tau < 1.0,
            "tau",
            "must lie in [0, 1)",
        )?;
        check(self.r_min >= 1, "r_min", "must be >= 1")?;
        check(self.init_rank >= 1, "init_rank", "must be >= 1")?;
        if let Some(r_max) = self.r_max {
            check(r_max >= self.r_min, "r_max", "must be >= r_min")?;
        }
        check(self.dim >= 1, "dim", "must be >= 1")?;
        check(
            finite_nonneg(self.noise),
            "noise",
            "must be finite and >= 0",
        )?;
        check(
            self.init_scale.is_finite() && self.init_scale > 0.0,
            "init_scale",
            "must be positive",
        )?;
        match self.task {
            Task::MatrixRecovery => {
                check(
                    (1..=self.dim).contains(&self.true_rank),
                    "true_rank",
                    "must lie in 1..=dim",
                )?;
            }
            Task::TwoClass | Task::CustomCheckpoint => {
                check(
                    self.n_samples >= 10 && self.n_samples.is_multiple_of(2),
                    "n_samples",
                    "must be even and >= 10",
                )?;
                check(self.hidden >= 1, "hidden", "must be >= 1")?;
            }
        }
        if self.task == Task::CustomCheckpoint {
            check(
                self.init_checkpoint.is_some(),
                "init_checkpoint",
                "required for the custom-checkpoint task",
            )?;
        }
        Ok(())
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lambda: self.lambda,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn truncation(&self) -> TruncationPolicy {
        TruncationPolicy {
            tau: self.tau,
            r_min: self.r_min,
            r_max: self.r_max,
            momentum_guard: self.momentum_guard,
        }
    }

    /// Learning rate used by the step with zero-based index `k`.
    pub fn lambda_at(&self, k: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lambda,
            LrSchedule::Linear => {
                let frac = if self.max_steps == 0 {
                    0.0
                } else {
                    k as f64 / self.max_steps as f64
                };
                self.lambda * (1.0 - frac)
            }
        }
    }
}
