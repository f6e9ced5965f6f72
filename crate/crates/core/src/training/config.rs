//! Training configuration and its canonical text form.

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::models::{LossKind, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    /// Draw one lambda per example instead of one per batch.
    pub per_example: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mixup: Option<MixupConfig>,
    /// Stop after this many evaluations without OOF-GAP improvement.
    pub patience: usize,
    pub seed: u64,
    pub target_kind: TargetKind,
    /// Top-n truncation for the per-fold GAP evaluation.
    pub eval_n: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSpec::default(),
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            mixup: Some(MixupConfig {
                alpha: 0.4,
                per_example: false,
            }),
            patience: 3,
            seed: 0,
            target_kind: TargetKind::Hard,
            eval_n: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::input("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::input(
                "batch_size must be at least 2 (batch-norm and mixup need pairs)",
            ));
        }
        if let Some(m) = &self.mixup {
            if m.alpha <= 0.0 {
                return Err(Error::input("mixup alpha must be positive"));
            }
            if self.loss.kind != LossKind::Bce {
                return Err(Error::input(
                    "mixup produces soft targets; ranking losses need binary labels",
                ));
            }
        }
        if self.target_kind == TargetKind::Soft && self.loss.kind != LossKind::Bce {
            return Err(Error::input(
                "soft targets are incompatible with ranking losses; use BCE",
            ));
        }
        if self.eval_n == 0 {
            return Err(Error::input("eval_n must be at least 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let loss_name = match self.loss.kind {
            LossKind::Bce => "bce",
            LossKind::SoftRank => "soft_rank",
            LossKind::HingeRank => "hinge_rank",
        };
        let _ = writeln!(out, "loss = {loss_name}");
        let _ = writeln!(out, "top_k_neg = {}", self.loss.top_k_neg);
        let _ = writeln!(out, "margin = {}", self.loss.margin);
        let _ = writeln!(
            out,
            "rank_scope = {}",
            if self.loss.per_sample_scope {
                "per_sample"
            } else {
                "batch"
            }
        );
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "learning_rate = {}", self.adam.learning_rate);
        let _ = writeln!(out, "beta1 = {}", self.adam.beta1);
        let _ = writeln!(out, "beta2 = {}", self.adam.beta2);
        let _ = writeln!(out, "epsilon = {}", self.adam.epsilon);
        let _ = writeln!(out, "warmup_steps = {}", self.adam.warmup_steps);
        let _ = writeln!(out, "mixup = {}", self.mixup.is_some());
        if let Some(m) = &self.mixup {
            let _ = writeln!(out, "mixup_alpha = {}", m.alpha);
            let _ = writeln!(out, "mixup_per_example = {}", m.per_example);
        }
        let _ = writeln!(out, "patience = {}", self.patience);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "target_kind = {}",
            match self.target_kind {
                TargetKind::Hard => "hard",
                TargetKind::Soft => "soft",
            }
        );
        let _ = writeln!(out, "eval_n = {}", self.eval_n);
        out
    }

    /// Parse canonical text; omitted keys keep the defaults.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut map = crate::models::ConfigMap::parse(text)?;
        map.reject_unknown(&[
            "loss",
            "top_k_neg",
            "margin",
            "rank_scope",
            "epochs",
            "batch_size",
            "learning_rate",
            "beta1",
            "beta2",
            "epsilon",
            "warmup_steps",
            "mixup",
            "mixup_alpha",
            "mixup_per_example",
            "patience",
            "seed",
            "target_kind",
            "eval_n",
        ])?;
        let d = TrainConfig::default();
        let loss_kind = match map.take_str("loss", "bce").as_str() {
            "bce" => LossKind::Bce,
            "soft_rank" => LossKind::SoftRank,
            "hinge_rank" => LossKind::HingeRank,
            other => return Err(Error::input(format!("unknown loss '{other}'"))),
        };
        let scope = match map.take_str("rank_scope", "batch").as_str() {
            "batch" => false,
            "per_sample" => true,
            other => return Err(Error::input(format!("unknown rank_scope '{other}'"))),
        };
        let mixup_on: bool = map.take("mixup", d.mixup.is_some())?;
        let mixup_alpha: f64 = map.take("mixup_alpha", 0.4)?;
        let mixup_per_example: bool = map.take("mixup_per_example", false)?;
        let config = TrainConfig {
            loss: LossSpec {
                kind: loss_kind,
                top_k_neg: map.take("top_k_neg", d.loss.top_k_neg)?,
                margin: map.take("margin", d.loss.margin)?,
                per_sample_scope: scope,
            },
            epochs: map.take("epochs", d.epochs)?,
            batch_size: map.take("batch_size", d.batch_size)?,
            adam: AdamConfig {
                learning_rate: map.take("learning_rate", d.adam.learning_rate)?,
                beta1: map.take("beta1", d.adam.beta1)?,
                beta2: map.take("beta2", d.adam.beta2)?,
                epsilon: map.take("epsilon", d.adam.epsilon)?,
                warmup_steps: map.take("warmup_steps", d.adam.warmup_steps)?,
            },
            mixup: mixup_on.then_some(MixupConfig {
                alpha: mixup_alpha,
                per_example: mixup_per_example,
            }),
            patience: map.take("patience", d.patience)?,
            seed: map.take("seed", d.seed)?,
            target_kind: match map.take_str("target_kind", "hard").as_str() {
                "hard" => TargetKind::Hard,
                "soft" => TargetKind::Soft,
                other => return Err(Error::input(format!("unknown target_kind '{other}'"))),
            },
            eval_n: map.take("eval_n", d.eval_n)?,
        };
        map.finish()?;
        config.validate()?;
        Ok(config)
    }
}
