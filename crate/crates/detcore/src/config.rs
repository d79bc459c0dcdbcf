//! Run configuration: a strict JSON schema covering the model, data,
//! optimizer, schedule, workflow, hooks, loss, anchors, scale policy, and
//! normalization choices.
//!
//! Parsing is strict: unknown keys anywhere in the document are rejected,
//! and the error names the offending key together with its path. Semantic
//! checks (threshold ordering, workflow totals, hook kinds) run in
//! [`Config::validate`], which `load` applies automatically.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AllowedBorder, AnchorGenSpec, NegPosUb, SamplerSpec};
use crate::losses::{LossKind, LossSpec};
use crate::pipeline::{LrSchedule, Phase, Warmup};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("config error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelCfg,
    pub data: DataCfg,
    pub optimizer: OptimizerCfg,
    pub lr_schedule: LrScheduleCfg,
    #[serde(default)]
    pub workflow: Option<Vec<(Phase, usize)>>,
    pub max_epochs: usize,
    #[serde(default)]
    pub hooks: Vec<HookCfg>,
    pub loss: LossSpec,
    pub anchors: AnchorCfg,
    pub scale_policy: ScalePolicyCfg,
    pub norm: NormCfg,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub stride: usize,
    pub score_thr: f64,
    pub nms_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    pub n_train: usize,
    pub n_val: usize,
    pub img_size: usize,
    pub max_objects: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCfg {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrScheduleCfg {
    pub steps: Vec<usize>,
    pub factor: f64,
    pub warmup_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookCfg {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub priority: Option<i32>,
    #[serde(default)]
    pub every_n_epochs: Option<usize>,
    #[serde(default)]
    pub every_n_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorCfg {
    pub base_size: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub pos_iou_thr: f64,
    pub neg_iou_thr: f64,
    pub min_pos_iou: f64,
    pub num: usize,
    pub pos_fraction: f64,
    pub allowed_border: AllowedBorder,
    pub neg_pos_ub: NegPosUb,
    #[serde(default)]
    pub smoothl1_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalePolicyCfg {
    pub mode: String,
    pub long_edge: f64,
    pub short_edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormCfg {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub eval: Option<bool>,
    #[serde(default)]
    pub requires_grad: Option<bool>,
    #[serde(default)]
    pub groups: Option<usize>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Config =
            serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));

        if self.model.stride == 0 {
            return bad("model.stride must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.model.score_thr) {
            return bad(format!(
                "model.score_thr must lie in [0, 1], got {}",
                self.model.score_thr
            ));
        }
        if !(0.0..=1.0).contains(&self.model.nms_iou) {
            return bad(format!(
                "model.nms_iou must lie in [0, 1], got {}",
                self.model.nms_iou
            ));
        }

        if self.data.n_train == 0 || self.data.img_size == 0 || self.data.batch_size == 0 {
            return bad("data sizes must be positive".into());
        }
        if self.data.max_objects == 0 {
            return bad("data.max_objects must be at least 1".into());
        }

        if self.optimizer.lr <= 0.0 {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return bad(format!(
                "optimizer.momentum must lie in [0, 1), got {}",
                self.optimizer.momentum
            ));
        }
        if self.optimizer.weight_decay < 0.0 {
            return bad("optimizer.weight_decay must be non-negative".into());
        }

        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        self.lr_schedule_full()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        if let Some(flow) = &self.workflow {
            if flow.is_empty() {
                return bad("workflow must not be empty".into());
            }
            let train_total: usize = flow
                .iter()
                .filter(|(p, _)| *p == Phase::Train)
                .map(|&(_, n)| n)
                .sum();
            if train_total != self.max_epochs {
                return bad(format!(
                    "workflow train epochs ({train_total}) must total max_epochs ({})",
                    self.max_epochs
                ));
            }
        }

        let mut kinds = BTreeSet::new();
        for hook in &self.hooks {
            match hook.kind.as_str() {
                "logging" | "eval" => {}
                other => return bad(format!("unknown hook type {other:?}")),
            }
            if !kinds.insert(hook.kind.clone()) {
                return bad(format!("duplicate hook of type {:?}", hook.kind));
            }
            if hook.every_n_epochs == Some(0) || hook.every_n_iters == Some(0) {
                return bad(format!("hook {:?} intervals must be at least 1", hook.kind));
            }
        }

        self.loss
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let a = &self.anchors;
        self.anchor_gen_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, v) in [
            ("pos_iou_thr", a.pos_iou_thr),
            ("neg_iou_thr", a.neg_iou_thr),
            ("min_pos_iou", a.min_pos_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("anchors.{name} must lie in [0, 1], got {v}"));
            }
        }
        if a.neg_iou_thr > a.pos_iou_thr {
            return bad("anchors.neg_iou_thr must not exceed pos_iou_thr".into());
        }
        if a.min_pos_iou > a.pos_iou_thr {
            return bad("anchors.min_pos_iou must not exceed pos_iou_thr".into());
        }
        self.sampler_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(beta) = a.smoothl1_beta {
            if beta <= 0.0 {
                return bad(format!("anchors.smoothl1_beta must be positive, got {beta}"));
            }
        }

        let sp = &self.scale_policy;
        if sp.long_edge <= 0.0 {
            return bad("scale_policy.long_edge must be positive".into());
        }
        match sp.mode.as_str() {
            "value" => {
                if sp.short_edges.is_empty() {
                    return bad("scale_policy.short_edges must not be empty in value mode".into());
                }
            }
            "range" => {
                if sp.short_edges.len() != 2 {
                    return bad(format!(
                        "scale_policy.short_edges must hold [min, max] in range mode, got {} entries",
                        sp.short_edges.len()
                    ));
                }
                if sp.short_edges[0] > sp.short_edges[1] {
                    return bad("scale_policy range min must not exceed max".into());
                }
                if sp.short_edges.iter().any(|v| v.fract() != 0.0) {
                    return bad("scale_policy range bounds must be integers".into());
                }
            }
            other => return bad(format!("unknown scale_policy mode {other:?}")),
        }
        if sp.short_edges.iter().any(|&v| v <= 0.0) {
            return bad("scale_policy.short_edges must be positive".into());
        }

        match self.norm.kind.as_str() {
            "none" | "bn" | "frozen_bn" => {
                if self.norm.groups.is_some() {
                    return bad(format!(
                        "norm.groups only applies to group norm, not {:?}",
                        self.norm.kind
                    ));
                }
            }
            "gn" => {
                if self.norm.eval.is_some() || self.norm.requires_grad.is_some() {
                    return bad("norm.eval/requires_grad only apply to batch norm".into());
                }
                if self.norm.groups == Some(0) {
                    return bad("norm.groups must be at least 1".into());
                }
            }
            other => return bad(format!("unknown norm type {other:?}")),
        }
        Ok(())
    }

    /// The schedule with the optimizer's base lr and the fixed 1/3 warmup
    /// start factor folded in.
    pub fn lr_schedule_full(&self) -> LrSchedule {
        let warmup = if self.lr_schedule.warmup_iters > 0 {
            Some(Warmup {
                iters: self.lr_schedule.warmup_iters,
                start_factor: 1.0 / 3.0,
            })
        } else {
            None
        };
        LrSchedule {
            base_lr: self.optimizer.lr,
            steps: self.lr_schedule.steps.clone(),
            factor: self.lr_schedule.factor,
            warmup,
        }
    }

    pub fn workflow_or_default(&self) -> Vec<(Phase, usize)> {
        self.workflow
            .clone()
            .unwrap_or_else(|| vec![(Phase::Train, self.max_epochs)])
    }

    pub fn anchor_gen_spec(&self) -> AnchorGenSpec {
        AnchorGenSpec {
            base_size: self.anchors.base_size,
            scales: self.anchors.scales.clone(),
            ratios: self.anchors.ratios.clone(),
            stride: self.model.stride as f64,
        }
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec {
            num: self.anchors.num,
            pos_fraction: self.anchors.pos_fraction,
            neg_pos_ub: self.anchors.neg_pos_ub,
        }
    }

    /// The configured loss with `anchors.smoothl1_beta` overriding the beta
    /// parameter when the loss is smooth L1.
    pub fn effective_loss(&self) -> LossSpec {
        let mut loss = self.loss.clone();
        if loss.kind == LossKind::SmoothL1 {
            if let Some(beta) = self.anchors.smoothl1_beta {
                loss = loss.with_param("beta", beta);
            }
        }
        loss
    }
}
