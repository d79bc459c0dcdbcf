//! Regression-loss family with analytic gradients.
//!
//! Residual losses (smooth L1, plain L1, balanced L1) act on scalar
//! residuals; IoU-family losses (IoU, GIoU, bounded IoU) act on box pairs
//! and differentiate through the overlap geometry. Every loss reports its
//! value together with the exact gradient of that value, so optimizers and
//! finite-difference checks share one surface.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, BBox};

/// Floor used inside logarithms and ratios on degenerate geometry.
pub const EPS: f64 = 1e-6;

/// Loss value plus the gradient of that value with respect to the inputs.
///
/// `G` is `f64` for scalar-residual losses and `[f64; 4]` (d/d pred corners
/// `x1, y1, x2, y2`) for box losses. `eps_clamped` reports that the [`EPS`]
/// floor fired somewhere inside the computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOut<G> {
    pub value: f64,
    pub grad: G,
    pub eps_clamped: bool,
}

pub type ScalarLoss = LossOut<f64>;
pub type BoxLoss = LossOut<[f64; 4]>;

/// Gradient containers that scale uniformly under a loss weight.
pub trait GradScale: Copy {
    fn scaled(self, k: f64) -> Self;
}

impl GradScale for f64 {
    fn scaled(self, k: f64) -> Self {
        self * k
    }
}

impl GradScale for [f64; 4] {
    fn scaled(self, k: f64) -> Self {
        [self[0] * k, self[1] * k, self[2] * k, self[3] * k]
    }
}

/// Scale a loss (value and gradient alike) by a loss weight.
pub fn weighted<G: GradScale>(loss: LossOut<G>, lw: f64) -> LossOut<G> {
    LossOut {
        value: loss.value * lw,
        grad: loss.grad.scaled(lw),
        eps_clamped: loss.eps_clamped,
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("{name} must be positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("target box must have positive size")]
    DegenerateTarget,
    #[error("unknown parameter `{param}` for loss kind `{kind}`")]
    UnknownParam { kind: LossKind, param: String },
    #[error("parameter `{param}` of loss kind `{kind}` is invalid: {message}")]
    BadParam {
        kind: LossKind,
        param: String,
        message: String,
    },
    #[error("loss kind `{kind}` does not accept {family} inputs")]
    WrongFamily { kind: LossKind, family: &'static str },
}

/// Smooth L1: quadratic below `beta`, linear with unit slope above it.
///
/// `|x| < beta` gives `0.5 x^2 / beta`, otherwise `|x| - 0.5 beta`; the
/// derivative is `clamp(x / beta, -1, 1)`, continuous at the junction.
pub fn smooth_l1(x: f64, beta: f64) -> Result<ScalarLoss, LossError> {
    if beta <= 0.0 {
        return Err(LossError::NonPositiveParam {
            name: "beta",
            value: beta,
        });
    }
    let ax = x.abs();
    let (value, grad) = if ax < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (ax - 0.5 * beta, sign(x))
    };
    Ok(LossOut {
        value,
        grad,
        eps_clamped: false,
    })
}

/// Absolute-value loss with subgradient 0 at the origin.
pub fn l1(x: f64) -> ScalarLoss {
    LossOut {
        value: x.abs(),
        grad: sign(x),
        eps_clamped: false,
    }
}

/// Balanced L1: a log-inflated inner branch that meets a linear outer
/// branch of slope `gamma` at `|x| = 1`.
///
/// The inflection constant `b` is fixed by the continuity constraint
/// `alpha * ln(b + 1) = gamma`.
pub fn balanced_l1(x: f64, alpha: f64, gamma: f64) -> Result<ScalarLoss, LossError> {
    if alpha <= 0.0 {
        return Err(LossError::NonPositiveParam {
            name: "alpha",
            value: alpha,
        });
    }
    if gamma <= 0.0 {
        return Err(LossError::NonPositiveParam {
            name: "gamma",
            value: gamma,
        });
    }
    let b = (gamma / alpha).exp_m1();
    let ax = x.abs();
    let (value, slope) = if ax < 1.0 {
        let t = (b * ax + 1.0).ln();
        (alpha / b * (b * ax + 1.0) * t - alpha * ax, alpha * t)
    } else {
        (gamma * ax + gamma / b - alpha, gamma)
    };
    Ok(LossOut {
        value,
        grad: slope * sign(x),
        eps_clamped: false,
    })
}

/// IoU-based loss mode: `-ln(iou)` or `1 - iou`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    Log,
    Linear,
}

/// IoU loss between a predicted and a target box.
///
/// Log mode floors the IoU at [`EPS`] before taking the logarithm; a pair
/// that hits the floor comes back with `eps_clamped` set and zero gradient.
pub fn iou_loss(pred: BBox, target: BBox, mode: IouMode) -> Result<BoxLoss, LossError> {
    require_positive_target(target)?;
    let (iou, d_iou) = iou_grad(pred, target);
    Ok(match mode {
        IouMode::Linear => LossOut {
            value: 1.0 - iou,
            grad: d_iou.scaled(-1.0),
            eps_clamped: false,
        },
        IouMode::Log => {
            if iou < EPS {
                LossOut {
                    value: -EPS.ln(),
                    grad: [0.0; 4],
                    eps_clamped: true,
                }
            } else {
                LossOut {
                    value: -iou.ln(),
                    grad: d_iou.scaled(-1.0 / iou),
                    eps_clamped: false,
                }
            }
        }
    })
}

/// GIoU loss `1 - giou(pred, target)`, in `[0, 2]`.
pub fn giou_loss(pred: BBox, target: BBox) -> Result<BoxLoss, LossError> {
    require_positive_target(target)?;
    let parts = overlap_parts(pred, target);

    let cx1 = pred.x1.min(target.x1);
    let cy1 = pred.y1.min(target.y1);
    let cx2 = pred.x2.max(target.x2);
    let cy2 = pred.y2.max(target.y2);
    let cw = cx2 - cx1;
    let ch = cy2 - cy1;
    let c_area = cw * ch;
    let d_c = [
        if pred.x1 < target.x1 { -ch } else { 0.0 },
        if pred.y1 < target.y1 { -cw } else { 0.0 },
        if pred.x2 > target.x2 { ch } else { 0.0 },
        if pred.y2 > target.y2 { cw } else { 0.0 },
    ];

    let giou = parts.iou - (c_area - parts.union) / c_area;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_ratio = (parts.d_union[k] * c_area - parts.union * d_c[k]) / (c_area * c_area);
        grad[k] = -(parts.d_iou[k] + d_ratio);
    }
    Ok(LossOut {
        value: 1.0 - giou,
        grad,
        eps_clamped: false,
    })
}

/// Bounded-IoU loss: per-coordinate overlap proxies fed through smooth L1.
///
/// Center coordinates use `max(0, (t - 2|dc|) / (t + 2|dc|))` against the
/// target extent `t`; sizes use `min(p/t, t/p)`. Each proxy's complement
/// `1 - iou_b` goes through [`smooth_l1`] with the given `beta` and the four
/// terms are summed. A non-positive predicted extent is floored at [`EPS`]
/// and flagged.
pub fn bounded_iou_loss(pred: BBox, target: BBox, beta: f64) -> Result<BoxLoss, LossError> {
    if beta <= 0.0 {
        return Err(LossError::NonPositiveParam {
            name: "beta",
            value: beta,
        });
    }
    require_positive_target(target)?;

    let (pcx, pcy) = (pred.cx(), pred.cy());
    let (tw, th) = (target.width(), target.height());
    let (tcx, tcy) = (target.cx(), target.cy());

    let mut clamped = false;
    let mut floored = |v: f64| {
        if v < EPS {
            clamped = true;
            EPS
        } else {
            v
        }
    };
    let pw = floored(pred.width());
    let ph = floored(pred.height());

    // Each term: (value, d/d center or d/d size).
    let center_term = |pc: f64, tc: f64, t_extent: f64| -> (f64, f64) {
        let dc = pc - tc;
        let denom = t_extent + 2.0 * dc.abs();
        let raw = (t_extent - 2.0 * dc.abs()) / denom;
        if raw > 0.0 {
            (raw, -4.0 * t_extent * sign(dc) / (denom * denom))
        } else {
            (0.0, 0.0)
        }
    };
    let size_term = |p: f64, t: f64| -> (f64, f64) {
        if p < t {
            (p / t, 1.0 / t)
        } else {
            (t / p, -t / (p * p))
        }
    };

    let (bx, dbx) = center_term(pcx, tcx, tw);
    let (by, dby) = center_term(pcy, tcy, th);
    let (bw, dbw) = size_term(pw, tw);
    let (bh, dbh) = size_term(ph, th);

    let mut value = 0.0;
    let mut acc = |iou_b: f64| -> f64 {
        let out = smooth_l1(1.0 - iou_b, beta).expect("beta validated above");
        value += out.value;
        // d term / d iou_b
        -out.grad
    };
    let gx = acc(bx) * dbx;
    let gy = acc(by) * dby;
    let gw = if pred.width() < EPS { 0.0 } else { acc(bw) * dbw };
    let gh = if pred.height() < EPS { 0.0 } else { acc(bh) * dbh };

    // Chain center/size gradients back to the corner parameterization.
    let grad = [
        0.5 * gx - gw,
        0.5 * gy - gh,
        0.5 * gx + gw,
        0.5 * gy + gh,
    ];
    Ok(LossOut {
        value,
        grad,
        eps_clamped: clamped,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn require_positive_target(target: BBox) -> Result<(), LossError> {
    if target.width() <= 0.0 || target.height() <= 0.0 {
        Err(LossError::DegenerateTarget)
    } else {
        Ok(())
    }
}

struct OverlapParts {
    iou: f64,
    union: f64,
    d_iou: [f64; 4],
    d_union: [f64; 4],
}

/// IoU and its gradient with respect to the predicted corners.
fn iou_grad(pred: BBox, target: BBox) -> (f64, [f64; 4]) {
    let parts = overlap_parts(pred, target);
    (parts.iou, parts.d_iou)
}

fn overlap_parts(p: BBox, t: BBox) -> OverlapParts {
    let iw = (p.x2.min(t.x2) - p.x1.max(t.x1)).max(0.0);
    let ih = (p.y2.min(t.y2) - p.y1.max(t.y1)).max(0.0);
    let inter = iw * ih;
    let union = geom::area(p) + geom::area(t) - inter;

    let d_inter = if iw > 0.0 && ih > 0.0 {
        [
            if p.x1 > t.x1 { -ih } else { 0.0 },
            if p.y1 > t.y1 { -iw } else { 0.0 },
            if p.x2 < t.x2 { ih } else { 0.0 },
            if p.y2 < t.y2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };

    let pw = p.width().max(0.0);
    let ph = p.height().max(0.0);
    let d_area = [
        if pw > 0.0 { -ph } else { 0.0 },
        if ph > 0.0 { -pw } else { 0.0 },
        if pw > 0.0 { ph } else { 0.0 },
        if ph > 0.0 { pw } else { 0.0 },
    ];

    let mut d_union = [0.0; 4];
    let mut d_iou = [0.0; 4];
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if union > 0.0 {
        for k in 0..4 {
            d_union[k] = d_area[k] - d_inter[k];
            d_iou[k] = (d_inter[k] * union - inter * d_union[k]) / (union * union);
        }
    }
    OverlapParts {
        iou,
        union,
        d_iou,
        d_union,
    }
}

/// The loss kinds selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    L1,
    BalancedL1,
    Iou,
    Giou,
    BoundedIou,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::SmoothL1,
        LossKind::L1,
        LossKind::BalancedL1,
        LossKind::Iou,
        LossKind::Giou,
        LossKind::BoundedIou,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::SmoothL1 => "smooth_l1",
            LossKind::L1 => "l1",
            LossKind::BalancedL1 => "balanced_l1",
            LossKind::Iou => "iou",
            LossKind::Giou => "giou",
            LossKind::BoundedIou => "bounded_iou",
        }
    }

    pub fn from_name(name: &str) -> Option<LossKind> {
        LossKind::ALL.iter().copied().find(|k| k.as_str() == name)
    }

    /// True for losses that consume box pairs rather than scalar residuals.
    pub fn is_box_loss(&self) -> bool {
        matches!(self, LossKind::Iou | LossKind::Giou | LossKind::BoundedIou)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A scalar-map parameter value: a number for `beta`/`alpha`/`gamma`, a
/// token for the IoU `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Num(f64),
    Text(String),
}

/// A configurable loss: kind, weight, and kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub loss_weight: f64,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl LossSpec {
    pub fn new(kind: LossKind, loss_weight: f64) -> Self {
        Self {
            kind,
            loss_weight,
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), ParamValue::Num(value));
        self
    }

    fn allowed_params(&self) -> &'static [&'static str] {
        match self.kind {
            LossKind::SmoothL1 | LossKind::BoundedIou => &["beta"],
            LossKind::L1 | LossKind::Giou => &[],
            LossKind::BalancedL1 => &["alpha", "gamma"],
            LossKind::Iou => &["mode"],
        }
    }

    fn num_param(&self, name: &str, default: f64) -> Result<f64, LossError> {
        match self.params.get(name) {
            None => Ok(default),
            Some(ParamValue::Num(v)) => Ok(*v),
            Some(ParamValue::Text(_)) => Err(LossError::BadParam {
                kind: self.kind,
                param: name.to_string(),
                message: "expected a number".to_string(),
            }),
        }
    }

    /// `beta` for smooth L1 (default 1.0) or bounded IoU (default 0.2).
    pub fn beta(&self) -> Result<f64, LossError> {
        let default = match self.kind {
            LossKind::BoundedIou => 0.2,
            _ => 1.0,
        };
        self.num_param("beta", default)
    }

    pub fn alpha(&self) -> Result<f64, LossError> {
        self.num_param("alpha", 0.5)
    }

    pub fn gamma(&self) -> Result<f64, LossError> {
        self.num_param("gamma", 1.5)
    }

    pub fn mode(&self) -> Result<IouMode, LossError> {
        match self.params.get("mode") {
            None => Ok(IouMode::Log),
            Some(ParamValue::Text(s)) if s == "log" => Ok(IouMode::Log),
            Some(ParamValue::Text(s)) if s == "linear" => Ok(IouMode::Linear),
            Some(_) => Err(LossError::BadParam {
                kind: self.kind,
                param: "mode".to_string(),
                message: "expected \"log\" or \"linear\"".to_string(),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            return Err(LossError::NonPositiveParam {
                name: "loss_weight",
                value: self.loss_weight,
            });
        }
        let allowed = self.allowed_params();
        for key in self.params.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(LossError::UnknownParam {
                    kind: self.kind,
                    param: key.clone(),
                });
            }
        }
        for (name, value) in [
            ("beta", self.beta()),
            ("alpha", self.alpha()),
            ("gamma", self.gamma()),
        ] {
            let v = value?;
            if allowed.contains(&name) && v <= 0.0 {
                return Err(LossError::BadParam {
                    kind: self.kind,
                    param: name.to_string(),
                    message: format!("must be positive, got {v}"),
                });
            }
        }
        self.mode()?;
        Ok(())
    }

    /// Evaluate a residual-family loss on `x`, loss weight applied.
    pub fn eval_residual(&self, x: f64) -> Result<ScalarLoss, LossError> {
        let raw = match self.kind {
            LossKind::SmoothL1 => smooth_l1(x, self.beta()?)?,
            LossKind::L1 => l1(x),
            LossKind::BalancedL1 => balanced_l1(x, self.alpha()?, self.gamma()?)?,
            _ => {
                return Err(LossError::WrongFamily {
                    kind: self.kind,
                    family: "scalar residual",
                })
            }
        };
        Ok(weighted(raw, self.loss_weight))
    }

    /// Evaluate a box-family loss on a prediction/target pair, loss weight
    /// applied.
    pub fn eval_box(&self, pred: BBox, target: BBox) -> Result<BoxLoss, LossError> {
        let raw = match self.kind {
            LossKind::Iou => iou_loss(pred, target, self.mode()?)?,
            LossKind::Giou => giou_loss(pred, target)?,
            LossKind::BoundedIou => bounded_iou_loss(pred, target, self.beta()?)?,
            _ => {
                return Err(LossError::WrongFamily {
                    kind: self.kind,
                    family: "box pair",
                })
            }
        };
        Ok(weighted(raw, self.loss_weight))
    }
}
