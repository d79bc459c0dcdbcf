//! Anchor generation, validity filtering, IoU assignment, and sampling.

use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, BBox};

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("{name} must be positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("sampler num must be at least 1")]
    ZeroSampleBudget,
    #[error("pos_fraction must lie in (0, 1], got {0}")]
    BadPosFraction(f64),
    #[error("scales and ratios must be non-empty")]
    EmptyAnchorSet,
}

/// Generation parameters for one anchor set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGenSpec {
    pub base_size: f64,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: f64,
}

impl AnchorGenSpec {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.base_size <= 0.0 {
            return Err(AnchorError::NonPositiveParam {
                name: "base_size",
                value: self.base_size,
            });
        }
        if self.stride <= 0.0 {
            return Err(AnchorError::NonPositiveParam {
                name: "stride",
                value: self.stride,
            });
        }
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(AnchorError::EmptyAnchorSet);
        }
        for &s in &self.scales {
            if s <= 0.0 {
                return Err(AnchorError::NonPositiveParam {
                    name: "scale",
                    value: s,
                });
            }
        }
        for &r in &self.ratios {
            if r <= 0.0 {
                return Err(AnchorError::NonPositiveParam {
                    name: "ratio",
                    value: r,
                });
            }
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchor shapes for a single cell, centered on `(base_size/2, base_size/2)`.
///
/// For each `(scale, ratio)`, scale-major, the anchor has width
/// `base_size * scale / sqrt(ratio)` and height `base_size * scale *
/// sqrt(ratio)`, so ratio is height over width and area is preserved across
/// ratios.
pub fn base_anchors(spec: &AnchorGenSpec) -> Vec<BBox> {
    let c = spec.base_size / 2.0;
    let mut out = Vec::with_capacity(spec.anchors_per_cell());
    for &scale in &spec.scales {
        for &ratio in &spec.ratios {
            let w = spec.base_size * scale / ratio.sqrt();
            let h = spec.base_size * scale * ratio.sqrt();
            out.push(BBox::new(
                c - 0.5 * w,
                c - 0.5 * h,
                c + 0.5 * w,
                c + 0.5 * h,
            ));
        }
    }
    out
}

/// Tile base anchors across a feature grid.
///
/// Cell `(ix, iy)` translates every base anchor by `(ix * stride, iy *
/// stride)`. The output is row-major over cells with the base index fastest:
/// the anchor for cell `(ix, iy)` and base `k` lands at
/// `(iy * feat_w + ix) * n_base + k`.
pub fn grid_anchors(base: &[BBox], feat_w: usize, feat_h: usize, stride: f64) -> Vec<BBox> {
    let mut out = Vec::with_capacity(base.len() * feat_w * feat_h);
    for iy in 0..feat_h {
        for ix in 0..feat_w {
            let (dx, dy) = (ix as f64 * stride, iy as f64 * stride);
            for &b in base {
                out.push(BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy));
            }
        }
    }
    out
}

/// Border slack for anchor validity. `Unbounded` admits every anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AllowedBorder {
    Finite(f64),
    Unbounded,
}

impl fmt::Display for AllowedBorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AllowedBorder::Finite(v) => write!(f, "{v}"),
            AllowedBorder::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for AllowedBorder {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            AllowedBorder::Finite(v) => serializer.serialize_f64(*v),
            AllowedBorder::Unbounded => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for AllowedBorder {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct BorderVisitor;
        impl<'de> Visitor<'de> for BorderVisitor {
            type Value = AllowedBorder;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Ok(AllowedBorder::Finite(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Ok(AllowedBorder::Finite(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(AllowedBorder::Finite(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "inf" {
                    Ok(AllowedBorder::Unbounded)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(BorderVisitor)
    }
}

/// Upper bound on sampled negatives per positive. `Unbounded` disables the
/// cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegPosUb {
    Bounded(usize),
    Unbounded,
}

impl fmt::Display for NegPosUb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NegPosUb::Bounded(v) => write!(f, "{v}"),
            NegPosUb::Unbounded => f.write_str("inf"),
        }
    }
}

impl Serialize for NegPosUb {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            NegPosUb::Bounded(v) => serializer.serialize_u64(*v as u64),
            NegPosUb::Unbounded => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for NegPosUb {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct UbVisitor;
        impl<'de> Visitor<'de> for UbVisitor {
            type Value = NegPosUb;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer or the string \"inf\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                Ok(NegPosUb::Bounded(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                if v < 0 {
                    Err(E::invalid_value(de::Unexpected::Signed(v), &self))
                } else {
                    Ok(NegPosUb::Bounded(v as usize))
                }
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "inf" {
                    Ok(NegPosUb::Unbounded)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        deserializer.deserialize_any(UbVisitor)
    }
}

/// Which anchors may enter training: inside the image grown by the border
/// slack on every side.
pub fn valid_flags(anchors: &[BBox], img_w: f64, img_h: f64, border: AllowedBorder) -> Vec<bool> {
    match border {
        AllowedBorder::Unbounded => vec![true; anchors.len()],
        AllowedBorder::Finite(ab) => anchors
            .iter()
            .map(|a| a.x1 >= -ab && a.y1 >= -ab && a.x2 <= img_w + ab && a.y2 <= img_h + ab)
            .collect(),
    }
}

/// Per-anchor assignment outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Between the negative and positive thresholds: excluded from training.
    Ignore,
    Negative,
    /// Matched to the ground-truth box at this index.
    Positive(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignResult {
    pub assignments: Vec<Assignment>,
    pub max_ious: Vec<f64>,
}

impl AssignResult {
    pub fn positives(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a, Assignment::Positive(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| matches!(a, Assignment::Negative))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Max-IoU assignment.
///
/// Each anchor takes its best-overlapping ground-truth box: below `neg_thr`
/// it is negative, at or above `pos_thr` positive, in between ignored. Then
/// every ground-truth box claims its best-overlapping anchor if that overlap
/// reaches `min_pos_iou`, so a box is not left unmatched just because no
/// anchor clears `pos_thr`. A contested anchor goes to the box it overlaps
/// most, ties to the lowest box index; argmax ties always resolve to the
/// lowest index.
pub fn max_iou_assign(
    anchors: &[BBox],
    gts: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
    min_pos_iou: f64,
) -> AssignResult {
    let na = anchors.len();
    let ng = gts.len();
    if na == 0 {
        return AssignResult {
            assignments: Vec::new(),
            max_ious: Vec::new(),
        };
    }
    if ng == 0 {
        return AssignResult {
            assignments: vec![Assignment::Negative; na],
            max_ious: vec![0.0; na],
        };
    }

    let matrix = geom::iou_matrix(anchors, gts);
    let mut assignments = Vec::with_capacity(na);
    let mut max_ious = Vec::with_capacity(na);
    for i in 0..na {
        let row = &matrix[i * ng..(i + 1) * ng];
        let mut best_j = 0;
        for j in 1..ng {
            if row[j] > row[best_j] {
                best_j = j;
            }
        }
        let best = row[best_j];
        max_ious.push(best);
        assignments.push(if best < neg_thr {
            Assignment::Negative
        } else if best >= pos_thr {
            Assignment::Positive(best_j)
        } else {
            Assignment::Ignore
        });
    }

    for j in 0..ng {
        let mut best_i = 0;
        for i in 1..na {
            if matrix[i * ng + j] > matrix[best_i * ng + j] {
                best_i = i;
            }
        }
        let overlap = matrix[best_i * ng + j];
        if overlap < min_pos_iou {
            continue;
        }
        let claim = match assignments[best_i] {
            Assignment::Positive(owner) => {
                let owner_overlap = matrix[best_i * ng + owner];
                overlap > owner_overlap || (overlap == owner_overlap && j < owner)
            }
            _ => true,
        };
        if claim {
            assignments[best_i] = Assignment::Positive(j);
        }
    }

    AssignResult {
        assignments,
        max_ious,
    }
}

/// Sampling quotas for one training image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub num: usize,
    pub pos_fraction: f64,
    pub neg_pos_ub: NegPosUb,
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.num == 0 {
            return Err(AnchorError::ZeroSampleBudget);
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction <= 1.0) {
            return Err(AnchorError::BadPosFraction(self.pos_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingResult {
    pub pos_indices: Vec<usize>,
    pub neg_indices: Vec<usize>,
}

/// Random positive/negative sampling under the sampler quotas.
///
/// Targets `floor(num * pos_fraction)` positives; negatives fill the rest
/// of `num` but never exceed `neg_pos_ub * max(1, sampled positives)` when
/// the bound is finite. Output indices are sorted ascending.
pub fn random_sample<R: Rng>(
    assign: &AssignResult,
    spec: &SamplerSpec,
    rng: &mut R,
) -> SamplingResult {
    let pos_pool = assign.positives();
    let neg_pool = assign.negatives();

    let pos_target = ((spec.num as f64 * spec.pos_fraction).floor() as usize).min(pos_pool.len());
    let pos_indices = sample_sorted(&pos_pool, pos_target, rng);

    let remainder = spec.num - pos_indices.len();
    let neg_cap = match spec.neg_pos_ub {
        NegPosUb::Unbounded => remainder,
        NegPosUb::Bounded(ub) => remainder.min(ub * pos_indices.len().max(1)),
    };
    let neg_indices = sample_sorted(&neg_pool, neg_cap.min(neg_pool.len()), rng);

    SamplingResult {
        pos_indices,
        neg_indices,
    }
}

fn sample_sorted<R: Rng>(pool: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool.len(), amount)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}
