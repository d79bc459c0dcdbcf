//! Bounding-box geometry: areas, IoU/GIoU, clipping, and delta coding.
//!
//! Boxes use the continuous corner convention: `width = x2 - x1` with no
//! legacy `+1`. Zero-area boxes are legal operands everywhere; IoU of two
//! zero-area boxes is defined as 0 to avoid 0/0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned box in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Center x coordinate.
    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    /// Center y coordinate.
    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    /// True when all coordinates are finite and the corners are ordered.
    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }
}

/// Normalized regression offsets between an anchor and a target box.
///
/// `dx`, `dy` are center offsets in units of anchor width/height; `dw`, `dh`
/// are log size ratios. The means/stds used for normalization travel with
/// the value so decoding cannot silently use a different convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub target_means: [f64; 4],
    pub target_stds: [f64; 4],
}

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("anchor has non-positive size: {w}x{h}")]
    ZeroSizeAnchor { w: f64, h: f64 },
    #[error("ground-truth box has non-positive size: {w}x{h}")]
    ZeroSizeGt { w: f64, h: f64 },
    #[error("target_stds must be strictly positive, got {0:?}")]
    NonPositiveStd([f64; 4]),
    #[error("delta contains non-finite components")]
    NonFiniteDelta,
}

/// Area of a box; degenerate extents contribute 0.
pub fn area(b: BBox) -> f64 {
    b.width().max(0.0) * b.height().max(0.0)
}

fn intersection_area(a: BBox, b: BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Pairwise IoU between two box lists.
///
/// The result is row-major with `a.len()` rows and `b.len()` columns:
/// entry `(i, j)` lives at index `i * b.len() + j`.
pub fn iou_matrix(a: &[BBox], b: &[BBox]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &ai in a {
        let area_a = area(ai);
        for &bj in b {
            let inter = intersection_area(ai, bj);
            let union = area_a + area(bj) - inter;
            out.push(if union <= 0.0 { 0.0 } else { inter / union });
        }
    }
    out
}

/// Generalized IoU: `iou - (area(C) - union) / area(C)` where `C` is the
/// smallest box enclosing both inputs. Falls back to plain IoU when `C`
/// itself is degenerate.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let enclose = BBox::new(
        a.x1.min(b.x1),
        a.y1.min(b.y1),
        a.x2.max(b.x2),
        a.y2.max(b.y2),
    );
    let area_c = area(enclose);
    if area_c <= 0.0 {
        iou
    } else {
        iou - (area_c - union) / area_c
    }
}

/// Clamp a box to the image rectangle `[0, img_w] x [0, img_h]`.
pub fn clip(b: BBox, img_w: f64, img_h: f64) -> BBox {
    BBox::new(
        b.x1.clamp(0.0, img_w),
        b.y1.clamp(0.0, img_h),
        b.x2.clamp(0.0, img_w),
        b.y2.clamp(0.0, img_h),
    )
}

/// Encode the offset from `anchor` to `gt` as normalized deltas.
pub fn encode_delta(
    anchor: BBox,
    gt: BBox,
    means: [f64; 4],
    stds: [f64; 4],
) -> Result<Delta, GeomError> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(GeomError::ZeroSizeAnchor { w: aw, h: ah });
    }
    let (gw, gh) = (gt.width(), gt.height());
    if gw <= 0.0 || gh <= 0.0 {
        return Err(GeomError::ZeroSizeGt { w: gw, h: gh });
    }
    if stds.iter().any(|&s| s <= 0.0) {
        return Err(GeomError::NonPositiveStd(stds));
    }
    let raw = [
        (gt.cx() - anchor.cx()) / aw,
        (gt.cy() - anchor.cy()) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ];
    Ok(Delta {
        dx: (raw[0] - means[0]) / stds[0],
        dy: (raw[1] - means[1]) / stds[1],
        dw: (raw[2] - means[2]) / stds[2],
        dh: (raw[3] - means[3]) / stds[3],
        target_means: means,
        target_stds: stds,
    })
}

/// Apply normalized deltas to an anchor, optionally clipping the result to
/// an image of the given `(width, height)`.
pub fn decode_delta(
    anchor: BBox,
    d: &Delta,
    clip_shape: Option<(f64, f64)>,
) -> Result<BBox, GeomError> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(GeomError::ZeroSizeAnchor { w: aw, h: ah });
    }
    if ![d.dx, d.dy, d.dw, d.dh].iter().all(|v| v.is_finite()) {
        return Err(GeomError::NonFiniteDelta);
    }
    let dx = d.dx * d.target_stds[0] + d.target_means[0];
    let dy = d.dy * d.target_stds[1] + d.target_means[1];
    let dw = d.dw * d.target_stds[2] + d.target_means[2];
    let dh = d.dh * d.target_stds[3] + d.target_means[3];
    let cx = anchor.cx() + dx * aw;
    let cy = anchor.cy() + dy * ah;
    let w = aw * dw.exp();
    let h = ah * dh.exp();
    let out = BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
    Ok(match clip_shape {
        Some((img_w, img_h)) => clip(out, img_w, img_h),
        None => out,
    })
}
