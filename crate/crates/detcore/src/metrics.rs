//! Detection evaluation: per-class average precision over a sweep of IoU
//! thresholds, mean AP, and average recall for class-agnostic proposals.
//!
//! Matching is greedy in score order. Ties in score fall back to image
//! index and then to position within the image, so evaluation does not
//! depend on input ordering. A detection matches the still-unmatched
//! ground-truth box with the highest overlap at or above the threshold.
//! AP interpolates precision on the 101-point recall grid {0, 0.01, ..,
//! 1.0}; mean AP averages classes first, then thresholds. Classes are
//! taken from the ground truth only, so detections for classes that have
//! no ground-truth box are ignored entirely.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geom::{iou, BBox};
use crate::postproc::Detection;

/// The ten standard thresholds 0.50, 0.55, .., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Interpolated average precision on the 101-point recall grid.
///
/// `recalls` and `precisions` are parallel arrays in detection rank order.
/// Each grid point contributes the maximum precision among ranks whose
/// recall is at or above the grid value, and the result is the mean over
/// the 101 points.
pub fn average_precision(recalls: &[f64], precisions: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let mut best = 0.0;
        for (rec, prec) in recalls.iter().zip(precisions) {
            if *rec >= r && *prec > best {
                best = *prec;
            }
        }
        total += best;
    }
    total / 101.0
}

/// Greedy matching of scored boxes against ground truth in a single image.
///
/// Returns a flag per detection, in input order, set when the detection
/// matched some ground-truth box at the threshold.
pub fn match_detections(dets: &[(BBox, f64)], gts: &[BBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![false; dets.len()];
    for &d in &order {
        let mut best = None;
        let mut best_iou = 0.0;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let ov = iou(dets[d].0, *gt);
            if ov >= iou_thr && ov > best_iou {
                best_iou = ov;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            taken[j] = true;
            matched[d] = true;
        }
    }
    matched
}

/// Evaluation summary: AP at each threshold and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub map: f64,
    pub ar_at_k: Option<f64>,
}

/// Mean average precision over a dataset.
///
/// `dets[i]` holds the detections for image `i` and `gts[i]` its
/// ground-truth boxes with class labels.
pub fn eval_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    thresholds: &[f64],
) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "image counts differ");
    let classes: BTreeSet<usize> = gts
        .iter()
        .flat_map(|img| img.iter().map(|&(_, c)| c))
        .collect();

    let mut ap_per_threshold = Vec::with_capacity(thresholds.len());
    let mut total = 0.0;
    for &thr in thresholds {
        let ap_t = if classes.is_empty() {
            0.0
        } else {
            let sum: f64 = classes.iter().map(|&c| class_ap(dets, gts, c, thr)).sum();
            sum / classes.len() as f64
        };
        ap_per_threshold.push((thr, ap_t));
        total += ap_t;
    }
    let map = if thresholds.is_empty() {
        0.0
    } else {
        total / thresholds.len() as f64
    };
    EvalResult {
        ap_per_threshold,
        map,
        ar_at_k: None,
    }
}

fn class_ap(dets: &[Vec<Detection>], gts: &[Vec<(BBox, usize)>], class: usize, thr: f64) -> f64 {
    let gt_boxes: Vec<Vec<BBox>> = gts
        .iter()
        .map(|img| {
            img.iter()
                .filter(|&&(_, c)| c == class)
                .map(|&(b, _)| b)
                .collect()
        })
        .collect();
    let n_gts: usize = gt_boxes.iter().map(Vec::len).sum();
    if n_gts == 0 {
        return 0.0;
    }

    let mut entries: Vec<(usize, usize, f64, BBox)> = Vec::new();
    for (img, img_dets) in dets.iter().enumerate() {
        for (pos, d) in img_dets.iter().enumerate() {
            if d.class_id == class {
                entries.push((img, pos, d.score, d.bbox));
            }
        }
    }
    entries.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut taken: Vec<Vec<bool>> = gt_boxes.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recalls = Vec::with_capacity(entries.len());
    let mut precisions = Vec::with_capacity(entries.len());
    for &(img, _, _, bbox) in &entries {
        let mut best = None;
        let mut best_iou = 0.0;
        for (j, gt) in gt_boxes[img].iter().enumerate() {
            if taken[img][j] {
                continue;
            }
            let ov = iou(bbox, *gt);
            if ov >= thr && ov > best_iou {
                best_iou = ov;
                best = Some(j);
            }
        }
        match best {
            Some(j) => {
                taken[img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recalls.push(tp as f64 / n_gts as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    average_precision(&recalls, &precisions)
}

/// Average recall of class-agnostic proposals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArOut {
    pub value: f64,
    /// Set when there was no ground truth at all; the value is then 0.
    pub no_gts: bool,
}

/// Average recall at `k` proposals per image, averaged over `thresholds`.
///
/// Proposals are ranked by score within each image (ties keep input
/// order) and truncated to the top `k` before class-agnostic greedy
/// matching.
pub fn eval_ar(
    proposals: &[Vec<(BBox, f64)>],
    gts: &[Vec<BBox>],
    k: usize,
    thresholds: &[f64],
) -> ArOut {
    assert_eq!(proposals.len(), gts.len(), "image counts differ");
    let n_gts: usize = gts.iter().map(Vec::len).sum();
    if n_gts == 0 {
        return ArOut {
            value: 0.0,
            no_gts: true,
        };
    }

    let top: Vec<Vec<(BBox, f64)>> = proposals
        .iter()
        .map(|img| {
            let mut order: Vec<usize> = (0..img.len()).collect();
            order.sort_by(|&a, &b| img[b].1.total_cmp(&img[a].1).then(a.cmp(&b)));
            order.truncate(k);
            order.into_iter().map(|i| img[i]).collect()
        })
        .collect();

    let mut total = 0.0;
    for &thr in thresholds {
        let mut matched = 0usize;
        for (img, img_props) in top.iter().enumerate() {
            let flags = match_detections(img_props, &gts[img], thr);
            matched += flags.iter().filter(|&&f| f).count();
        }
        total += matched as f64 / n_gts as f64;
    }
    ArOut {
        value: total / thresholds.len() as f64,
        no_gts: false,
    }
}
