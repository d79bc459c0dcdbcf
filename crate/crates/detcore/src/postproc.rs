//! Detection post-processing: hard NMS, Soft-NMS, and score filtering.
//!
//! All routines are class-aware: boxes only ever suppress or decay boxes of
//! their own class. Ordering is deterministic, with score ties broken by
//! input index.

use crate::geom::{self, BBox};

pub const DEFAULT_IOU_THR: f64 = 0.5;
pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_SCORE_THR: f64 = 1e-3;

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        Self {
            bbox,
            score,
            class_id,
        }
    }
}

/// Greedy non-maximum suppression.
///
/// Returns indices of the kept detections in selection order (descending
/// score, ties by lower input index). A detection is suppressed when an
/// already-kept detection of the same class overlaps it with IoU strictly
/// above `iou_thr`.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    'candidates: for &i in &order {
        for &j in &kept {
            if dets[j].class_id == dets[i].class_id
                && geom::iou(dets[j].bbox, dets[i].bbox) > iou_thr
            {
                continue 'candidates;
            }
        }
        kept.push(i);
    }
    kept
}

/// Score decay rule for [`soft_nms`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftNmsMethod {
    /// Multiply by `1 - iou`, but only when the overlap exceeds `iou_thr`.
    Linear,
    /// Multiply by `exp(-iou^2 / sigma)` unconditionally.
    Gaussian,
}

/// Soft-NMS: instead of removing overlapping detections, decay their
/// scores, then drop whatever sinks below `score_thr`.
///
/// Returns the surviving detections with their decayed scores, in selection
/// order.
pub fn soft_nms(
    dets: &[Detection],
    method: SoftNmsMethod,
    iou_thr: f64,
    sigma: f64,
    score_thr: f64,
) -> Vec<Detection> {
    struct Item {
        det: Detection,
        idx: usize,
    }
    let mut pool: Vec<Item> = dets
        .iter()
        .enumerate()
        .map(|(idx, &det)| Item { det, idx })
        .collect();

    let mut kept = Vec::new();
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                a.det
                    .score
                    .total_cmp(&b.det.score)
                    .then(b.idx.cmp(&a.idx))
            })
            .map(|(pos, _)| pos)
            .unwrap();
        let item = pool.swap_remove(best);
        for other in &mut pool {
            if other.det.class_id != item.det.class_id {
                continue;
            }
            let iou = geom::iou(other.det.bbox, item.det.bbox);
            let decay = match method {
                SoftNmsMethod::Linear => {
                    if iou > iou_thr {
                        1.0 - iou
                    } else {
                        1.0
                    }
                }
                SoftNmsMethod::Gaussian => (-iou * iou / sigma).exp(),
            };
            other.det.score *= decay;
        }
        pool.retain(|it| it.det.score >= score_thr);
        kept.push(item.det);
    }
    kept
}

/// Keep the `k` highest-scoring detections at or above `score_thr`.
///
/// Ties are broken by lower input index; output is in descending score
/// order.
pub fn topk_filter(dets: &[Detection], score_thr: f64, k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= score_thr)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| dets[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> Detection {
        Detection::new(BBox::new(x1, y1, x2, y2), score, class_id)
    }

    #[test]
    fn nms_single_detection() {
        let dets = [d(0.0, 0.0, 1.0, 1.0, 0.9, 0)];
        assert_eq!(nms(&dets, 0.5), vec![0]);
    }

    #[test]
    fn nms_suppresses_identical_boxes() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.9, 0),
            d(0.0, 0.0, 1.0, 1.0, 0.8, 0),
        ];
        assert_eq!(nms(&dets, 0.5), vec![0]);
    }

    #[test]
    fn nms_keeps_identical_boxes_of_different_classes() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.9, 0),
            d(0.0, 0.0, 1.0, 1.0, 0.8, 1),
        ];
        assert_eq!(nms(&dets, 0.5), vec![0, 1]);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU of these two boxes is exactly 0.5: suppression requires
        // strictly greater overlap, so both survive.
        let dets = [
            d(0.0, 0.0, 3.0, 1.0, 0.9, 0),
            d(1.0, 0.0, 4.0, 1.0, 0.8, 0),
        ];
        assert_eq!(geom::iou(dets[0].bbox, dets[1].bbox), 0.5);
        assert_eq!(nms(&dets, 0.5), vec![0, 1]);
    }

    #[test]
    fn nms_score_ties_prefer_lower_index() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.7, 0),
            d(0.1, 0.0, 1.1, 1.0, 0.7, 0),
        ];
        assert_eq!(nms(&dets, 0.5), vec![0]);
    }

    #[test]
    fn nms_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..rng.gen_range(1..40))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..20.0);
                    let y1 = rng.gen_range(0.0..20.0);
                    d(
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..10.0),
                        y1 + rng.gen_range(1.0..10.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0..3),
                    )
                })
                .collect();
            let kept = nms(&dets, 0.5);
            let survivors: Vec<Detection> = kept.iter().map(|&i| dets[i]).collect();
            let again = nms(&survivors, 0.5);
            assert_eq!(again, (0..survivors.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn soft_nms_linear_ignores_small_overlaps() {
        let dets = [
            d(0.0, 0.0, 2.0, 1.0, 0.8, 0),
            d(1.0, 0.0, 3.0, 1.0, 0.2, 0),
        ];
        assert_eq!(geom::iou(dets[0].bbox, dets[1].bbox), 1.0 / 3.0);
        let out = soft_nms(&dets, SoftNmsMethod::Linear, 0.5, 0.5, 1e-3);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.8);
        assert_eq!(out[1].score, 0.2);
    }

    #[test]
    fn soft_nms_linear_partial_overlap() {
        // IoU between the boxes is 0.6: the second score becomes
        // 0.8 is the first, second is 0.4 * (1 - 0.6) = 0.16.
        let dets = [
            d(0.0, 0.0, 10.0, 10.0, 0.8, 0),
            d(0.0, 2.5, 10.0, 12.5, 0.4, 0),
        ];
        let iou = geom::iou(dets[0].bbox, dets[1].bbox);
        assert!((iou - 0.6).abs() < 1e-12);
        let out = soft_nms(&dets, SoftNmsMethod::Linear, 0.5, 0.5, 1e-3);
        assert_eq!(out.len(), 2);
        assert!((out[1].score - 0.4 * (1.0 - iou)).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_gaussian_decay() {
        let dets = [
            d(0.0, 0.0, 10.0, 10.0, 0.9, 0),
            d(2.0, 0.0, 12.0, 10.0, 0.8, 0),
        ];
        let iou = geom::iou(dets[0].bbox, dets[1].bbox);
        let out = soft_nms(&dets, SoftNmsMethod::Gaussian, 0.5, 0.5, 1e-3);
        assert_eq!(out.len(), 2);
        let expected = 0.8 * (-iou * iou / 0.5).exp();
        assert!((out[1].score - expected).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_drops_below_score_threshold() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.9, 0),
            d(0.0, 0.0, 1.0, 1.0, 0.5, 0),
        ];
        let out = soft_nms(&dets, SoftNmsMethod::Linear, 0.5, 0.5, 1e-3);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn soft_nms_never_raises_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let dets: Vec<Detection> = (0..rng.gen_range(1..30))
                .map(|_| {
                    let x1 = rng.gen_range(0.0..15.0);
                    let y1 = rng.gen_range(0.0..15.0);
                    d(
                        x1,
                        y1,
                        x1 + rng.gen_range(1.0..8.0),
                        y1 + rng.gen_range(1.0..8.0),
                        rng.gen_range(0.01..1.0),
                        rng.gen_range(0..2),
                    )
                })
                .collect();
            for method in [SoftNmsMethod::Linear, SoftNmsMethod::Gaussian] {
                let out = soft_nms(&dets, method, 0.5, 0.5, 1e-3);
                assert!(out.len() <= dets.len());
                for kept in &out {
                    let original = dets
                        .iter()
                        .find(|d| d.bbox == kept.bbox && d.class_id == kept.class_id)
                        .unwrap();
                    assert!(kept.score <= original.score + 1e-12);
                }
            }
        }
    }

    #[test]
    fn soft_nms_disjoint_boxes_pass_through() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.9, 0),
            d(5.0, 5.0, 6.0, 6.0, 0.8, 0),
        ];
        for method in [SoftNmsMethod::Linear, SoftNmsMethod::Gaussian] {
            let out = soft_nms(&dets, method, 0.5, 0.5, 1e-3);
            assert_eq!(out.len(), 2);
            assert_eq!(out[0].score, 0.9);
            assert_eq!(out[1].score, 0.8);
        }
    }

    #[test]
    fn topk_filter_orders_and_truncates() {
        let dets = [
            d(0.0, 0.0, 1.0, 1.0, 0.5, 0),
            d(1.0, 0.0, 2.0, 1.0, 0.9, 1),
            d(2.0, 0.0, 3.0, 1.0, 0.1, 0),
            d(3.0, 0.0, 4.0, 1.0, 0.7, 1),
        ];
        let out = topk_filter(&dets, 0.2, 2);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.7);

        let all = topk_filter(&dets, 0.2, 10);
        assert_eq!(all.len(), 3);

        let none = topk_filter(&dets, 0.95, 10);
        assert!(none.is_empty());
    }

    #[test]
    fn topk_filter_keeps_exact_threshold() {
        let dets = [d(0.0, 0.0, 1.0, 1.0, 0.2, 0)];
        assert_eq!(topk_filter(&dets, 0.2, 5).len(), 1);
    }
}
