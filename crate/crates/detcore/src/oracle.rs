//! Brute-force reference implementations and verification suites.
//!
//! Everything in this module trades speed for obviousness: overlap by
//! counting pixels, suppression by repeated full scans, gradients by central
//! finite differences, evaluation by direct prefix enumeration. The suite
//! runners compare a candidate implementation against these references and
//! report mismatch counts, so the same code backs both the test suite and
//! the `oracle` command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::BBox;
use crate::losses::{self, IouMode};
use crate::postproc::Detection;

/// IoU of two integer-coordinate boxes by counting unit pixels.
///
/// Pixel `(i, j)` covers the unit square `[i, i+1) x [j, j+1)` and counts as
/// inside a box when that square lies entirely within it.
pub fn pixel_iou(a: BBox, b: BBox) -> f64 {
    let (in_a, in_b, in_both) = pixel_counts(a, b);
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

/// GIoU of two integer-coordinate boxes, with every area obtained by pixel
/// counting.
pub fn pixel_giou(a: BBox, b: BBox) -> f64 {
    let (in_a, in_b, in_both) = pixel_counts(a, b);
    let union = (in_a + in_b - in_both) as f64;
    let iou = if union == 0.0 {
        0.0
    } else {
        in_both as f64 / union
    };
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = cw * ch;
    if enclosing <= 0.0 {
        return iou;
    }
    iou - (enclosing - union) / enclosing
}

fn pixel_counts(a: BBox, b: BBox) -> (u64, u64, u64) {
    let x_lo = a.x1.min(b.x1).floor() as i64;
    let x_hi = a.x2.max(b.x2).ceil() as i64;
    let y_lo = a.y1.min(b.y1).floor() as i64;
    let y_hi = a.y2.max(b.y2).ceil() as i64;

    let inside = |x: i64, y: i64, bx: BBox| -> bool {
        x as f64 >= bx.x1 && (x + 1) as f64 <= bx.x2 && y as f64 >= bx.y1 && (y + 1) as f64 <= bx.y2
    };

    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut in_both = 0u64;
    for x in x_lo..x_hi {
        for y in y_lo..y_hi {
            let pa = inside(x, y, a);
            let pb = inside(x, y, b);
            in_a += pa as u64;
            in_b += pb as u64;
            in_both += (pa && pb) as u64;
        }
    }
    (in_a, in_b, in_both)
}

/// Non-maximum suppression by repeated full scans, with no sorting.
///
/// Each round picks the highest-scoring live detection (lowest index on
/// ties), keeps it, and kills every live same-class detection it overlaps
/// strictly above `iou_thr`.
pub fn brute_force_nms(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    const LIVE: u8 = 0;
    const KEPT: u8 = 1;
    const DEAD: u8 = 2;
    let mut state = vec![LIVE; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if state[i] == LIVE {
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        if dets[i].score > dets[b].score {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
        }
        let Some(b) = best else { break };
        state[b] = KEPT;
        kept.push(b);
        for i in 0..dets.len() {
            if state[i] == LIVE
                && dets[i].class_id == dets[b].class_id
                && ref_iou(dets[i].bbox, dets[b].bbox) > iou_thr
            {
                state[i] = DEAD;
            }
        }
    }
    kept
}

fn ref_iou(a: BBox, b: BBox) -> f64 {
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| -> f64 {
        let lo = if lo1 > lo2 { lo1 } else { lo2 };
        let hi = if hi1 < hi2 { hi1 } else { hi2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let area = |bx: BBox| (bx.x2 - bx.x1).max(0.0) * (bx.y2 - bx.y1).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Central finite difference of a scalar function at `x`.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central finite difference of a function of four variables.
pub fn central_diff4<F: Fn([f64; 4]) -> f64>(f: F, x: [f64; 4], h: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for k in 0..4 {
        let mut hi = x;
        let mut lo = x;
        hi[k] += h;
        lo[k] -= h;
        out[k] = (f(hi) - f(lo)) / (2.0 * h);
    }
    out
}

/// Relative agreement test: `|a - n| <= tol * max(1, |a|, |n|)`.
pub fn grad_close(analytic: f64, numeric: f64, tol: f64) -> bool {
    (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(1.0)
}

/// Mean average precision by direct enumeration.
///
/// Same protocol as the fast evaluator (greedy matching in descending score
/// order with ties by image then input index, one match per ground-truth
/// box, 101-point interpolated precision, classes averaged before
/// thresholds, classes absent from the ground truth skipped) but written as
/// plain nested loops with its own overlap routine.
pub fn reference_eval_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    thresholds: &[f64],
) -> f64 {
    let mut classes: Vec<usize> = Vec::new();
    for image in gts {
        for &(_, class_id) in image {
            if !classes.contains(&class_id) {
                classes.push(class_id);
            }
        }
    }
    classes.sort_unstable();
    if classes.is_empty() || thresholds.is_empty() {
        return 0.0;
    }

    let mut threshold_sum = 0.0;
    for &thr in thresholds {
        let mut class_sum = 0.0;
        for &class_id in &classes {
            class_sum += reference_class_ap(dets, gts, class_id, thr);
        }
        threshold_sum += class_sum / classes.len() as f64;
    }
    threshold_sum / thresholds.len() as f64
}

fn reference_class_ap(
    dets: &[Vec<Detection>],
    gts: &[Vec<(BBox, usize)>],
    class_id: usize,
    thr: f64,
) -> f64 {
    let mut n_gt = 0usize;
    for image in gts {
        n_gt += image.iter().filter(|(_, c)| *c == class_id).count();
    }
    if n_gt == 0 {
        return 0.0;
    }

    // Flatten this class's detections and order them by score, then image,
    // then position within the image.
    let mut flat: Vec<(usize, usize)> = Vec::new();
    for (img, image) in dets.iter().enumerate() {
        for (pos, det) in image.iter().enumerate() {
            if det.class_id == class_id {
                flat.push((img, pos));
            }
        }
    }
    flat.sort_by(|&(ia, pa), &(ib, pb)| {
        dets[ib][pb]
            .score
            .total_cmp(&dets[ia][pa].score)
            .then(ia.cmp(&ib))
            .then(pa.cmp(&pb))
    });

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|image| vec![false; image.len()]).collect();
    let mut tp_flags = Vec::with_capacity(flat.len());
    for &(img, pos) in &flat {
        let det = &dets[img][pos];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gt_box, gt_class)) in gts[img].iter().enumerate() {
            if gt_class != class_id || taken[img][gi] {
                continue;
            }
            let overlap = ref_iou(det.bbox, gt_box);
            if overlap >= thr {
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
        }
        if let Some((gi, _)) = best {
            taken[img][gi] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }

    let mut ap_sum = 0.0;
    for grid in 0..=100 {
        let r = grid as f64 / 100.0;
        let mut best_precision = 0.0;
        let mut tp = 0usize;
        for (k, &flag) in tp_flags.iter().enumerate() {
            tp += flag as usize;
            let recall = tp as f64 / n_gt as f64;
            let precision = tp as f64 / (k + 1) as f64;
            if recall >= r && precision > best_precision {
                best_precision = precision;
            }
        }
        ap_sum += best_precision;
    }
    ap_sum / 101.0
}

/// Outcome of one oracle suite run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteReport {
    pub total: usize,
    pub failures: usize,
    pub max_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// A random box with integer corners inside a `side x side` canvas.
pub fn random_integer_box(rng: &mut ChaCha8Rng, side: u32) -> BBox {
    let x1 = rng.gen_range(0..side);
    let y1 = rng.gen_range(0..side);
    let x2 = rng.gen_range(x1 + 1..=side);
    let y2 = rng.gen_range(y1 + 1..=side);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Compare a candidate IoU and GIoU against the pixel-counting references
/// on random integer boxes. IoU must match exactly; GIoU to 1e-9.
pub fn run_iou_suite(
    iou_fn: &dyn Fn(BBox, BBox) -> f64,
    giou_fn: &dyn Fn(BBox, BBox) -> f64,
    n_pairs: usize,
    seed: u64,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut max_err: f64 = 0.0;
    for _ in 0..n_pairs {
        let a = random_integer_box(&mut rng, 64);
        let b = random_integer_box(&mut rng, 64);
        let iou_err = (iou_fn(a, b) - pixel_iou(a, b)).abs();
        let giou_err = (giou_fn(a, b) - pixel_giou(a, b)).abs();
        max_err = max_err.max(iou_err).max(giou_err);
        if iou_err != 0.0 || giou_err > 1e-9 {
            failures += 1;
        }
    }
    SuiteReport {
        total: n_pairs,
        failures,
        max_err,
    }
}

/// Random detections with moderately overlapping boxes and a few classes.
pub fn random_detections(rng: &mut ChaCha8Rng, max_boxes: usize) -> Vec<Detection> {
    let n = rng.gen_range(1..=max_boxes.max(1));
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            Detection::new(
                BBox::new(
                    x1,
                    y1,
                    x1 + rng.gen_range(2.0..20.0),
                    y1 + rng.gen_range(2.0..20.0),
                ),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0..3),
            )
        })
        .collect()
}

/// Compare a candidate NMS against the brute-force reference and check that
/// the candidate is idempotent on its own survivors.
pub fn run_nms_suite(
    nms_fn: &dyn Fn(&[Detection], f64) -> Vec<usize>,
    n_instances: usize,
    max_boxes: usize,
    seed: u64,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..n_instances {
        let dets = random_detections(&mut rng, max_boxes);
        let iou_thr = *[0.3, 0.5, 0.7].iter().nth(rng.gen_range(0..3)).unwrap();
        let fast = nms_fn(&dets, iou_thr);
        let reference = brute_force_nms(&dets, iou_thr);
        let survivors: Vec<Detection> = fast.iter().map(|&i| dets[i]).collect();
        let again = nms_fn(&survivors, iou_thr);
        let idempotent = again == (0..survivors.len()).collect::<Vec<_>>();
        if fast != reference || !idempotent {
            failures += 1;
        }
    }
    SuiteReport {
        total: n_instances,
        failures,
        max_err: 0.0,
    }
}

/// Check the analytic gradient of every loss against central differences at
/// random, kink-free points. `n_points` applies per loss.
pub fn run_grad_suite(n_points: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let tol = 1e-4;
    let mut total = 0;
    let mut failures = 0;
    let mut max_err: f64 = 0.0;

    let mut record = |analytic: f64, numeric: f64, total: &mut usize, failures: &mut usize| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_err = max_err.max(err);
        *total += 1;
        if err > tol {
            *failures += 1;
        }
    };

    for _ in 0..n_points {
        let beta = rng.gen_range(0.05..2.0);
        let x = random_residual_point(&mut rng, &[0.0, beta, 1.0]);

        let analytic = losses::smooth_l1(x, beta).unwrap().grad;
        let numeric = central_diff(|v| losses::smooth_l1(v, beta).unwrap().value, x, h);
        record(analytic, numeric, &mut total, &mut failures);

        let analytic = losses::l1(x).grad;
        let numeric = central_diff(|v| losses::l1(v).value, x, h);
        record(analytic, numeric, &mut total, &mut failures);

        let alpha = rng.gen_range(0.2..1.5);
        let gamma = rng.gen_range(0.5..2.5);
        let analytic = losses::balanced_l1(x, alpha, gamma).unwrap().grad;
        let numeric = central_diff(|v| losses::balanced_l1(v, alpha, gamma).unwrap().value, x, h);
        record(analytic, numeric, &mut total, &mut failures);
    }

    for _ in 0..n_points {
        let (pred, target) = random_box_grad_point(&mut rng);
        let p = [pred.x1, pred.y1, pred.x2, pred.y2];
        let cases: [([f64; 4], Box<dyn Fn(BBox) -> f64>); 3] = [
            (
                losses::iou_loss(pred, target, IouMode::Log).unwrap().grad,
                Box::new(move |q| losses::iou_loss(q, target, IouMode::Log).unwrap().value),
            ),
            (
                losses::giou_loss(pred, target).unwrap().grad,
                Box::new(move |q| losses::giou_loss(q, target).unwrap().value),
            ),
            (
                losses::bounded_iou_loss(pred, target, 0.2).unwrap().grad,
                Box::new(move |q| losses::bounded_iou_loss(q, target, 0.2).unwrap().value),
            ),
        ];
        for (analytic, f) in cases {
            let numeric = central_diff4(|c| f(BBox::new(c[0], c[1], c[2], c[3])), p, h);
            for k in 0..4 {
                record(analytic[k], numeric[k], &mut total, &mut failures);
            }
        }
    }

    SuiteReport {
        total,
        failures,
        max_err,
    }
}

/// A residual kept at least 1e-3 away from every kink in `kinks`.
fn random_residual_point(rng: &mut ChaCha8Rng, kinks: &[f64]) -> f64 {
    loop {
        let mag = rng.gen_range(0.0..3.0);
        if kinks.iter().any(|k| (mag - k).abs() < 1e-3) {
            continue;
        }
        return if rng.gen_bool(0.5) { mag } else { -mag };
    }
}

/// A box pair that overlaps and stays away from the gradient kinks of the
/// IoU-family losses: aligned corners, equal extents, and centered offsets.
fn random_box_grad_point(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    loop {
        let tx1 = rng.gen_range(-10.0..10.0);
        let ty1 = rng.gen_range(-10.0..10.0);
        let tw = rng.gen_range(4.0..20.0);
        let th = rng.gen_range(4.0..20.0);
        let target = BBox::new(tx1, ty1, tx1 + tw, ty1 + th);

        let px1 = tx1 + rng.gen_range(-0.35..0.35) * tw;
        let py1 = ty1 + rng.gen_range(-0.35..0.35) * th;
        let pw = tw * rng.gen_range(0.6..1.7);
        let ph = th * rng.gen_range(0.6..1.7);
        let pred = BBox::new(px1, py1, px1 + pw, py1 + ph);

        let margin = 1e-2;
        let corner_aligned = (pred.x1 - target.x1).abs() < margin
            || (pred.y1 - target.y1).abs() < margin
            || (pred.x2 - target.x2).abs() < margin
            || (pred.y2 - target.y2).abs() < margin;
        let size_tied = (pw - tw).abs() < margin || (ph - th).abs() < margin;
        let centered = (pred.cx() - target.cx()).abs() < margin
            || (pred.cy() - target.cy()).abs() < margin;
        let off_center_far = (pred.cx() - target.cx()).abs() > 0.45 * tw
            || (pred.cy() - target.cy()).abs() > 0.45 * th;
        if corner_aligned || size_tied || centered || off_center_far {
            continue;
        }
        return (pred, target);
    }
}

/// A random evaluation scene: per-image detections and ground truth.
pub fn random_eval_scene(
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<Detection>>, Vec<Vec<(BBox, usize)>>) {
    let n_images = rng.gen_range(1..=5);
    let n_classes = rng.gen_range(1..=3);
    let mut dets = Vec::with_capacity(n_images);
    let mut gts = Vec::with_capacity(n_images);
    for _ in 0..n_images {
        let n_gt = rng.gen_range(0..=5);
        let mut image_gts = Vec::with_capacity(n_gt);
        let mut image_dets = Vec::new();
        for _ in 0..n_gt {
            let x1 = rng.gen_range(0.0..40.0);
            let y1 = rng.gen_range(0.0..40.0);
            let w = rng.gen_range(4.0..16.0);
            let h = rng.gen_range(4.0..16.0);
            let class_id = rng.gen_range(0..n_classes);
            let gt = BBox::new(x1, y1, x1 + w, y1 + h);
            image_gts.push((gt, class_id));
            // Detections near the truth, with jitter, plus occasional noise.
            if rng.gen_bool(0.85) {
                let jx = rng.gen_range(-3.0..3.0);
                let jy = rng.gen_range(-3.0..3.0);
                image_dets.push(Detection::new(
                    BBox::new(x1 + jx, y1 + jy, x1 + w + jx, y1 + h + jy),
                    rng.gen_range(0.2..1.0),
                    class_id,
                ));
            }
        }
        for _ in 0..rng.gen_range(0..=4) {
            let x1 = rng.gen_range(0.0..50.0);
            let y1 = rng.gen_range(0.0..50.0);
            image_dets.push(Detection::new(
                BBox::new(
                    x1,
                    y1,
                    x1 + rng.gen_range(3.0..12.0),
                    y1 + rng.gen_range(3.0..12.0),
                ),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0..n_classes),
            ));
        }
        dets.push(image_dets);
        gts.push(image_gts);
    }
    (dets, gts)
}

/// Compare a candidate mAP evaluator against [`reference_eval_map`] on
/// random scenes.
pub fn run_map_suite(
    eval_fn: &dyn Fn(&[Vec<Detection>], &[Vec<(BBox, usize)>], &[f64]) -> f64,
    n_scenes: usize,
    seed: u64,
) -> SuiteReport {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut max_err: f64 = 0.0;
    for _ in 0..n_scenes {
        let (dets, gts) = random_eval_scene(&mut rng);
        let fast = eval_fn(&dets, &gts, &thresholds);
        let reference = reference_eval_map(&dets, &gts, &thresholds);
        let err = (fast - reference).abs();
        max_err = max_err.max(err);
        if err > 1e-9 {
            failures += 1;
        }
    }
    SuiteReport {
        total: n_scenes,
        failures,
        max_err,
    }
}
