//! Training-scale policies and aspect-preserving resizing.
//!
//! A policy picks a (long, short) target per iteration: either a uniform
//! draw from a predefined list of short edges, or a uniform integer from a
//! closed range. The resize factor then fits the image inside the
//! long-edge cap and short-edge target without changing the aspect ratio.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::SynthImage;
use crate::geom::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScalePolicy {
    Value {
        long_edge: f64,
        short_edges: Vec<f64>,
    },
    Range {
        long_edge: f64,
        min: i64,
        max: i64,
    },
}

impl ScalePolicy {
    /// Draw a (long, short) scale target.
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64) {
        match self {
            ScalePolicy::Value {
                long_edge,
                short_edges,
            } => {
                let short = short_edges[rng.gen_range(0..short_edges.len())];
                (*long_edge, short)
            }
            ScalePolicy::Range {
                long_edge,
                min,
                max,
            } => (*long_edge, rng.gen_range(*min..=*max) as f64),
        }
    }
}

/// Largest factor keeping the long side at or under `long_cap` and the
/// short side at or under `short_target`.
pub fn resize_factor(img_w: f64, img_h: f64, long_cap: f64, short_target: f64) -> f64 {
    let long = img_w.max(img_h);
    let short = img_w.min(img_h);
    (long_cap / long).min(short_target / short)
}

pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Nearest-neighbor resize; box annotations scale with the image and are
/// clipped to the new bounds.
pub fn resize_image(img: &SynthImage, factor: f64) -> SynthImage {
    let new_w = (round_half_up(img.width as f64 * factor) as usize).max(1);
    let new_h = (round_half_up(img.height as f64 * factor) as usize).max(1);
    let mut pixels = vec![0.0; new_w * new_h];
    for y in 0..new_h {
        let src_y = ((y as f64 / factor) as usize).min(img.height - 1);
        for x in 0..new_w {
            let src_x = ((x as f64 / factor) as usize).min(img.width - 1);
            pixels[y * new_w + x] = img.pixels[src_y * img.width + src_x];
        }
    }
    let annotations = img
        .annotations
        .iter()
        .map(|&(b, class)| {
            let scaled = BBox::new(
                b.x1 * factor,
                b.y1 * factor,
                b.x2 * factor,
                b.y2 * factor,
            );
            (
                crate::geom::clip(scaled, new_w as f64, new_h as f64),
                class,
            )
        })
        .collect();
    SynthImage {
        id: img.id,
        width: new_w,
        height: new_h,
        pixels,
        annotations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn value_mode_draws_from_the_list() {
        let policy = ScalePolicy::Value {
            long_edge: 1333.0,
            short_edges: vec![640.0, 672.0, 704.0, 736.0, 768.0, 800.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let allowed: BTreeSet<i64> = [640, 672, 704, 736, 768, 800].into();
        let mut seen = BTreeSet::new();
        for _ in 0..1000 {
            let (long, short) = policy.sample(&mut rng);
            assert_eq!(long, 1333.0);
            assert!(allowed.contains(&(short as i64)));
            seen.insert(short as i64);
        }
        assert_eq!(seen, allowed);
    }

    #[test]
    fn range_mode_stays_inside_the_bounds() {
        let policy = ScalePolicy::Range {
            long_edge: 1333.0,
            min: 640,
            max: 800,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..1000 {
            let (_, short) = policy.sample(&mut rng);
            assert!((640.0..=800.0).contains(&short));
            assert_eq!(short.fract(), 0.0);
        }
    }

    #[test]
    fn degenerate_range_is_constant() {
        let policy = ScalePolicy::Range {
            long_edge: 1333.0,
            min: 640,
            max: 640,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..50 {
            assert_eq!(policy.sample(&mut rng).1, 640.0);
        }
    }

    #[test]
    fn range_support_matches_the_enumerated_list() {
        let range = ScalePolicy::Range {
            long_edge: 100.0,
            min: 40,
            max: 48,
        };
        let list = ScalePolicy::Value {
            long_edge: 100.0,
            short_edges: (40..=48).map(|v| v as f64).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut from_range = BTreeSet::new();
        let mut from_list = BTreeSet::new();
        for _ in 0..10_000 {
            from_range.insert(range.sample(&mut rng).1 as i64);
            from_list.insert(list.sample(&mut rng).1 as i64);
        }
        assert_eq!(from_range, from_list);
        assert_eq!(from_range.len(), 9);
    }

    #[test]
    fn factor_binds_on_the_tighter_edge() {
        let f = resize_factor(1000.0, 600.0, 1333.0, 800.0);
        assert!((f - 1.333).abs() < 1e-12);
        let f2 = resize_factor(500.0, 500.0, 1333.0, 800.0);
        assert!((f2 - 1.6).abs() < 1e-12);
        let f3 = resize_factor(1333.0, 800.0, 1333.0, 800.0);
        assert!((f3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resized_dims_respect_caps_with_one_tight_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        use rand::Rng;
        for _ in 0..500 {
            let w = rng.gen_range(100..1600) as f64;
            let h = rng.gen_range(100..1600) as f64;
            let f = resize_factor(w, h, 1333.0, 800.0);
            let new_long = round_half_up(w.max(h) * f);
            let new_short = round_half_up(w.min(h) * f);
            assert!(new_long <= 1333.0);
            assert!(new_short <= 800.0);
            let long_tight = (new_long - 1333.0).abs() <= 1.0;
            let short_tight = (new_short - 800.0).abs() <= 1.0;
            assert!(long_tight || short_tight, "{w}x{h} -> {new_long}x{new_short}");
        }
    }

    #[test]
    fn identity_resize_is_lossless() {
        let img = SynthImage {
            id: 0,
            width: 4,
            height: 2,
            pixels: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            annotations: vec![(BBox::new(1.0, 0.0, 3.0, 2.0), 0)],
        };
        let out = resize_image(&img, 1.0);
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.annotations, img.annotations);
    }

    #[test]
    fn doubling_scales_boxes_and_dims() {
        let img = SynthImage {
            id: 3,
            width: 4,
            height: 4,
            pixels: (0..16).map(|i| i as f64 / 16.0).collect(),
            annotations: vec![(BBox::new(1.0, 1.0, 3.0, 2.0), 1)],
        };
        let out = resize_image(&img, 2.0);
        assert_eq!((out.width, out.height), (8, 8));
        let (b, class) = out.annotations[0];
        assert_eq!(class, 1);
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (2.0, 2.0, 6.0, 4.0));
        // Each source pixel expands into a 2x2 block.
        assert_eq!(out.pixels[0], img.pixels[0]);
        assert_eq!(out.pixels[1], img.pixels[0]);
        assert_eq!(out.pixels[8], img.pixels[0]);
        assert_eq!(out.pixels[2], img.pixels[1]);
    }
}
