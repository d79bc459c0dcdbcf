//! Synthetic grayscale scenes: bright filled rectangles on a dark noisy
//! background, with box and class annotations.
//!
//! Two object classes are drawn at the same brightness, distinguished
//! only by shape: squares (class 0) carry a dark three-by-three notch
//! punched into their top-left corner, wide rectangles (class 1) are
//! solid. Every side is at least 22 pixels, so of the 32-pixel anchors
//! only the one anchored at the object's top-left corner can contain the
//! whole object, which makes it the unique best-overlapping anchor. Its
//! pooled corner patch always shows the corner, notch included, so
//! classification rests on which pixels are dark rather than on how
//! bright they are. The stored label always agrees with the aspect
//! ratio of the stored box.
//! Object corners land at offsets 3..=4 inside an 8-pixel placement grid,
//! and objects keep a 10-pixel gap from each other, so every object edge
//! falls cleanly inside some pooling tile rather than on a tile boundary.
//!
//! Pixels are quantized to 8-bit levels (stored as k/255), making the
//! portable-graymap round trip exact.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;

const GRID: usize = 8;
const MIN_OFFSET: usize = 3;
const MAX_OFFSET: usize = 4;
const MARGIN: usize = 2;
const GAP: f64 = 10.0;
const BACKGROUND_MAX: u8 = 60;
const OBJECT_MIN: u8 = 160;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad graymap {path}: {message}")]
    BadGraymap { path: String, message: String },
    #[error("bad annotation file: {0}")]
    BadAnnotations(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in [0, 1].
    pub pixels: Vec<f64>,
    pub annotations: Vec<(BBox, usize)>,
}

impl SynthImage {
    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Class of a box by its aspect ratio.
pub fn class_of(b: &BBox) -> usize {
    let ratio = b.width() / b.height();
    usize::from((ratio - 1.0).abs() >= 0.2)
}

struct Placement {
    x1: usize,
    y1: usize,
    w: usize,
    h: usize,
}

fn draw_side(rng: &mut impl Rng) -> usize {
    rng.gen_range(25..=28)
}

fn place(rng: &mut impl Rng, img_size: usize, w: usize, h: usize) -> Option<Placement> {
    let coord = |rng: &mut dyn rand::RngCore, extent: usize| -> Option<usize> {
        let offset = rng.gen_range(MIN_OFFSET..=MAX_OFFSET);
        let limit = img_size.checked_sub(MARGIN + extent + offset)?;
        let tiles = limit / GRID;
        Some(GRID * rng.gen_range(0..=tiles) + offset)
    };
    let x1 = coord(rng, w)?;
    let y1 = coord(rng, h)?;
    Some(Placement { x1, y1, w, h })
}

fn overlaps_with_gap(p: &Placement, existing: &[BBox]) -> bool {
    let grown = BBox::new(
        p.x1 as f64 - GAP,
        p.y1 as f64 - GAP,
        (p.x1 + p.w) as f64 + GAP,
        (p.y1 + p.h) as f64 + GAP,
    );
    existing
        .iter()
        .any(|b| b.x1 < grown.x2 && grown.x1 < b.x2 && b.y1 < grown.y2 && grown.y1 < b.y2)
}

/// Generate `n_images` scenes of `img_size` x `img_size` pixels with 1 to
/// `max_objects` rectangles each. Placement retries a bounded number of
/// times, so crowded settings may yield fewer objects than the cap.
pub fn gen_dataset(
    n_images: usize,
    img_size: usize,
    max_objects: usize,
    rng: &mut impl Rng,
) -> Vec<SynthImage> {
    (0..n_images)
        .map(|id| gen_image(id, img_size, max_objects, rng))
        .collect()
}

fn gen_image(id: usize, img_size: usize, max_objects: usize, rng: &mut impl Rng) -> SynthImage {
    let mut pixels = vec![0.0; img_size * img_size];
    for p in &mut pixels {
        *p = rng.gen_range(0..=BACKGROUND_MAX) as f64 / 255.0;
    }

    let target = rng.gen_range(1..=max_objects);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < target && attempts < 60 {
        attempts += 1;
        let wide = rng.gen_bool(0.5);
        let (w, h) = if wide {
            let h = rng.gen_range(22..=23usize);
            let ratio = rng.gen_range(1.28..=1.33);
            let w = ((h as f64 * ratio).round() as usize).min(29);
            (w, h)
        } else {
            let s = draw_side(rng);
            (s, s)
        };
        let Some(p) = place(rng, img_size, w, h) else {
            continue;
        };
        if overlaps_with_gap(&p, &boxes) {
            continue;
        }
        let base = rng.gen_range(200..=240i32);
        for y in p.y1..p.y1 + p.h {
            for x in p.x1..p.x1 + p.w {
                let (dx, dy) = (x - p.x1, y - p.y1);
                let level = if !wide && dx < 3 && dy < 3 {
                    rng.gen_range(0..=BACKGROUND_MAX as i32) as u8
                } else {
                    (base + rng.gen_range(-8..=8)).clamp(OBJECT_MIN as i32, 255) as u8
                };
                pixels[y * img_size + x] = level as f64 / 255.0;
            }
        }
        let b = BBox::new(
            p.x1 as f64,
            p.y1 as f64,
            (p.x1 + p.w) as f64,
            (p.y1 + p.h) as f64,
        );
        labels.push(class_of(&b));
        boxes.push(b);
    }

    SynthImage {
        id,
        width: img_size,
        height: img_size,
        pixels,
        annotations: boxes.into_iter().zip(labels).collect(),
    }
}

#[derive(Serialize, Deserialize)]
struct AnnFile {
    images: Vec<AnnImage>,
}

#[derive(Serialize, Deserialize)]
struct AnnImage {
    id: usize,
    width: usize,
    height: usize,
    file: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Write one binary graymap per image plus `annotations.json`.
pub fn save_dataset(dir: &Path, images: &[SynthImage]) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let file = format!("img_{:04}.pgm", img.id);
        let path = dir.join(&file);
        let mut out = Vec::with_capacity(img.pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("vec write");
        out.extend(img.pixels.iter().map(|&p| (p * 255.0).round() as u8));
        std::fs::write(&path, out).map_err(|e| io_err(&path, e))?;
        entries.push(AnnImage {
            id: img.id,
            width: img.width,
            height: img.height,
            file,
            boxes: img
                .annotations
                .iter()
                .map(|(b, _)| [b.x1, b.y1, b.x2, b.y2])
                .collect(),
            labels: img.annotations.iter().map(|&(_, c)| c).collect(),
        });
    }
    let ann_path = dir.join("annotations.json");
    let text = serde_json::to_vec_pretty(&AnnFile { images: entries })
        .map_err(|e| DatasetError::BadAnnotations(e.to_string()))?;
    std::fs::write(&ann_path, text).map_err(|e| io_err(&ann_path, e))
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthImage>, DatasetError> {
    let ann_path = dir.join("annotations.json");
    let text = std::fs::read_to_string(&ann_path).map_err(|e| io_err(&ann_path, e))?;
    let ann: AnnFile =
        serde_json::from_str(&text).map_err(|e| DatasetError::BadAnnotations(e.to_string()))?;
    let mut images = Vec::with_capacity(ann.images.len());
    for entry in ann.images {
        if entry.boxes.len() != entry.labels.len() {
            return Err(DatasetError::BadAnnotations(format!(
                "image {} has {} boxes but {} labels",
                entry.id,
                entry.boxes.len(),
                entry.labels.len()
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        let (width, height, data) = parse_graymap(&path, &bytes)?;
        if width != entry.width || height != entry.height {
            return Err(DatasetError::BadGraymap {
                path: path.display().to_string(),
                message: format!(
                    "dims {width}x{height} disagree with annotation {}x{}",
                    entry.width, entry.height
                ),
            });
        }
        images.push(SynthImage {
            id: entry.id,
            width,
            height,
            pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
            annotations: entry
                .boxes
                .iter()
                .zip(entry.labels)
                .map(|(b, c)| (BBox::new(b[0], b[1], b[2], b[3]), c))
                .collect(),
        });
    }
    Ok(images)
}

fn parse_graymap(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let bad = |message: String| DatasetError::BadGraymap {
        path: path.display().to_string(),
        message,
    };
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String, DatasetError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(bad("not a binary graymap".into()));
    }
    let width: usize = token(bytes)?.parse().map_err(|_| bad("bad width".into()))?;
    let height: usize = token(bytes)?.parse().map_err(|_| bad("bad height".into()))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| bad("bad maxval".into()))?;
    if maxval != 255 {
        return Err(bad(format!("unsupported maxval {maxval}")));
    }
    let data_start = pos + 1;
    let expected = width * height;
    if bytes.len() < data_start + expected {
        return Err(bad(format!(
            "expected {expected} pixel bytes, found {}",
            bytes.len().saturating_sub(data_start)
        )));
    }
    Ok((
        width,
        height,
        bytes[data_start..data_start + expected].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Vec<SynthImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gen_dataset(12, 64, 2, &mut rng)
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(sample(9), sample(9));
        assert_ne!(sample(9), sample(10));
    }

    #[test]
    fn annotations_stay_inside_the_image() {
        for img in sample(11) {
            assert!(!img.annotations.is_empty());
            for (b, _) in &img.annotations {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0);
                assert!(b.x2 <= img.width as f64 && b.y2 <= img.height as f64);
                assert!(b.x1.fract() == 0.0 && b.y2.fract() == 0.0);
            }
        }
    }

    #[test]
    fn labels_match_aspect_ratios() {
        let mut squares = 0;
        let mut wides = 0;
        for img in (0..20).flat_map(|s| sample(s)) {
            for (b, class) in &img.annotations {
                assert_eq!(*class, class_of(b));
                let ratio = b.width() / b.height();
                if *class == 0 {
                    assert!((ratio - 1.0).abs() < 0.2);
                    squares += 1;
                } else {
                    assert!(ratio >= 1.2);
                    wides += 1;
                }
            }
        }
        assert!(squares > 10 && wides > 10);
    }

    #[test]
    fn objects_keep_their_distance() {
        for img in sample(13) {
            let boxes: Vec<_> = img.annotations.iter().map(|&(b, _)| b).collect();
            for i in 0..boxes.len() {
                for j in i + 1..boxes.len() {
                    let a = &boxes[i];
                    let b = &boxes[j];
                    let x_gap = (a.x1.max(b.x1) - a.x2.min(b.x2)).max(0.0).abs();
                    let sep_x = a.x2 <= b.x1 || b.x2 <= a.x1;
                    let sep_y = a.y2 <= b.y1 || b.y2 <= a.y1;
                    assert!(sep_x || sep_y, "boxes intersect: {a:?} {b:?} (gap {x_gap})");
                }
            }
        }
    }

    #[test]
    fn corners_sit_at_interior_tile_offsets() {
        for img in sample(14) {
            for (b, _) in &img.annotations {
                let rx = b.x1 as usize % 8;
                let ry = b.y1 as usize % 8;
                assert!((3..=4).contains(&rx));
                assert!((3..=4).contains(&ry));
            }
        }
    }

    #[test]
    fn object_pixels_are_bright_and_background_dark() {
        for img in sample(15) {
            let (b, class) = img.annotations[0];
            let center = img.pixel(b.cx() as usize, b.cy() as usize);
            assert!(center >= 160.0 / 255.0);
            if class == 0 {
                let notch = img.pixel(b.x1 as usize + 1, b.y1 as usize + 1);
                assert!(notch <= 60.0 / 255.0);
            }
            assert!(img.pixel(0, 0) <= 60.0 / 255.0);
            assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("detcore-ds-{}", std::process::id()));
        let images = sample(16);
        save_dataset(&dir, &images).unwrap();
        let back = load_dataset(&dir).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(images, back);
    }

    #[test]
    fn graymap_parser_rejects_truncation() {
        let dir = std::env::temp_dir().join(format!("detcore-ds-bad-{}", std::process::id()));
        let images = sample(17);
        save_dataset(&dir, &images).unwrap();
        let pgm = dir.join("img_0000.pgm");
        let mut bytes = std::fs::read(&pgm).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&pgm, bytes).unwrap();
        let err = load_dataset(&dir);
        std::fs::remove_dir_all(&dir).ok();
        assert!(matches!(err, Err(DatasetError::BadGraymap { .. })));
    }
}
