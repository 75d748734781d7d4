//! Deterministic synthetic trap scenes: moth-like blobs (rotated ellipse body
//! plus two wing lobes) on a textured board, with tight box annotations,
//! photometric/geometric augmentation, and PNG + JSON dataset I/O.

use crate::error::{Error, Result};
use crate::targets::BoxAnnotation;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One image with its ground truth. Pixel data is `[3, H, W]` in [0,1].
#[derive(Debug, Clone)]
pub struct AnnotatedScene {
    pub image: Array3<f32>,
    pub boxes: Vec<BoxAnnotation>,
    pub scene_id: String,
    pub seed: u64,
}

impl AnnotatedScene {
    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }
    pub fn count(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub count_range: (usize, usize),
    /// Blob body length range in pixels.
    pub blob_scale_range: (f64, f64),
    /// Orientation range in degrees.
    pub rotation_range: (f64, f64),
    /// Maximum allowed box IoU between any pair of placed blobs.
    pub occlusion_target: f64,
    pub background_texture_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 128,
            count_range: (1, 40),
            blob_scale_range: (10.0, 18.0),
            rotation_range: (0.0, 360.0),
            occlusion_target: 0.3,
            background_texture_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::config("image_size must be >= 64"));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(Error::config("count_range min > max"));
        }
        if self.blob_scale_range.0 > self.blob_scale_range.1 || self.blob_scale_range.0 <= 0.0 {
            return Err(Error::config("invalid blob_scale_range"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_target) {
            return Err(Error::config("occlusion_target outside [0,1]"));
        }
        Ok(())
    }
}

/// Boolean foreground mask of one rendered blob (for bounding-box oracles).
#[derive(Debug, Clone)]
pub struct BlobMask {
    pub pixels: Vec<(usize, usize)>,
}

impl BlobMask {
    pub fn bbox(&self) -> Option<BoxAnnotation> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        if self.pixels.is_empty() {
            return None;
        }
        Some(BoxAnnotation::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0 + 1) as f64,
            (y1 - y0 + 1) as f64,
        ))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Hash-based lattice noise in [0,1], bilinearly interpolated.
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let x0 = gx.floor() as i64;
    let y0 = gy.floor() as i64;
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let corner = |ix: i64, iy: i64| -> f64 {
        let h = splitmix64(seed ^ (ix as u64).wrapping_mul(0x8DA6B343) ^ (iy as u64).wrapping_mul(0xD8163841));
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let top = corner(x0, y0) * (1.0 - sx) + corner(x0 + 1, y0) * sx;
    let bot = corner(x0, y0 + 1) * (1.0 - sx) + corner(x0 + 1, y0 + 1) * sx;
    top * (1.0 - sy) + bot * sy
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Ellipse { cx, cy, a, b, cos_t: theta.cos(), sin_t: theta.sin() }
    }

    /// Normalized radius: < 1 inside, soft edge handled by the caller.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

struct Blob {
    parts: Vec<Ellipse>,
    color: [f64; 3],
    extent: f64,
    cx: f64,
    cy: f64,
    speckle_seed: u64,
}

impl Blob {
    /// Body ellipse plus two wing lobes folded by `fold` radians.
    fn moth(cx: f64, cy: f64, len: f64, theta: f64, fold: f64, color: [f64; 3], speckle_seed: u64) -> Self {
        let body = Ellipse::new(cx, cy, len * 0.5, len * 0.18, theta);
        let side = |sign: f64| {
            let wing_theta = theta + sign * fold;
            // Wings hinge slightly ahead of the body center.
            let hx = cx + 0.1 * len * theta.cos();
            let hy = cy + 0.1 * len * theta.sin();
            let wx = hx + 0.22 * len * (-wing_theta.sin()) * sign;
            let wy = hy + 0.22 * len * wing_theta.cos() * sign;
            Ellipse::new(wx, wy, len * 0.42, len * 0.17, wing_theta)
        };
        Blob {
            parts: vec![body, side(1.0), side(-1.0)],
            color,
            extent: len * 0.95,
            cx,
            cy,
            speckle_seed,
        }
    }

    fn alpha(&self, x: f64, y: f64) -> f64 {
        let mut best = 0.0f64;
        for e in &self.parts {
            let rho = e.rho(x, y);
            // Soft edge between rho 0.92 and 1.0.
            let a = if rho <= 0.92 {
                1.0
            } else if rho >= 1.0 {
                0.0
            } else {
                (1.0 - rho) / 0.08
            };
            best = best.max(a);
        }
        best
    }

    /// Pixels with alpha >= 0.5 define the annotated foreground mask.
    fn rasterize(&self, w: usize, h: usize) -> (BlobMask, Vec<(usize, usize, f64)>) {
        let x0 = ((self.cx - self.extent).floor().max(0.0)) as usize;
        let y0 = ((self.cy - self.extent).floor().max(0.0)) as usize;
        let x1 = ((self.cx + self.extent).ceil().min(w as f64 - 1.0)) as usize;
        let y1 = ((self.cy + self.extent).ceil().min(h as f64 - 1.0)) as usize;
        let mut mask = Vec::new();
        let mut coverage = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let a = self.alpha(x as f64, y as f64);
                if a > 0.0 {
                    coverage.push((x, y, a));
                    if a >= 0.5 {
                        mask.push((x, y));
                    }
                }
            }
        }
        (BlobMask { pixels: mask }, coverage)
    }
}

/// Deterministic scene synthesis; see `generate_scene_with_masks` for the
/// variant exposing per-blob masks (used by bounding-box oracles).
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<AnnotatedScene> {
    generate_scene_with_masks(config, seed).map(|(s, _)| s)
}

pub fn generate_scene_with_masks(
    config: &SceneConfig,
    seed: u64,
) -> Result<(AnnotatedScene, Vec<BlobMask>)> {
    config.validate()?;
    let n = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Light board with low-frequency texture and fine grain.
    let tex_seed = config.background_texture_seed;
    let mut image = Array3::<f32>::zeros((3, n, n));
    for y in 0..n {
        for x in 0..n {
            let coarse = value_noise(x as f64, y as f64, 23.0, tex_seed);
            let fine = value_noise(x as f64, y as f64, 4.0, tex_seed ^ 0xABCD);
            let base = 0.80 + 0.10 * coarse + 0.04 * (fine - 0.5);
            image[[0, y, x]] = (base + 0.012) as f32;
            image[[1, y, x]] = base as f32;
            image[[2, y, x]] = (base - 0.015) as f32;
        }
    }

    let count = if config.count_range.0 == config.count_range.1 {
        config.count_range.0
    } else {
        rng.random_range(config.count_range.0..=config.count_range.1)
    };

    let mut boxes: Vec<BoxAnnotation> = Vec::with_capacity(count);
    let mut masks: Vec<BlobMask> = Vec::with_capacity(count);
    const MAX_TRIES: usize = 300;

    for i in 0..count {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let len = rng.random_range(config.blob_scale_range.0..=config.blob_scale_range.1);
            let margin = len;
            if 2.0 * margin >= n as f64 {
                return Err(Error::config("blob scale too large for image"));
            }
            let cx = rng.random_range(margin..n as f64 - margin);
            let cy = rng.random_range(margin..n as f64 - margin);
            let theta = rng
                .random_range(config.rotation_range.0..=config.rotation_range.1.max(config.rotation_range.0 + 1e-9))
                .to_radians();
            let fold = rng.random_range(0.35..1.15);
            // Instances share color statistics: a common brown base with a
            // small per-blob tint.
            let tint = rng.random_range(-0.05..0.05);
            let color = [0.33 + tint, 0.285 + tint * 0.8, 0.24 + tint * 0.6];
            let speckle = rng.random();
            let blob = Blob::moth(cx, cy, len, theta, fold, color, speckle);
            let (mask, coverage) = blob.rasterize(n, n);
            let Some(bbox) = mask.bbox() else { continue };

            if boxes.iter().any(|b| b.iou(&bbox) > config.occlusion_target) {
                continue;
            }

            for (x, y, a) in coverage {
                let grain =
                    0.10 * (value_noise(x as f64 * 1.7, y as f64 * 1.7, 2.3, blob.speckle_seed) - 0.5);
                for (ch, base) in blob.color.iter().enumerate() {
                    let fg = (base + grain).clamp(0.0, 1.0) as f32;
                    let bg = image[[ch, y, x]];
                    image[[ch, y, x]] = bg + (fg - bg) * a as f32;
                }
            }
            boxes.push(bbox);
            masks.push(mask);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement { requested: count, achieved: i });
        }
    }

    let scene = AnnotatedScene {
        image,
        boxes,
        scene_id: format!("scene_{seed:016x}"),
        seed,
    };
    Ok((scene, masks))
}

/// Derive the per-scene seed for index `i` of a dataset keyed by `master`.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    splitmix64(master ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// Generate `num` scenes with ids `scene_00000..`, seeded from `master`.
pub fn generate_dataset(config: &SceneConfig, num: usize, master: u64) -> Result<Vec<AnnotatedScene>> {
    (0..num)
        .map(|i| {
            let mut s = generate_scene(config, scene_seed(master, i))?;
            s.scene_id = format!("scene_{i:05}");
            Ok(s)
        })
        .collect()
}

/// Deterministic shuffled split into (train, test) index lists.
pub fn split_indices(n: usize, train_ratio: f64, master: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master ^ 0x5157));
    // Fisher-Yates with integer draws only.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let cut = ((n as f64) * train_ratio).round() as usize;
    let train = idx[..cut.min(n)].to_vec();
    let test = idx[cut.min(n)..].to_vec();
    (train, test)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    HFlip,
    Contrast(f32),
    Brightness(f32),
    Saturation(f32),
}

impl AugmentOp {
    /// Parse `hflip`, `contrast(1.2)`, `brightness(-0.1)`, `saturation(0.8)`.
    pub fn parse(s: &str) -> Result<AugmentOp> {
        let s = s.trim();
        if s == "hflip" {
            return Ok(AugmentOp::HFlip);
        }
        for (name, ctor) in [
            ("contrast", AugmentOp::Contrast as fn(f32) -> AugmentOp),
            ("brightness", AugmentOp::Brightness),
            ("saturation", AugmentOp::Saturation),
        ] {
            if let Some(rest) = s.strip_prefix(name) {
                let inner = rest
                    .strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config(format!("malformed augment op '{s}'")))?;
                let v: f32 = inner
                    .parse()
                    .map_err(|_| Error::config(format!("bad parameter in augment op '{s}'")))?;
                return Ok(ctor(v));
            }
        }
        Err(Error::config(format!("unknown augment op '{s}'")))
    }
}

/// Apply augmentation ops in order. Geometry only changes under `HFlip`
/// (x_min -> W - x_min - width); photometric ops clip back into [0,1].
pub fn augment(scene: &AnnotatedScene, ops: &[AugmentOp]) -> AnnotatedScene {
    let mut image = scene.image.clone();
    let mut boxes = scene.boxes.clone();
    let (h, w) = (scene.height(), scene.width());
    for op in ops {
        match op {
            AugmentOp::HFlip => {
                for c in 0..3 {
                    for y in 0..h {
                        for x in 0..w / 2 {
                            let tmp = image[[c, y, x]];
                            image[[c, y, x]] = image[[c, y, w - 1 - x]];
                            image[[c, y, w - 1 - x]] = tmp;
                        }
                    }
                }
                for b in &mut boxes {
                    b.x_min = w as f64 - b.x_min - b.width;
                }
            }
            AugmentOp::Contrast(f) => {
                image.mapv_inplace(|v| (0.5 + f * (v - 0.5)).clamp(0.0, 1.0));
            }
            AugmentOp::Brightness(b) => {
                image.mapv_inplace(|v| (v + b).clamp(0.0, 1.0));
            }
            AugmentOp::Saturation(s) => {
                for y in 0..h {
                    for x in 0..w {
                        let (r, g, b) =
                            (image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
                        let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                        image[[0, y, x]] = (luma + s * (r - luma)).clamp(0.0, 1.0);
                        image[[1, y, x]] = (luma + s * (g - luma)).clamp(0.0, 1.0);
                        image[[2, y, x]] = (luma + s * (b - luma)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    AnnotatedScene { image, boxes, scene_id: scene.scene_id.clone(), seed: scene.seed }
}

// ---------------------------------------------------------------------------
// Dataset I/O: 8-bit RGB PNGs plus one annotations.json per directory.

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: usize,
    file: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: usize,
    bbox: [f64; 4],
    class_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
}

pub fn save_dataset(scenes: &[AnnotatedScene], dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(images_dir.display().to_string(), e))?;
    let mut file = DatasetFile { images: Vec::new(), annotations: Vec::new() };
    for (id, scene) in scenes.iter().enumerate() {
        let (h, w) = (scene.height(), scene.width());
        let rel = format!("images/{}.png", scene.scene_id);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (scene.image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (scene.image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (scene.image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.join(&rel);
        img.save(&path).map_err(|e| Error::Image {
            path: path.display().to_string(),
            context: e.to_string(),
        })?;
        file.images.push(ImageRecord { id, file: rel, width: w, height: h });
        for b in &scene.boxes {
            file.annotations.push(AnnotationRecord {
                image_id: id,
                bbox: [b.x_min, b.y_min, b.width, b.height],
                class_id: b.class_id,
            });
        }
    }
    let json_path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&file).expect("dataset serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(json_path.display().to_string(), e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<AnnotatedScene>> {
    let json_path = dir.join("annotations.json");
    let raw = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let file: DatasetFile =
        serde_json::from_str(&raw).map_err(|e| Error::json(json_path.display().to_string(), e))?;

    let mut scenes = Vec::with_capacity(file.images.len());
    let mut by_id = std::collections::HashMap::new();
    for (idx, rec) in file.images.iter().enumerate() {
        let path = dir.join(&rec.file);
        let img = image::open(&path)
            .map_err(|e| Error::load(format!("record {idx} ({}): {e}", rec.file)))?
            .into_rgb8();
        if (img.width() as usize, img.height() as usize) != (rec.width, rec.height) {
            return Err(Error::load(format!(
                "record {idx} ({}): file is {}x{}, json says {}x{}",
                rec.file,
                img.width(),
                img.height(),
                rec.width,
                rec.height
            )));
        }
        let mut data = Array3::<f32>::zeros((3, rec.height, rec.width));
        for (x, y, px) in img.enumerate_pixels() {
            data[[0, y as usize, x as usize]] = px.0[0] as f32 / 255.0;
            data[[1, y as usize, x as usize]] = px.0[1] as f32 / 255.0;
            data[[2, y as usize, x as usize]] = px.0[2] as f32 / 255.0;
        }
        let stem = Path::new(&rec.file)
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| format!("scene_{idx}"));
        by_id.insert(rec.id, scenes.len());
        scenes.push(AnnotatedScene { image: data, boxes: Vec::new(), scene_id: stem, seed: 0 });
    }
    for (idx, ann) in file.annotations.iter().enumerate() {
        let Some(&si) = by_id.get(&ann.image_id) else {
            return Err(Error::load(format!(
                "annotation {idx}: unknown image_id {}",
                ann.image_id
            )));
        };
        let b = BoxAnnotation {
            x_min: ann.bbox[0],
            y_min: ann.bbox[1],
            width: ann.bbox[2],
            height: ann.bbox[3],
            class_id: ann.class_id,
        };
        let scene = &mut scenes[si];
        b.validate(scene.width(), scene.height())
            .map_err(|e| Error::load(format!("annotation {idx}: {e}")))?;
        scene.boxes.push(b);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SceneConfig {
        SceneConfig { image_size: 96, count_range: (5, 12), ..Default::default() }
    }

    #[test]
    fn empty_count_range_gives_background_only() {
        let cfg = SceneConfig { count_range: (0, 0), ..small_config() };
        let s = generate_scene(&cfg, 1).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generation_is_bit_identical_for_same_seed() {
        let cfg = small_config();
        let a = generate_scene(&cfg, 42).unwrap();
        let b = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
        let c = generate_scene(&cfg, 43).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn requested_count_is_met() {
        let cfg = small_config();
        for seed in 0..5 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert!((5..=12).contains(&s.count()));
        }
        let exact = SceneConfig { count_range: (9, 9), ..small_config() };
        assert_eq!(generate_scene(&exact, 3).unwrap().count(), 9);
    }

    #[test]
    fn boxes_exactly_bound_rendered_masks() {
        let cfg = small_config();
        let (scene, masks) = generate_scene_with_masks(&cfg, 11).unwrap();
        assert_eq!(scene.boxes.len(), masks.len());
        for (b, m) in scene.boxes.iter().zip(&masks) {
            let from_mask = m.bbox().unwrap();
            assert_eq!(*b, from_mask);
            // And inside the image.
            b.validate(scene.width(), scene.height()).unwrap();
        }
    }

    #[test]
    fn crowded_scene_has_overlap_but_respects_occlusion_cap() {
        let cfg = SceneConfig {
            image_size: 128,
            count_range: (50, 50),
            occlusion_target: 0.3,
            ..Default::default()
        };
        let s = generate_scene(&cfg, 7).unwrap();
        assert_eq!(s.count(), 50);
        // Pairwise IoU scan oracle.
        let mut overlapping = 0;
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..s.boxes.len() {
            for j in i + 1..s.boxes.len() {
                let iou = s.boxes[i].iou(&s.boxes[j]);
                assert!(iou <= 0.3 + 1e-9, "pair ({i},{j}) IoU {iou}");
                if iou > 0.0 {
                    overlapping += 1;
                }
                total += iou;
                pairs += 1;
            }
        }
        assert!(overlapping >= 1, "expected at least one overlapping pair");
        assert!(total / pairs as f64 <= 0.3);
    }

    #[test]
    fn impossible_placement_reports_achieved_count() {
        let cfg = SceneConfig {
            image_size: 64,
            count_range: (500, 500),
            occlusion_target: 0.0,
            blob_scale_range: (14.0, 16.0),
            ..Default::default()
        };
        match generate_scene(&cfg, 1) {
            Err(Error::Placement { requested, achieved }) => {
                assert_eq!(requested, 500);
                assert!(achieved < 500);
            }
            other => panic!("expected placement failure, got {other:?}"),
        }
    }

    #[test]
    fn hflip_moves_boxes_and_is_an_involution() {
        let cfg = small_config();
        let s = generate_scene(&cfg, 5).unwrap();
        let flipped = augment(&s, &[AugmentOp::HFlip]);
        // Hand geometry: x=10, w=20 on a 128-wide image -> 98.
        let mut probe = s.clone();
        probe.boxes = vec![BoxAnnotation::new(10.0, 4.0, 20.0, 8.0)];
        let mut wide = Array3::<f32>::zeros((3, 128, 128));
        wide.fill(0.5);
        probe.image = wide;
        let pf = augment(&probe, &[AugmentOp::HFlip]);
        assert_eq!(pf.boxes[0].x_min, 98.0);

        let back = augment(&flipped, &[AugmentOp::HFlip]);
        assert_eq!(back.image, s.image);
        assert_eq!(back.boxes, s.boxes);
    }

    #[test]
    fn identity_photometric_parameters_leave_image_unchanged() {
        let s = generate_scene(&small_config(), 9).unwrap();
        let out = augment(
            &s,
            &[
                AugmentOp::Contrast(1.0),
                AugmentOp::Brightness(0.0),
                AugmentOp::Saturation(1.0),
            ],
        );
        assert_eq!(out.image, s.image);
        assert_eq!(out.boxes, s.boxes);
    }

    #[test]
    fn augment_op_parsing() {
        assert_eq!(AugmentOp::parse("hflip").unwrap(), AugmentOp::HFlip);
        assert_eq!(AugmentOp::parse("contrast(1.25)").unwrap(), AugmentOp::Contrast(1.25));
        assert_eq!(AugmentOp::parse("brightness(-0.1)").unwrap(), AugmentOp::Brightness(-0.1));
        assert!(AugmentOp::parse("sharpen(2)").is_err());
        assert!(AugmentOp::parse("contrast(oops)").is_err());
    }

    #[test]
    fn dataset_roundtrip_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        save_dataset(&scenes, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.width(), b.width());
            // Images round-trip at 8-bit precision.
            for (va, vb) in a.image.iter().zip(b.image.iter()) {
                assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&[], dir.path()).unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_records_are_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = vec![generate_scene(&small_config(), 0).unwrap()];
        save_dataset(&scenes, dir.path()).unwrap();
        // Negative width.
        let json_path = dir.path().join("annotations.json");
        let mut file: super::DatasetFile =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        file.annotations[0].bbox[2] = -5.0;
        std::fs::write(&json_path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("annotation 0"), "{err}");

        // Box outside the recorded image size.
        file.annotations[0].bbox = [90.0, 90.0, 20.0, 20.0];
        std::fs::write(&json_path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        // Missing image file.
        file.annotations[0].bbox = [1.0, 1.0, 5.0, 5.0];
        file.images[0].file = "images/nope.png".into();
        std::fs::write(&json_path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn split_is_deterministic_and_ratioed() {
        let (tr, te) = split_indices(100, 0.7, 99);
        let (tr2, te2) = split_indices(100, 0.7, 99);
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        assert_eq!(tr.len(), 70);
        assert_eq!(te.len(), 30);
        let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
