//! Deterministic synthetic scenes full of tiny objects, and their on-disk
//! dataset format.
//!
//! A dataset directory holds 8-bit RGB PNG images and a `manifest.jsonl` with
//! one JSON record per image:
//!
//! ```text
//! {"image":"img_00000.png","boxes":[[x_min,y_min,x_max,y_max],...],"classes":[0,...],"overlap":false}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// RGB image, `3 × H × W`, values in `[0, 1]`.
pub type ImageTensor = Tensor<f32>;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Retries per object before non-overlapping placement is abandoned.
pub const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    Gradient,
    Noise,
    Textured,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// Inclusive `[min, max]` object count.
    pub objects_per_image: [usize; 2],
    /// Half-open `[lo, hi)` range of object sqrt-area in pixels.
    pub object_size: [f64; 2],
    pub background: Background,
    /// Minimum object/background intensity gap as a fraction of the range.
    pub contrast: f64,
    pub classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: [128, 128],
            objects_per_image: [4, 12],
            object_size: [2.0, 32.0],
            background: Background::Gradient,
            contrast: 0.3,
            classes: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        let [lo, hi] = self.object_size;
        if h == 0 || w == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        if !(lo >= 2.0 && hi > lo) {
            return Err(Error::config(format!(
                "object_size must satisfy 2 <= lo < hi, got [{lo}, {hi})"
            )));
        }
        // Widest aspect ratio stretches a side by 1.5^(1/2); keep a 1 px margin.
        if hi * ASPECT_MAX.sqrt() + 2.0 > h.min(w) as f64 {
            return Err(Error::config(format!(
                "objects up to {hi} px do not fit inside {h}x{w}"
            )));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config(format!(
                "contrast must lie in (0, 1], got {}",
                self.contrast
            )));
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return Err(Error::config("objects_per_image min exceeds max"));
        }
        if self.classes == 0 {
            return Err(Error::config("classes must be at least 1"));
        }
        Ok(())
    }
}

/// Object scale classes keyed by sqrt(box area).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBucket {
    VeryTiny,
    Tiny,
    Small,
    Other,
}

impl SizeBucket {
    pub const EVALUATED: [SizeBucket; 3] = [SizeBucket::VeryTiny, SizeBucket::Tiny, SizeBucket::Small];

    /// Bucket of a sqrt-area. Half-open boundaries at 8, 16 and 32 px; sizes
    /// below 2 px fall into the very-tiny bucket.
    pub fn of_size(size: f64) -> SizeBucket {
        if size < 8.0 {
            SizeBucket::VeryTiny
        } else if size < 16.0 {
            SizeBucket::Tiny
        } else if size < 32.0 {
            SizeBucket::Small
        } else {
            SizeBucket::Other
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeBucket::VeryTiny => "very_tiny",
            SizeBucket::Tiny => "tiny",
            SizeBucket::Small => "small",
            SizeBucket::Other => "other",
        }
    }
}

pub fn size_bucket(b: &GroundTruthBox) -> Result<SizeBucket> {
    b.bbox.validate()?;
    Ok(SizeBucket::of_size(b.bbox.size()))
}

/// One generated or loaded image with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    pub boxes: Vec<GroundTruthBox>,
    /// Whether some object had to be placed overlapping another.
    pub overlap: bool,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Rectangle,
    Cross,
}

const ASPECT_MAX: f64 = 1.5;
const SUPERSAMPLE: usize = 4;

impl Shape {
    fn covers(self, u: f64, v: f64) -> bool {
        // (u, v) in [0, 1]² relative to the bounding box
        match self {
            Shape::Rectangle => true,
            Shape::Disc => {
                let (du, dv) = (u - 0.5, v - 0.5);
                du * du + dv * dv <= 0.25
            }
            Shape::Cross => {
                let band = |t: f64| (1.0 / 3.0..=2.0 / 3.0).contains(&t);
                band(u) || band(v)
            }
        }
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

fn render_background(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [h, w] = cfg.image_size;
    let mut bg = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.2..0.8);
        let plane = &mut bg[c * h * w..(c + 1) * h * w];
        match cfg.background {
            Background::Flat => plane.fill(base),
            Background::Gradient => {
                let gx: f64 = rng.gen_range(-0.15..0.15);
                let gy: f64 = rng.gen_range(-0.15..0.15);
                for y in 0..h {
                    for x in 0..w {
                        let fy = y as f64 / h as f64 - 0.5;
                        let fx = x as f64 / w as f64 - 0.5;
                        plane[y * w + x] = base + gx * fx + gy * fy;
                    }
                }
            }
            Background::Noise => {
                let noise = Normal::new(0.0, 0.03).expect("valid std");
                for v in plane.iter_mut() {
                    *v = base + noise.sample(rng);
                }
            }
            Background::Textured => {
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(0.02..0.12),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                            rng.gen_range(0.02..0.05),
                        )
                    })
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let mut v = base;
                        for &(freq, dir, phase, amp) in &waves {
                            let t = (x as f64 * dir.cos() + y as f64 * dir.sin()) * freq;
                            v += amp * (t * std::f64::consts::TAU + phase).sin();
                        }
                        plane[y * w + x] = v;
                    }
                }
            }
        }
        for v in plane.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    bg
}

fn sample_box(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let [h, w] = cfg.image_size;
    let [lo, hi] = cfg.object_size;
    for _ in 0..PLACEMENT_RETRIES {
        let s: f64 = rng.gen_range(lo..hi);
        let aspect: f64 = rng.gen_range(1.0 / ASPECT_MAX..ASPECT_MAX);
        let bw = s * aspect.sqrt();
        let bh = s / aspect.sqrt();
        // strictly inside: at least one pixel of margin on every side
        if bw + 2.0 > w as f64 || bh + 2.0 > h as f64 {
            continue;
        }
        let x0: f64 = rng.gen_range(1.0..=(w as f64 - 1.0 - bw));
        let y0: f64 = rng.gen_range(1.0..=(h as f64 - 1.0 - bh));
        let b = BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + bw,
            y_max: y0 + bh,
        };
        let size = b.size();
        if b.validate().is_ok() && size >= lo && size < hi && b.x_max < w as f64 && b.y_max < h as f64 {
            return Some(b);
        }
    }
    None
}

/// Render one scene. A pure function of `(cfg, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let [h, w] = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = render_background(cfg, &mut rng);
    let count = rng.gen_range(cfg.objects_per_image[0]..=cfg.objects_per_image[1]);
    let min_area = cfg.object_size[0] * cfg.object_size[0];
    if count as f64 * min_area > ((h - 2) * (w - 2)) as f64 {
        return Err(Error::Placement {
            index: 0,
            retries: PLACEMENT_RETRIES,
        });
    }

    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(count);
    let mut overlap = false;
    for index in 0..count {
        let mut placed = None;
        let mut last = None;
        for _ in 0..PLACEMENT_RETRIES {
            let Some(b) = sample_box(cfg, &mut rng) else { continue };
            last = Some(b);
            // one pixel of clearance keeps neighbouring objects separable
            let grown = BBox::from_center(b.center().0, b.center().1, b.width() + 2.0, b.height() + 2.0);
            if boxes.iter().all(|g| !g.bbox.intersects(&grown)) {
                placed = Some(b);
                break;
            }
        }
        let bbox = match (placed, last) {
            (Some(b), _) => b,
            (None, Some(b)) => {
                overlap = true;
                b
            }
            (None, None) => {
                return Err(Error::Placement {
                    index,
                    retries: PLACEMENT_RETRIES,
                })
            }
        };
        let class_id = rng.gen_range(0..cfg.classes) as u32;
        let shape = if cfg.classes > 1 {
            [Shape::Disc, Shape::Rectangle, Shape::Cross][class_id as usize % 3]
        } else {
            [Shape::Disc, Shape::Rectangle, Shape::Cross][rng.gen_range(0..3)]
        };
        let brighter: bool = rng.gen();
        draw_object(&mut img, cfg, &bbox, shape, brighter);
        boxes.push(GroundTruthBox { bbox, class_id });
    }

    let data = img.into_iter().map(quantize).collect();
    Ok(Scene {
        image: Tensor::from_vec(&[3, h, w], data)?,
        boxes,
        overlap,
    })
}

fn draw_object(img: &mut [f64], cfg: &SceneConfig, b: &BBox, shape: Shape, prefer_brighter: bool) {
    let [h, w] = cfg.image_size;
    let x0 = b.x_min.floor() as usize;
    let y0 = b.y_min.floor() as usize;
    let x1 = (b.x_max.ceil() as usize).min(w);
    let y1 = (b.y_max.ceil() as usize).min(h);
    for c in 0..3 {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y1 {
            for x in x0..x1 {
                lo = lo.min(plane[y * w + x]);
                hi = hi.max(plane[y * w + x]);
            }
        }
        let up_ok = hi + cfg.contrast <= 1.0;
        let down_ok = lo - cfg.contrast >= 0.0;
        let brighter = match (up_ok, down_ok) {
            (true, true) => prefer_brighter,
            (true, false) => true,
            (false, true) => false,
            (false, false) => 1.0 - hi >= lo,
        };
        let value = if brighter {
            (hi + cfg.contrast).min(1.0)
        } else {
            (lo - cfg.contrast).max(0.0)
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        if px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max {
                            continue;
                        }
                        let u = (px - b.x_min) / b.width();
                        let v = (py - b.y_min) / b.height();
                        if shape.covers(u, v) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let p = &mut plane[y * w + x];
                    *p = (1.0 - cov) * *p + cov * value;
                }
            }
        }
    }
}

/// Generate `count` scenes with per-image seeds `seed + index`.
pub fn generate_scenes(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    par::map_range(count, |i| generate_scene(cfg, seed.wrapping_add(i as u64)))
        .into_iter()
        .collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<u32>,
    #[serde(default)]
    pub overlap: bool,
}

impl ManifestRecord {
    pub fn ground_truth(&self) -> Result<Vec<GroundTruthBox>> {
        if self.boxes.len() != self.classes.len() {
            return Err(Error::Validation(format!(
                "{}: {} boxes but {} classes",
                self.image,
                self.boxes.len(),
                self.classes.len()
            )));
        }
        self.boxes
            .iter()
            .zip(&self.classes)
            .map(|(&b, &class_id)| {
                Ok(GroundTruthBox {
                    bbox: BBox::from_array(b)?,
                    class_id,
                })
            })
            .collect()
    }
}

pub fn image_to_rgb8(img: &ImageTensor) -> image::RgbImage {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (img.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn rgb8_to_image(rgb: &image::RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, p) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = f32::from(p.0[c]) / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image shape")
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(rgb8_to_image(&img.to_rgb8()))
}

pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    image_to_rgb8(img)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Write `count` scenes as PNG files plus a manifest under `out_dir`.
pub fn write_dataset(cfg: &SceneConfig, count: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let scenes = generate_scenes(cfg, count, seed)?;
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        save_image(&scene.image, &out_dir.join(&name))?;
        let record = ManifestRecord {
            image: name,
            boxes: scene.boxes.iter().map(|b| b.bbox.to_array()).collect(),
            classes: scene.boxes.iter().map(|b| b.class_id).collect(),
            overlap: scene.overlap,
        };
        let line = serde_json::to_string(&record).expect("manifest record serializes");
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// Resolve a dataset argument: either a directory holding a manifest or the
/// manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let path = manifest_path(path);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.clone(),
            message: format!("line {}: {e}", lineno + 1),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Load every image of a dataset directory (or manifest) into memory.
pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    read_manifest(&manifest)?
        .into_iter()
        .map(|rec| {
            Ok(Scene {
                image: load_image(&root.join(&rec.image))?,
                boxes: rec.ground_truth()?,
                overlap: rec.overlap,
            })
        })
        .collect()
}
