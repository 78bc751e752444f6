//! PNG export of the intermediate maps of one image.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::bbox::Detection;
use crate::detector::{Inspection, Mode, SrTod};
use crate::diffmap::{highfreq_diff, pixel_diff};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::synthdata::{image_to_rgb8, ImageTensor};
use crate::tensor::Tensor;

/// File name suffixes, in the order the files are written.
pub const SUFFIXES: [&str; 6] = [
    "_original",
    "_recon",
    "_diff_pixel",
    "_diff_hf",
    "_binary_overlay",
    "_detections",
];

/// Black → red → yellow → white ramp for `v ∈ [0, 1]`.
fn heat(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0) * 3.0;
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(v), c(v - 1.0), c(v - 2.0)])
}

/// Heat map of a `1 × H × W` map scaled by its maximum.
pub fn heatmap(map: &Tensor<f32>) -> RgbImage {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let max = map.max().max(f32::MIN_POSITIVE);
    RgbImage::from_fn(w as u32, h as u32, |x, y| heat(map.data()[y as usize * w + x as usize] / max))
}

/// Tint pixels where `mask` is set.
pub fn overlay(base: &RgbImage, mask: &[bool], tint: Rgb<u8>) -> RgbImage {
    let mut out = base.clone();
    let w = base.width() as usize;
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask[y as usize * w + x as usize] {
            for k in 0..3 {
                p[k] = ((u16::from(p[k]) + u16::from(tint[k])) / 2) as u8;
            }
        }
    }
    out
}

/// One-pixel rectangle outlines.
pub fn draw_boxes(base: &RgbImage, dets: &[Detection], color: Rgb<u8>) -> RgbImage {
    let mut out = base.clone();
    let (w, h) = (out.width() as i64, out.height() as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.put_pixel(x as u32, y as u32, color);
        }
    };
    for d in dets {
        let b = d.bbox;
        let (x0, y0) = (b.x_min.floor() as i64, b.y_min.floor() as i64);
        let (x1, y1) = ((b.x_max.ceil() as i64 - 1).max(x0), (b.y_max.ceil() as i64 - 1).max(y0));
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }
    out
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Write the six visualization files for `image` into `out_dir`, named
/// `<stem><suffix>.png`, and return their paths.
pub fn export(
    model: &SrTod,
    store: &ParamStore<f32>,
    image: &ImageTensor,
    stem: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ins: Inspection = model
        .inspect(store, &[image], Mode::Srtod)?
        .pop()
        .expect("one image in, one out");
    let recon = ins.recon.clone().expect("srtod inspection reconstructs");
    let original = image_to_rgb8(image);
    let pixel = pixel_diff(&recon, image)?;
    let hf = highfreq_diff(&recon, image, &model.config().diffmap.highpass())?;
    let configured = ins.diff.clone().expect("srtod inspection has a difference map");
    let mask: Vec<bool> = match model.dgfe().threshold_value(store) {
        Some(t) => configured.data().iter().map(|&v| f64::from(v) > t).collect(),
        None => {
            let mean = configured.sum() / configured.len() as f32;
            configured.data().iter().map(|&v| v > mean).collect()
        }
    };
    let images = [
        original.clone(),
        image_to_rgb8(&recon),
        heatmap(&pixel.data),
        heatmap(&hf.data),
        overlay(&original, &mask, Rgb([255, 0, 0])),
        draw_boxes(&original, &ins.detections, Rgb([0, 255, 0])),
    ];
    let mut paths = Vec::with_capacity(SUFFIXES.len());
    for (img, suffix) in images.iter().zip(SUFFIXES) {
        let p = out_dir.join(format!("{stem}{suffix}.png"));
        save(img, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat(0.0), Rgb([0, 0, 0]));
        assert_eq!(heat(1.0), Rgb([255, 255, 255]));
        assert_eq!(heat(1.0 / 3.0), Rgb([255, 0, 0]));
    }

    #[test]
    fn boxes_are_outlined() {
        let base = RgbImage::new(8, 8);
        let d = Detection {
            bbox: crate::bbox::BBox::new(1.0, 1.0, 4.0, 4.0).unwrap(),
            class_id: 0,
            score: 0.9,
        };
        let out = draw_boxes(&base, &[d], Rgb([0, 255, 0]));
        assert_eq!(*out.get_pixel(1, 1), Rgb([0, 255, 0]));
        assert_eq!(*out.get_pixel(3, 2), Rgb([0, 255, 0]));
        assert_eq!(*out.get_pixel(2, 2), Rgb([0, 0, 0]));
    }
}
