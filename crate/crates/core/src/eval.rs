//! COCO-style average precision with very-tiny / tiny / small buckets.
//!
//! Matching is greedy per image and class: detections in descending score
//! order each take the unmatched ground truth of highest IoU at or above the
//! threshold. Bucket metrics reuse that matching and restrict the ground truth
//! to the bucket: a detection matched to a ground truth of another bucket is
//! ignored, an unmatched detection is a false positive in every bucket.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};
use crate::synthdata::SizeBucket;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall sample points 0.00, 0.01, ..., 1.00.
pub const RECALL_POINTS: usize = 101;

/// IoU of two validated boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Index of the matched ground truth for each detection. `dets` must be in
/// descending score order; classes must agree for a match.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thr: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class_id != d.class_id {
                    continue;
                }
                let v = d.bbox.iou(&g.bbox);
                if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let j = best?.0;
            taken[j] = true;
            Some(j)
        })
        .collect()
}

/// Buckets reported separately; `None` is the unrestricted set.
const REPORTED: [Option<SizeBucket>; 4] = [
    None,
    Some(SizeBucket::VeryTiny),
    Some(SizeBucket::Tiny),
    Some(SizeBucket::Small),
];

fn bucket_label(b: Option<SizeBucket>) -> &'static str {
    b.map_or("all", SizeBucket::label)
}

/// Interpolated precision at the 101 recall points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub bucket: String,
    pub iou: f64,
    pub precision: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_vt: Option<f64>,
    pub ap_t: Option<f64>,
    pub ap_s: Option<f64>,
    /// Unrestricted AP at each threshold of [`iou_thresholds`].
    pub ap_per_iou: Vec<Option<f64>>,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    /// IoU 0.5 curves of every bucket, averaged over classes.
    pub pr_curves: Vec<PrCurve>,
}

/// Ranked detection outcome before bucket restriction.
#[derive(Clone, Copy)]
struct Ranked {
    score: f64,
    class_id: u32,
    /// Bucket of the matched ground truth.
    matched: Option<SizeBucket>,
}

/// Precision at each recall point from `(is_tp)` flags in rank order.
fn interpolated_precision(tp: &[bool], npos: usize) -> Vec<f64> {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut ntp = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        ntp += usize::from(t);
        prec.push(ntp as f64 / (k + 1) as f64);
        rec.push(ntp as f64 / npos as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    (0..RECALL_POINTS)
        .map(|i| {
            let r = i as f64 / (RECALL_POINTS - 1) as f64;
            let k = rec.partition_point(|&x| x < r);
            prec.get(k).copied().unwrap_or(0.0)
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn bucket_of(g: &GroundTruthBox) -> SizeBucket {
    SizeBucket::of_size(g.bbox.size())
}

fn in_bucket(b: SizeBucket, filter: Option<SizeBucket>) -> bool {
    filter.map_or(true, |f| f == b)
}

/// Precision curve per class for one bucket at one threshold, or `None` per
/// class when that class has no ground truth in the bucket.
fn curves(ranked: &[Ranked], gts: &[(u32, SizeBucket)], classes: &[u32], filter: Option<SizeBucket>) -> Vec<Option<Vec<f64>>> {
    classes
        .iter()
        .map(|&c| {
            let npos = gts.iter().filter(|&&(k, b)| k == c && in_bucket(b, filter)).count();
            if npos == 0 {
                return None;
            }
            let tp: Vec<bool> = ranked
                .iter()
                .filter(|r| r.class_id == c)
                .filter_map(|r| match r.matched {
                    Some(b) if in_bucket(b, filter) => Some(true),
                    Some(_) => None,
                    None => Some(false),
                })
                .collect();
            Some(interpolated_precision(&tp, npos))
        })
        .collect()
}

/// Average precision over every image, per threshold and bucket.
pub fn compute_ap(images: &[ImageEval]) -> Result<ApReport> {
    for im in images {
        for d in &im.detections {
            d.bbox.validate()?;
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Validation(format!("score {} outside [0, 1]", d.score)));
            }
        }
        for g in &im.ground_truth {
            g.bbox.validate()?;
        }
    }
    let gts: Vec<(u32, SizeBucket)> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| (g.class_id, bucket_of(g))))
        .collect();
    let mut classes: Vec<u32> = gts.iter().map(|&(c, _)| c).collect();
    classes.sort_unstable();
    classes.dedup();

    // per image, detections in descending score with ties in input order
    let sorted: Vec<Vec<Detection>> = images
        .iter()
        .map(|im| {
            let mut d = im.detections.clone();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d
        })
        .collect();

    let thresholds = iou_thresholds();
    // ap[bucket][threshold]
    let mut table = vec![vec![None; thresholds.len()]; REPORTED.len()];
    let mut pr_curves = Vec::new();
    for (ti, &thr) in thresholds.iter().enumerate() {
        let mut ranked: Vec<Ranked> = Vec::new();
        for (im, dets) in images.iter().zip(&sorted) {
            let m = match_detections(dets, &im.ground_truth, thr);
            ranked.extend(dets.iter().zip(m).map(|(d, m)| Ranked {
                score: d.score,
                class_id: d.class_id,
                matched: m.map(|j| bucket_of(&im.ground_truth[j])),
            }));
        }
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (bi, &filter) in REPORTED.iter().enumerate() {
            let per_class: Vec<Vec<f64>> = curves(&ranked, &gts, &classes, filter).into_iter().flatten().collect();
            let aps: Vec<f64> = per_class
                .iter()
                .map(|p| p.iter().sum::<f64>() / RECALL_POINTS as f64)
                .collect();
            table[bi][ti] = mean(&aps);
            if ti == 0 && !per_class.is_empty() {
                let precision = (0..RECALL_POINTS)
                    .map(|r| per_class.iter().map(|p| p[r]).sum::<f64>() / per_class.len() as f64)
                    .collect();
                pr_curves.push(PrCurve {
                    bucket: bucket_label(filter).to_string(),
                    iou: thr,
                    precision,
                });
            }
        }
    }
    let averaged = |bi: usize| -> Option<f64> {
        let v: Option<Vec<f64>> = table[bi].iter().copied().collect();
        v.and_then(|v| mean(&v))
    };
    Ok(ApReport {
        ap: averaged(0),
        ap50: table[0][0],
        ap75: table[0][5],
        ap_vt: averaged(1),
        ap_t: averaged(2),
        ap_s: averaged(3),
        ap_per_iou: table[0].clone(),
        num_images: images.len(),
        num_ground_truth: gts.len(),
        num_detections: images.iter().map(|im| im.detections.len()).sum(),
        pr_curves,
    })
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
}

impl ApReport {
    /// Fixed-width table of the headline metrics.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("AP", self.ap),
            ("AP_0.5", self.ap50),
            ("AP_0.75", self.ap75),
            ("AP_vt", self.ap_vt),
            ("AP_t", self.ap_t),
            ("AP_s", self.ap_s),
        ];
        for (name, v) in rows {
            let _ = writeln!(s, "{name:<8} {}", fmt_ap(v));
        }
        let _ = writeln!(
            s,
            "images {}  ground truth {}  detections {}",
            self.num_images, self.num_ground_truth, self.num_detections
        );
        s
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per recall point, one column per bucket.
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("recall");
        for c in &self.pr_curves {
            let _ = write!(out, ",{}@{:.2}", c.bucket, c.iou);
        }
        out.push('\n');
        for r in 0..RECALL_POINTS {
            let _ = write!(out, "{:.2}", r as f64 / (RECALL_POINTS - 1) as f64);
            for c in &self.pr_curves {
                let _ = write!(out, ",{:.6}", c.precision[r]);
            }
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Detections of one image as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub classes: Vec<u32>,
}

impl DetectionRecord {
    pub fn new(image: impl Into<String>, dets: &[Detection]) -> Self {
        DetectionRecord {
            image: image.into(),
            boxes: dets.iter().map(|d| d.bbox.to_array()).collect(),
            scores: dets.iter().map(|d| d.score).collect(),
            classes: dets.iter().map(|d| d.class_id).collect(),
        }
    }

    pub fn detections(&self) -> Result<Vec<Detection>> {
        if self.boxes.len() != self.scores.len() || self.boxes.len() != self.classes.len() {
            return Err(Error::Validation(format!(
                "record {} has mismatched field lengths",
                self.image
            )));
        }
        self.boxes
            .iter()
            .zip(&self.scores)
            .zip(&self.classes)
            .map(|((&b, &score), &class_id)| {
                Ok(Detection {
                    bbox: BBox::from_array(b)?,
                    class_id,
                    score,
                })
            })
            .collect()
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
