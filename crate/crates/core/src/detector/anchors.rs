//! Anchor grids, box encoding and max-IoU target assignment.

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::nn::tape::{TARGET_BACKGROUND, TARGET_IGNORE};

/// Standard deviations dividing the regression targets.
pub const DELTA_STDS: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Largest log-scale a decoded box may grow by.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Anchor edge in units of the level stride.
    pub scale: f64,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scale: 2.0,
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("anchor scale must be positive, got {}", self.scale)));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("aspect ratios must be a non-empty list of positive values"));
        }
        Ok(())
    }

    pub fn per_location(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// Anchors for an `h × w` image over the given strides, ordered by level,
    /// row, column and aspect ratio.
    pub fn generate(&self, h: usize, w: usize, strides: &[usize]) -> Vec<BBox> {
        let mut out = Vec::new();
        for &s in strides {
            let (gh, gw) = (h / s, w / s);
            let edge = self.scale * s as f64;
            for y in 0..gh {
                for x in 0..gw {
                    let (cx, cy) = ((x as f64 + 0.5) * s as f64, (y as f64 + 0.5) * s as f64);
                    for &r in &self.aspect_ratios {
                        // ratio is height / width at constant area
                        let bw = edge / r.sqrt();
                        let bh = edge * r.sqrt();
                        out.push(BBox::from_center(cx, cy, bw, bh));
                    }
                }
            }
        }
        out
    }
}

/// Regression target of `gt` relative to `anchor`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw / DELTA_STDS[0],
        (gy - ay) / ah / DELTA_STDS[1],
        (gt.width() / aw).ln() / DELTA_STDS[2],
        (gt.height() / ah).ln() / DELTA_STDS[3],
    ]
}

/// Inverse of [`encode`], with the size deltas clamped.
pub fn decode(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * DELTA_STDS[0] * aw;
    let cy = ay + d[1] * DELTA_STDS[1] * ah;
    let w = aw * (d[2] * DELTA_STDS[2]).min(MAX_LOG_SCALE).exp();
    let h = ah * (d[3] * DELTA_STDS[3]).min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

/// Per-anchor training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Class id, [`TARGET_BACKGROUND`] or [`TARGET_IGNORE`].
    pub labels: Vec<i32>,
    /// Index of the matched ground truth for positive anchors.
    pub matched: Vec<Option<usize>>,
    /// Encoded regression targets, zero for non-positive anchors.
    pub deltas: Vec<[f64; 4]>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }
}

/// Max-IoU assignment: an anchor whose best IoU is at least `pos_iou` is
/// positive for that ground truth (first index on ties), below `neg_iou` it is
/// background, otherwise ignored. Each ground truth is then forced onto its
/// best anchor, later ground truths overriding earlier ones.
pub fn assign_targets(anchors: &[BBox], gts: &[GroundTruthBox], cfg: AssignConfig) -> Assignment {
    let mut labels = vec![TARGET_BACKGROUND; anchors.len()];
    let mut matched = vec![None; anchors.len()];
    if gts.is_empty() {
        return Assignment {
            deltas: vec![[0.0; 4]; anchors.len()],
            labels,
            matched,
        };
    }
    let mut best_anchor = vec![(usize::MAX, 0.0f64); gts.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (0, -1.0);
        for (j, gt) in gts.iter().enumerate() {
            let iou = anchor.iou(&gt.bbox);
            if iou > best.1 {
                best = (j, iou);
            }
            if iou > best_anchor[j].1 {
                best_anchor[j] = (a, iou);
            }
        }
        if best.1 >= cfg.pos_iou {
            matched[a] = Some(best.0);
        } else if best.1 >= cfg.neg_iou {
            labels[a] = TARGET_IGNORE;
        }
    }
    for (j, &(a, iou)) in best_anchor.iter().enumerate() {
        if iou > 0.0 {
            matched[a] = Some(j);
        }
    }
    let mut deltas = vec![[0.0; 4]; anchors.len()];
    for (a, m) in matched.iter().enumerate() {
        if let Some(j) = *m {
            labels[a] = gts[j].class_id as i32;
            deltas[a] = encode(&anchors[a], &gts[j].bbox);
        }
    }
    Assignment {
        labels,
        matched,
        deltas,
    }
}
