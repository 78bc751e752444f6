//! Greedy per-class non-maximum suppression.

use crate::bbox::Detection;

/// Keep detections in descending score order, dropping any that overlap an
/// already kept detection of the same class by more than `iou_thr`. Ties in
/// score keep input order.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}
