//! Brute-force reference implementations, written from the definitions and
//! sharing no code with the library beyond its plain data types.

use std::f64::consts::PI;

use srtod::bbox::{BBox, Detection, GroundTruthBox};
use srtod::eval::ImageEval;

/// `D[y, x] = (Σ_c |a − b|) / C` for `C × H × W` slices.
pub fn pixel_diff(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for ch in 0..c {
                let i = (ch * h + y) * w + x;
                s += (a[i] - b[i]).abs();
            }
            out[y * w + x] = s / c as f64;
        }
    }
    out
}

/// Ideal radial high-pass by direct DFT: bins of the centred spectrum within
/// `rho` half-diagonals of the centre are dropped.
pub fn highpass(img: &[f64], c: usize, h: usize, w: usize, rho: f64) -> Vec<f64> {
    let half_diag = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    // fftshift moves bin k to (k + n/2) mod n, centre at n/2
    let centred = |k: usize, n: usize| ((k + n / 2) % n) as f64 - (n / 2) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        let mut spec = vec![(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let a = -2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        re += plane[y * w + x] * a.cos();
                        im += plane[y * w + x] * a.sin();
                    }
                }
                let (fy, fx) = (centred(ky, h), centred(kx, w));
                let keep = (fy * fy + fx * fx).sqrt() / half_diag > rho;
                spec[ky * w + kx] = if keep { (re, im) } else { (0.0, 0.0) };
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut re = 0.0;
                for ky in 0..h {
                    for kx in 0..w {
                        let a = 2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                        let (sr, si) = spec[ky * w + kx];
                        re += sr * a.cos() - si * a.sin();
                    }
                }
                out[(ch * h + y) * w + x] = re / (h * w) as f64;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel weights of one `C × H × W` map through `C → C/r → C` with ReLU.
/// `w1` is `hidden × C`, `w2` is `C × hidden`.
pub fn reweight(feat: &[f64], c: usize, hw: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let hidden = b1.len();
    let mlp = |v: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; hidden];
        for j in 0..hidden {
            let mut s = b1[j];
            for i in 0..c {
                s += w1[j * c + i] * v[i];
            }
            h[j] = s.max(0.0);
        }
        let mut o = vec![0.0; c];
        for i in 0..c {
            let mut s = b2[i];
            for j in 0..hidden {
                s += w2[i * hidden + j] * h[j];
            }
            o[i] = s;
        }
        o
    };
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for ch in 0..c {
        for k in 0..hw {
            let v = feat[ch * hw + k];
            avg[ch] += v;
            max[ch] = max[ch].max(v);
        }
        avg[ch] /= hw as f64;
    }
    let (a, m) = (mlp(&avg), mlp(&max));
    (0..c).map(|i| sigmoid(a[i] + m[i])).collect()
}

/// `1 + max over each factor × factor window of [d > t]`.
pub fn filtration(d: &[f64], h: usize, w: usize, t: f64, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![1.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    if d[y * w + x] > t {
                        out[oy * ow + ox] = 2.0;
                    }
                }
            }
        }
    }
    out
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Labels (`-1` background, `-2` ignored, else class), matched indices and
/// regression targets under max-IoU assignment with forced best-anchor matches.
pub struct OracleAssignment {
    pub labels: Vec<i32>,
    pub matched: Vec<Option<usize>>,
    pub deltas: Vec<[f64; 4]>,
}

pub fn assign(anchors: &[BBox], gts: &[GroundTruthBox], pos: f64, neg: f64) -> OracleAssignment {
    let table: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, &g.bbox)).collect())
        .collect();
    let mut matched = vec![None; anchors.len()];
    let mut labels = vec![-1; anchors.len()];
    for a in 0..anchors.len() {
        if gts.is_empty() {
            continue;
        }
        // first maximal gt
        let mut j_best = 0;
        for j in 1..gts.len() {
            if table[a][j] > table[a][j_best] {
                j_best = j;
            }
        }
        let best = table[a][j_best];
        if best >= pos {
            matched[a] = Some(j_best);
        } else if best >= neg {
            labels[a] = -2;
        }
    }
    for j in 0..gts.len() {
        let mut a_best = 0;
        for a in 1..anchors.len() {
            if table[a][j] > table[a_best][j] {
                a_best = a;
            }
        }
        if !anchors.is_empty() && table[a_best][j] > 0.0 {
            matched[a_best] = Some(j);
        }
    }
    let mut deltas = vec![[0.0; 4]; anchors.len()];
    for a in 0..anchors.len() {
        if let Some(j) = matched[a] {
            labels[a] = gts[j].class_id as i32;
            let (an, g) = (&anchors[a], &gts[j].bbox);
            let (aw, ah) = (an.x_max - an.x_min, an.y_max - an.y_min);
            let (gw, gh) = (g.x_max - g.x_min, g.y_max - g.y_min);
            let (acx, acy) = (an.x_min + aw / 2.0, an.y_min + ah / 2.0);
            let (gcx, gcy) = (g.x_min + gw / 2.0, g.y_min + gh / 2.0);
            deltas[a] = [
                (gcx - acx) / aw / 0.1,
                (gcy - acy) / ah / 0.1,
                (gw / aw).ln() / 0.2,
                (gh / ah).ln() / 0.2,
            ];
        }
    }
    OracleAssignment { labels, matched, deltas }
}

/// Greedy matching in the given order: each detection takes the same-class
/// unmatched ground truth of highest IoU, if that IoU reaches `thr`.
pub fn match_greedy(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let candidates: Vec<(usize, f64)> = (0..gts.len())
            .filter(|&j| !used[j] && gts[j].class_id == d.class_id)
            .map(|j| (j, iou(&d.bbox, &gts[j].bbox)))
            .filter(|&(_, v)| v >= thr)
            .collect();
        let mut pick: Option<(usize, f64)> = None;
        for (j, v) in candidates {
            if pick.map_or(true, |(_, pv)| v > pv) {
                pick = Some((j, v));
            }
        }
        if let Some((j, _)) = pick {
            used[j] = true;
        }
        out.push(pick.map(|(j, _)| j));
    }
    out
}

/// Size bucket index of a box: 0 very tiny (< 8), 1 tiny (< 16), 2 small
/// (< 32), 3 larger.
pub fn bucket(b: &BBox) -> usize {
    let s = ((b.x_max - b.x_min) * (b.y_max - b.y_min)).sqrt();
    if s < 8.0 {
        0
    } else if s < 16.0 {
        1
    } else if s < 32.0 {
        2
    } else {
        3
    }
}

/// 101-point interpolated AP of one ranked TP/FP list with `npos` positives.
fn ap_101(flags: &[bool], npos: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        points.push((tp / npos as f64, tp / (k + 1) as f64));
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|&&(rec, _)| rec >= r)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

/// `[ap, ap50, ap75, ap_vt, ap_t, ap_s]`, `None` where no ground truth exists.
pub fn average_precision(images: &[ImageEval]) -> [Option<f64>; 6] {
    let mut classes: Vec<u32> = images
        .iter()
        .flat_map(|im| im.ground_truth.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();
    // ap[bucket filter][threshold]; filter 0 = all, 1..=3 = buckets 0..=2
    let mut table = [[None; 10]; 4];
    for t in 0..10 {
        let thr = 0.5 + 0.05 * t as f64;
        // (score, class, bucket of matched gt)
        let mut all: Vec<(f64, u32, Option<usize>)> = Vec::new();
        for im in images {
            let mut dets = im.detections.clone();
            dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let m = match_greedy(&dets, &im.ground_truth, thr);
            for (d, m) in dets.iter().zip(m) {
                all.push((d.score, d.class_id, m.map(|j| bucket(&im.ground_truth[j].bbox))));
            }
        }
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for f in 0..4 {
            let wanted = |b: usize| f == 0 || b == f - 1;
            let mut aps = Vec::new();
            for &c in &classes {
                let npos = images
                    .iter()
                    .flat_map(|im| &im.ground_truth)
                    .filter(|g| g.class_id == c && wanted(bucket(&g.bbox)))
                    .count();
                if npos == 0 {
                    continue;
                }
                let mut flags = Vec::new();
                for &(_, dc, mb) in &all {
                    if dc != c {
                        continue;
                    }
                    match mb {
                        Some(b) if wanted(b) => flags.push(true),
                        Some(_) => {}
                        None => flags.push(false),
                    }
                }
                aps.push(ap_101(&flags, npos));
            }
            if !aps.is_empty() {
                table[f][t] = Some(aps.iter().sum::<f64>() / aps.len() as f64);
            }
        }
    }
    let mean = |f: usize| -> Option<f64> {
        let v: Option<Vec<f64>> = table[f].iter().copied().collect();
        v.map(|v| v.iter().sum::<f64>() / 10.0)
    };
    [mean(0), table[0][0], table[0][5], mean(1), mean(2), mean(3)]
}
