//! Seeded checks used both by the integration tests and by the acceptance
//! runner. Each returns a one-line summary on success and a diagnostic on
//! failure.

use rand::Rng;

use srtod::backbone::{BackboneConfig, BackboneFpn};
use srtod::bbox::{BBox, Detection, GroundTruthBox};
use srtod::detector::anchors::encode;
use srtod::detector::{assign_targets, AnchorConfig, AssignConfig};
use srtod::dgfe::{Dgfe, DgfeConfig, DgfeMode, ResizeMode, ThresholdMode};
use srtod::diffmap::{highfreq_diff, highpass, lowpass, pixel_diff, HighPassConfig};
use srtod::eval::{compute_ap, match_detections, ImageEval};
use srtod::nn::layers::Graph;
use srtod::nn::{ParamStore, Var};
use srtod::recon::{ReconHead, SourceLevel, UpBlock};
use srtod::{Real, Tensor};

use super::{gradcheck, oracles, projection, randomize, rng, uniform, GradReport, LossFn};

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- invariants

/// Non-negativity and argument symmetry of both difference-map flavors.
pub fn diff_nonnegative_symmetric(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..24), r.gen_range(1..24));
    let a = uniform(&[3, h, w], seed ^ 1, 0.0, 1.0);
    let b = uniform(&[3, h, w], seed ^ 2, 0.0, 1.0);
    let hp = HighPassConfig {
        cutoff: r.gen_range(0.0..1.0),
    };
    for (ab, ba) in [
        (pixel_diff(&a, &b).unwrap(), pixel_diff(&b, &a).unwrap()),
        (highfreq_diff(&a, &b, &hp).unwrap(), highfreq_diff(&b, &a, &hp).unwrap()),
    ] {
        ensure(ab.data.data().iter().all(|&v| v >= 0.0), || format!("negative entry ({h}×{w})"))?;
        ensure(ab.data == ba.data, || format!("asymmetric {:?} map ({h}×{w})", ab.flavor))?;
        ensure(ab.source_shape == (h, w), || "source shape".into())?;
    }
    Ok(format!("{h}×{w}"))
}

fn filtration_setup(threshold: ThresholdMode, resize: ResizeMode, channels: usize, seed: u64) -> (ParamStore<f64>, Dgfe) {
    let cfg = DgfeConfig {
        threshold,
        resize,
        ..DgfeConfig::default()
    };
    let mut store = ParamStore::new();
    let d = Dgfe::new(&mut store, seed, channels, &cfg).unwrap();
    (store, d)
}

/// Filtration values lie in {1, 2} under maxpool and nearest resizing.
pub fn filtration_binary(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let factor = [2, 4, 8][r.gen_range(0..3)];
    let (oh, ow) = (r.gen_range(1..6), r.gen_range(1..6));
    let t = r.gen_range(0.0..1.0);
    let d = uniform(&[2, 1, oh * factor, ow * factor], seed ^ 7, 0.0, 1.0);
    for resize in [ResizeMode::Maxpool, ResizeMode::Nearest] {
        let (store, dg) = filtration_setup(ThresholdMode::Fixed(t), resize, 4, seed);
        let f = dg.filtration_tensor(&store, &d, factor).unwrap();
        ensure(f.shape() == [2, 1, oh, ow], || format!("shape {:?}", f.shape()))?;
        ensure(f.data().iter().all(|&v| v == 1.0 || v == 2.0), || {
            format!("{resize:?} produced a value outside {{1, 2}}")
        })?;
    }
    Ok(format!("factor {factor}, t = {t:.3}"))
}

/// Raising the threshold never enlarges the activated set.
pub fn threshold_monotone(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let factor = [2, 4][r.gen_range(0..2)];
    let (oh, ow) = (r.gen_range(1..8), r.gen_range(1..8));
    let d = uniform(&[1, 1, oh * factor, ow * factor], seed ^ 3, 0.0, 1.0);
    let (lo, hi) = {
        let (a, b): (f64, f64) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        (a.min(b), a.max(b))
    };
    for resize in [ResizeMode::Maxpool, ResizeMode::Nearest] {
        let at = |t: f64| {
            let (store, dg) = filtration_setup(ThresholdMode::Fixed(t), resize, 4, seed);
            dg.filtration_tensor(&store, &d, factor).unwrap()
        };
        let (fl, fh) = (at(lo), at(hi));
        let grew = fl.data().iter().zip(fh.data()).any(|(&l, &h)| h == 2.0 && l != 2.0);
        ensure(!grew, || format!("{resize:?}: t {hi:.4} activates a cell that t {lo:.4} does not"))?;
    }
    Ok(format!("t {lo:.3} ≤ {hi:.3}"))
}

/// `P2'[c, y, x] = w[c] · F[y, x] · P2[c, y, x]` bit for bit.
pub fn attention_identity(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let c = 4 * r.gen_range(1..5);
    let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
    let threshold = match r.gen_range(0..3) {
        0 => ThresholdMode::Learnable,
        1 => ThresholdMode::Fixed(r.gen_range(0.0..1.0)),
        _ => ThresholdMode::None,
    };
    let (mut store, dg) = filtration_setup(threshold, ResizeMode::Maxpool, c, seed);
    randomize(&mut store, seed ^ 11, 0.5);
    dg.clamp_threshold(&mut store);
    let feat = uniform(&[2, c, h, w], seed ^ 5, -2.0, 2.0);
    let diff = uniform(&[2, 1, 4 * h, 4 * w], seed ^ 6, 0.0, 0.5);
    let out = dg.enhance_tensors(&store, &feat, &diff, 4).unwrap();
    let wts = dg.reweight_tensor(&store, &feat).unwrap();
    let f = dg.filtration_tensor(&store, &diff, 4).unwrap();
    for n in 0..2 {
        for ch in 0..c {
            for k in 0..h * w {
                let i = (n * c + ch) * h * w + k;
                let want = (wts.data()[n * c + ch] * f.data()[n * h * w + k]) * feat.data()[i];
                ensure(out.data()[i] == want, || {
                    format!("element ({n},{ch},{k}): {} != {want}", out.data()[i])
                })?;
            }
        }
    }
    Ok(format!("{c}×{h}×{w}, threshold {threshold}"))
}

/// `highpass + lowpass` restores the image within 1e-6.
pub fn band_complement(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..40), r.gen_range(1..40));
    let cfg = HighPassConfig {
        cutoff: r.gen_range(0.0..=1.0),
    };
    let img = uniform(&[3, h, w], seed ^ 9, 0.0, 1.0);
    let sum = highpass(&img, &cfg).zip_map(&lowpass(&img, &cfg), |a, b| a + b);
    let err64 = max_abs(sum.data(), img.data());
    let img32: Tensor<f32> = img.cast();
    let sum32 = highpass(&img32, &cfg).zip_map(&lowpass(&img32, &cfg), |a, b| a + b);
    let err32 = sum32
        .data()
        .iter()
        .zip(img32.data())
        .map(|(a, b)| f64::from((a - b).abs()))
        .fold(0.0, f64::max);
    ensure(err64 <= 1e-6 && err32 <= 1e-6, || {
        format!("{h}×{w} cutoff {}: error {err64:.2e} (f64), {err32:.2e} (f32)", cfg.cutoff)
    })?;
    Ok(format!("{h}×{w}: {err64:.1e} / {err32:.1e}"))
}

/// Reconstruction of an `h × w` source level has the shape of the image it
/// was extracted from.
pub fn recon_shape(store: &ParamStore<f32>, head: &ReconHead, channels: usize, h: usize, w: usize) -> Result<(), String> {
    let s = head.source().stride();
    let src = Tensor::<f32>::full(&[1, channels, h, w], 0.1);
    let out = head.reconstruct(store, &src).map_err(|e| e.to_string())?;
    ensure(out.shape() == [1, 3, s * h, s * w], || {
        format!("source {h}×{w} gave {:?}", out.shape())
    })?;
    ensure(out.data().iter().all(|&v| v > 0.0 && v < 1.0), || "values leave (0, 1)".into())
}

/// Every source grid whose image fits in 256×256, for both source levels,
/// plus the full pyramid path on every backbone-valid image size.
pub fn recon_shapes_exhaustive() -> Outcome {
    let c = 8;
    let mut checked = 0;
    for level in [SourceLevel::P2, SourceLevel::P3] {
        let mut store = ParamStore::<f32>::new();
        let head = ReconHead::new(&mut store, 1, c, level).unwrap();
        let max = 256 / level.stride();
        for h in 1..=max {
            for w in 1..=max {
                recon_shape(&store, &head, c, h, w)?;
                checked += 1;
            }
        }
    }
    let cfg = BackboneConfig {
        channels: c,
        groups: 2,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let bb = BackboneFpn::new(&mut store, 2, &cfg).unwrap();
    let head = ReconHead::new(&mut store, 2, c, SourceLevel::P2).unwrap();
    for h in (64..=256).step_by(64) {
        for w in (64..=256).step_by(64) {
            let img = Tensor::<f32>::full(&[3, h, w], 0.5);
            let p = bb.extract_pyramid(&store, &img).map_err(|e| e.to_string())?;
            let out = head.reconstruct(&store, p.level(0)).map_err(|e| e.to_string())?;
            ensure(out.shape() == [1, 3, h, w], || format!("image {h}×{w} gave {:?}", out.shape()))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} shapes"))
}

// ------------------------------------------------------------ gradient checks

pub struct UpBlockLoss(pub UpBlock);

impl LossFn for UpBlockLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.0.forward(g, x).unwrap();
        projection(g, y, 21)
    }
}

pub struct ReconLoss {
    pub head: ReconHead,
    pub target: Tensor<f64>,
}

impl LossFn for ReconLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let r = self.head.forward(g, x).unwrap();
        let t = g.tape.constant(self.target.cast());
        g.tape.mse(r, t)
    }
}

pub struct ReweightLoss(pub Dgfe);

impl LossFn for ReweightLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = self.0.reweight(g, x).unwrap();
        projection(g, w, 22)
    }
}

pub struct SurrogateLoss {
    pub dgfe: Dgfe,
    pub factor: usize,
}

impl LossFn for SurrogateLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let f = self.dgfe.filtration_offset(g, x, self.factor, 1.0, false);
        projection(g, f, 23)
    }
}

pub struct EndToEndLoss {
    pub backbone: BackboneFpn,
    pub head: ReconHead,
    pub target: Tensor<f64>,
}

impl LossFn for EndToEndLoss {
    fn eval<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let p = self.backbone.forward(g, x).unwrap();
        let r = self.head.forward(g, p.levels[0]).unwrap();
        let t = g.tape.constant(self.target.cast());
        g.tape.mse(r, t)
    }
}

fn grad_outcome(name: &str, rep: GradReport, tol: f64) -> Outcome {
    let line = format!(
        "{name}: worst rel. err {:.2e} ({}) over {} tensors / {} coords",
        rep.worst, rep.worst_name, rep.tensors, rep.coordinates
    );
    if rep.worst < tol {
        Ok(line)
    } else {
        Err(line)
    }
}

pub fn grad_up_block() -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let b = UpBlock::new(&mut store, 3, "b", 8).unwrap();
    randomize(&mut store, 31, 0.3);
    let x = uniform(&[1, 8, 6, 6], 32, -1.0, 1.0);
    grad_outcome("up_block", gradcheck::<f64, _>(&store, &x, &UpBlockLoss(b), 40, 33), 1e-4)
}

pub fn grad_reconstruct(level: SourceLevel) -> Outcome {
    let mut store = ParamStore::<f64>::new();
    let head = ReconHead::new(&mut store, 4, 8, level).unwrap();
    randomize(&mut store, 41, 0.3);
    let (h, w) = (24 / level.stride(), 32 / level.stride());
    let x = uniform(&[1, 8, h, w], 42, -1.0, 1.0);
    let target = uniform(&[1, 3, 24, 32], 43, 0.0, 1.0);
    let loss = ReconLoss { head, target };
    grad_outcome(
        &format!("recon_loss∘reconstruct from {level:?}"),
        gradcheck::<f64, _>(&store, &x, &loss, 40, 44),
        1e-4,
    )
}

pub fn grad_reweight() -> Outcome {
    let (mut store, dg) = filtration_setup(ThresholdMode::Fixed(0.1), ResizeMode::Maxpool, 8, 5);
    randomize(&mut store, 51, 0.5);
    let x = uniform(&[2, 8, 5, 5], 52, -1.0, 1.0);
    grad_outcome("reweight", gradcheck::<f64, _>(&store, &x, &ReweightLoss(dg), 40, 53), 1e-4)
}

pub fn grad_surrogate(resize: ResizeMode) -> Outcome {
    let (store, dgfe) = filtration_setup(ThresholdMode::Learnable, resize, 4, 6);
    let x = uniform(&[2, 1, 16, 16], 61, 0.0, 0.3);
    let loss = SurrogateLoss { dgfe, factor: 4 };
    let mut rep = gradcheck::<f64, _>(&store, &x, &loss, 64, 62);
    // only the input and the threshold take part
    rep.tensors = rep.tensors.min(2);
    grad_outcome(&format!("surrogate filtration ({resize:?})"), rep, 1e-4)
}

fn end_to_end_setup() -> (ParamStore<f64>, Tensor<f64>, EndToEndLoss) {
    let cfg = BackboneConfig {
        channels: 8,
        groups: 2,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let backbone = BackboneFpn::new(&mut store, 7, &cfg).unwrap();
    let head = ReconHead::new(&mut store, 7, 8, SourceLevel::P2).unwrap();
    randomize(&mut store, 71, 0.2);
    // keep the normalization gains near one
    for e in store.entries_mut() {
        if e.name.ends_with(".gamma") {
            for v in e.value.data_mut() {
                *v += 1.0;
            }
        }
    }
    let x = uniform(&[1, 3, 64, 64], 72, 0.0, 1.0);
    let target = x.clone();
    (store, x, EndToEndLoss { backbone, head, target })
}

pub fn grad_end_to_end_f64() -> Outcome {
    let (store, x, loss) = end_to_end_setup();
    grad_outcome(
        "recon_loss∘reconstruct∘extract_pyramid (f64)",
        gradcheck::<f64, _>(&store, &x, &loss, 6, 73),
        1e-4,
    )
}

pub fn grad_end_to_end_f32() -> Outcome {
    let (store, x, loss) = end_to_end_setup();
    grad_outcome(
        "recon_loss∘reconstruct∘extract_pyramid (f32)",
        gradcheck::<f32, _>(&store, &x, &loss, 6, 73),
        1e-3,
    )
}

// ------------------------------------------------------------------- oracles

pub fn oracle_pixel_diff(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..5), r.gen_range(1..16), r.gen_range(1..16));
    let a = uniform(&[c, h, w], seed ^ 1, -1.0, 2.0);
    let b = uniform(&[c, h, w], seed ^ 2, -1.0, 2.0);
    let got = pixel_diff(&a, &b).unwrap();
    let want = oracles::pixel_diff(a.data(), b.data(), c, h, w);
    ensure(got.data.data() == want.as_slice(), || {
        format!("{c}×{h}×{w}: max deviation {:.2e}", max_abs(got.data.data(), &want))
    })?;
    Ok("exact".into())
}

pub fn oracle_highfreq_diff(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..11), r.gen_range(1..11));
    let cfg = HighPassConfig {
        cutoff: r.gen_range(0.0..0.8),
    };
    let a = uniform(&[3, h, w], seed ^ 1, 0.0, 1.0);
    let b = uniform(&[3, h, w], seed ^ 2, 0.0, 1.0);
    let got = highfreq_diff(&a, &b, &cfg).unwrap();
    let ha = oracles::highpass(a.data(), 3, h, w, cfg.cutoff);
    let hb = oracles::highpass(b.data(), 3, h, w, cfg.cutoff);
    let want = oracles::pixel_diff(&ha, &hb, 3, h, w);
    let err = max_abs(got.data.data(), &want);
    ensure(err <= 1e-9, || format!("{h}×{w} cutoff {:.3}: error {err:.2e}", cfg.cutoff))?;
    Ok(format!("{err:.1e}"))
}

/// Enhancement against hand-computed pooling, perceptron and window maxima.
pub fn oracle_enhance(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let c = 4 * r.gen_range(1..4);
    let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
    let t = r.gen_range(0.05..0.45);
    let (mut store, dg) = filtration_setup(ThresholdMode::Fixed(t), ResizeMode::Maxpool, c, seed);
    randomize(&mut store, seed ^ 3, 0.5);
    let feat = uniform(&[1, c, h, w], seed ^ 4, -2.0, 2.0);
    let diff = uniform(&[1, 1, 4 * h, 4 * w], seed ^ 5, 0.0, 0.5);
    let out = dg.enhance_tensors(&store, &feat, &diff, 4).unwrap();
    let p = |name: &str| store.get(store.find(name).unwrap()).data().to_vec();
    let wts = oracles::reweight(
        feat.data(),
        c,
        h * w,
        &p("dgfe.fc1.weight"),
        &p("dgfe.fc1.bias"),
        &p("dgfe.fc2.weight"),
        &p("dgfe.fc2.bias"),
    );
    let got_w = dg.reweight_tensor(&store, &feat).unwrap();
    let werr = max_abs(got_w.data(), &wts);
    ensure(werr <= 1e-10, || format!("reweight error {werr:.2e}"))?;
    let f = oracles::filtration(diff.data(), 4 * h, 4 * w, t, 4);
    let mut want = vec![0.0; c * h * w];
    for ch in 0..c {
        for k in 0..h * w {
            want[ch * h * w + k] = wts[ch] * f[k] * feat.data()[ch * h * w + k];
        }
    }
    let err = max_abs(out.data(), &want);
    ensure(err <= 1e-10, || format!("{c}×{h}×{w}: enhance error {err:.2e}"))?;
    Ok(format!("{err:.1e}"))
}

fn random_box(r: &mut impl Rng, extent: f64, size: (f64, f64)) -> BBox {
    let bw = r.gen_range(size.0..size.1);
    let bh = r.gen_range(size.0..size.1);
    let x = r.gen_range(0.0..(extent - bw).max(0.1));
    let y = r.gen_range(0.0..(extent - bh).max(0.1));
    BBox::new(x, y, x + bw, y + bh).unwrap()
}

pub fn oracle_assign(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let ratios = if r.gen_bool(0.5) { vec![1.0] } else { vec![0.5, 1.0, 2.0] };
    let anchors = AnchorConfig {
        scale: 2.0,
        aspect_ratios: ratios,
    }
    .generate(32, 32, &[4, 8]);
    let n = r.gen_range(0..6);
    let gts: Vec<GroundTruthBox> = (0..n)
        .map(|_| GroundTruthBox {
            bbox: random_box(&mut r, 32.0, (2.0, 16.0)),
            class_id: r.gen_range(0..3),
        })
        .collect();
    let cfg = AssignConfig::default();
    let got = assign_targets(&anchors, &gts, cfg);
    let want = oracles::assign(&anchors, &gts, cfg.pos_iou, cfg.neg_iou);
    ensure(got.labels == want.labels, || "labels differ".into())?;
    ensure(got.matched == want.matched, || "matches differ".into())?;
    let err = got
        .deltas
        .iter()
        .zip(&want.deltas)
        .map(|(a, b)| max_abs(a, b))
        .fold(0.0, f64::max);
    ensure(err <= 1e-12, || format!("delta error {err:.2e}"))?;
    // the library's own encoder agrees on every positive anchor
    for (a, m) in got.matched.iter().enumerate() {
        if let Some(j) = *m {
            ensure(max_abs(&encode(&anchors[a], &gts[j].bbox), &got.deltas[a]) == 0.0, || "encode".into())?;
        }
    }
    Ok(format!("{} anchors, {n} objects", anchors.len()))
}

/// Random detection problem with at most `max_boxes` boxes per image, sizes
/// spread over every bucket and distinct scores.
pub fn random_instance(seed: u64, images: usize, max_boxes: usize) -> Vec<ImageEval> {
    let mut r = rng(seed);
    (0..images)
        .map(|_| {
            let ng = r.gen_range(0..=max_boxes / 2);
            let gts: Vec<GroundTruthBox> = (0..ng)
                .map(|_| GroundTruthBox {
                    bbox: random_box(&mut r, 64.0, (2.0, 40.0)),
                    class_id: r.gen_range(0..2),
                })
                .collect();
            let nd = r.gen_range(0..=max_boxes - ng);
            let dets = (0..nd)
                .map(|_| {
                    let bbox = if !gts.is_empty() && r.gen_bool(0.7) {
                        let g = gts[r.gen_range(0..gts.len())].bbox;
                        let j = (g.width().min(g.height()) * 0.25).max(0.01);
                        let dx = r.gen_range(-j..j);
                        let dy = r.gen_range(-j..j);
                        BBox::new(g.x_min + dx, g.y_min + dy, g.x_max + dx * 0.5, g.y_max - dy * 0.5).unwrap()
                    } else {
                        random_box(&mut r, 64.0, (2.0, 40.0))
                    };
                    Detection {
                        bbox,
                        class_id: r.gen_range(0..2),
                        score: r.gen_range(0.0..1.0),
                    }
                })
                .collect();
            ImageEval {
                detections: dets,
                ground_truth: gts,
            }
        })
        .collect()
}

pub fn oracle_match(seed: u64) -> Outcome {
    let inst = random_instance(seed, 1, 10).pop().unwrap();
    let mut dets = inst.detections.clone();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    for thr in [0.3, 0.5, 0.75] {
        let got = match_detections(&dets, &inst.ground_truth, thr);
        let want = oracles::match_greedy(&dets, &inst.ground_truth, thr);
        ensure(got == want, || format!("threshold {thr}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("{} dets, {} gts", dets.len(), inst.ground_truth.len()))
}

fn ap_fields(rep: &srtod::eval::ApReport) -> [Option<f64>; 6] {
    [rep.ap, rep.ap50, rep.ap75, rep.ap_vt, rep.ap_t, rep.ap_s]
}

pub fn oracle_ap(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let images = r.gen_range(1..4);
    let inst = random_instance(seed ^ 0xa5, images, 10);
    let got = ap_fields(&compute_ap(&inst).unwrap());
    let want = oracles::average_precision(&inst);
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        let ok = match (g, w) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
            (None, None) => true,
            _ => false,
        };
        ensure(ok, || format!("field {i}: {g:?} vs oracle {w:?}"))?;
    }
    Ok(format!("{images} images"))
}

// --------------------------------------------------------------- properties

/// AP at IoU 0.5 + 0.05 k is non-increasing in k.
pub fn ap_monotone_in_iou(seed: u64) -> Outcome {
    let inst = random_instance(seed, 2, 10);
    let rep = compute_ap(&inst).unwrap();
    let aps: Vec<f64> = rep.ap_per_iou.iter().flatten().copied().collect();
    ensure(aps.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("{aps:?}"))?;
    Ok("monotone".into())
}

/// Appending a zero-score false positive leaves every metric unchanged.
pub fn zero_score_fp_neutral(seed: u64) -> Outcome {
    let inst = random_instance(seed, 2, 8);
    let before = ap_fields(&compute_ap(&inst).unwrap());
    let mut more = inst.clone();
    more[0].detections.push(Detection {
        bbox: BBox::new(500.0, 500.0, 510.0, 510.0).unwrap(),
        class_id: 0,
        score: 0.0,
    });
    let after = ap_fields(&compute_ap(&more).unwrap());
    ensure(before == after, || format!("{before:?} -> {after:?}"))?;
    Ok("unchanged".into())
}

/// A detection identical to an unmatched ground truth, ranked first, never
/// lowers AP at IoU 0.5.
pub fn added_tp_never_hurts(seed: u64) -> Outcome {
    let mut inst = random_instance(seed, 2, 8);
    let gt = GroundTruthBox {
        bbox: BBox::new(100.0, 100.0, 106.0, 106.0).unwrap(),
        class_id: 0,
    };
    inst[0].ground_truth.push(gt);
    let before = compute_ap(&inst).unwrap().ap50.unwrap();
    inst[0].detections.push(Detection {
        bbox: gt.bbox,
        class_id: 0,
        score: 1.0,
    });
    let after = compute_ap(&inst).unwrap().ap50.unwrap();
    ensure(after >= before, || format!("ap50 {before} -> {after}"))?;
    Ok(format!("{before:.4} -> {after:.4}"))
}

/// Multiply mode with every difference below a fixed threshold zeroes P2.
pub fn multiply_zeroes_features() -> Outcome {
    let cfg = DgfeConfig {
        mode: DgfeMode::Multiply,
        threshold: ThresholdMode::Fixed(0.5),
        ..DgfeConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let dg = Dgfe::new(&mut store, 0, 8, &cfg).unwrap();
    let feat = uniform(&[2, 8, 4, 4], 81, 0.5, 3.0);
    let diff = uniform(&[2, 1, 16, 16], 82, 0.0, 0.49);
    let out = dg.enhance_tensors(&store, &feat, &diff, 4).unwrap();
    ensure(out.data().iter().all(|&v| v == 0.0), || "non-zero output".into())?;
    let attn = DgfeConfig {
        mode: DgfeMode::Attention,
        ..cfg
    };
    let mut store = ParamStore::<f64>::new();
    let dg = Dgfe::new(&mut store, 0, 8, &attn).unwrap();
    let kept = dg.enhance_tensors(&store, &feat, &diff, 4).unwrap();
    ensure(kept.data().iter().all(|&v| v != 0.0), || "attention zeroed a feature".into())?;
    Ok("multiply zeroes all features; attention keeps every one".into())
}

/// Run `check` for seeds `0..n`, stopping at the first failure.
pub fn over_seeds(n: u64, check: impl Fn(u64) -> Outcome) -> Outcome {
    for s in 0..n {
        check(s).map_err(|e| format!("seed {s}: {e}"))?;
    }
    Ok(format!("{n} instances"))
}
