//! Single-stage anchor detector over the (optionally enhanced) pyramid, its
//! losses and the training step that couples detection with reconstruction.

pub mod anchors;
pub mod head;
pub mod nms;

use serde::{Deserialize, Serialize};

use crate::backbone::{image_batch, BackboneConfig, BackboneFpn, PyramidVars, LEVEL_STRIDES};
use crate::bbox::{BBox, Detection, GroundTruthBox};
use crate::dgfe::{Dgfe, DgfeConfig};
use crate::diffmap::{DiffFlavor, HighPassConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{apply_norm_updates, Graph, NORM_MOMENTUM};
use crate::nn::optim::{sgd_step, SgdConfig, SgdState};
use crate::nn::spectral::Band;
use crate::nn::{FocalParams, ParamStore, Var};
use crate::recon::{ReconConfig, ReconHead};
use crate::synthdata::{ImageTensor, Scene};
use crate::tensor::{Real, Tensor};

pub use anchors::{assign_targets, AnchorConfig, AssignConfig, Assignment};
pub use head::{DetectionHead, HeadConfig};
pub use nms::nms;

/// Which pipeline the detection head sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Raw pyramid, no reconstruction branch.
    Baseline,
    /// Reconstruction, difference map and feature enhancement on the finest level.
    Srtod,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Srtod => "srtod",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffConfig {
    pub flavor: DiffFlavor,
    pub cutoff: f64,
}

impl Default for DiffConfig {
    fn default() -> Self {
        DiffConfig {
            flavor: DiffFlavor::Pixel,
            cutoff: HighPassConfig::default().cutoff,
        }
    }
}

impl DiffConfig {
    pub fn highpass(&self) -> HighPassConfig {
        HighPassConfig { cutoff: self.cutoff }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the reconstruction MSE in the total loss.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            pos_iou: 0.5,
            neg_iou: 0.4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !(0.0..=1.0).contains(&self.focal_alpha) || self.focal_gamma < 0.0 {
            return Err(Error::config(format!("invalid loss settings {self:?}")));
        }
        if !(0.0 < self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::config(format!(
                "need 0 < neg_iou ≤ pos_iou ≤ 1, got {} and {}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }

    pub fn assign(&self) -> AssignConfig {
        AssignConfig {
            pos_iou: self.pos_iou,
            neg_iou: self.neg_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Candidates kept per image before suppression.
    pub pre_nms: usize,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            nms_iou: 0.5,
            pre_nms: 1000,
            max_detections: 100,
        }
    }
}

/// Everything needed to build the network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub classes: usize,
    pub backbone: BackboneConfig,
    pub recon: ReconConfig,
    pub diffmap: DiffConfig,
    pub dgfe: DgfeConfig,
    pub anchors: AnchorConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
}

/// Loss components of one step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_loss: f64,
    pub box_loss: f64,
    pub recon_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(cls_loss: f64, box_loss: f64, recon_loss: f64, lambda: f64) -> Self {
        LossReport {
            cls_loss,
            box_loss,
            recon_loss,
            total: cls_loss + box_loss + lambda * recon_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cls_loss, self.box_loss, self.recon_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape variables of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub pyramid: PyramidVars,
    /// `N × A × K` logits.
    pub cls: Var,
    /// `N × A × 4` encoded deltas.
    pub boxes: Var,
    pub recon: Option<Var>,
    pub diff: Option<Var>,
    /// Finest level as consumed by the head.
    pub finest: Var,
}

/// Per-image intermediate maps of an inference pass.
#[derive(Clone, Debug)]
pub struct Inspection {
    pub recon: Option<ImageTensor>,
    /// `1 × H × W` difference map of the configured flavor.
    pub diff: Option<Tensor<f32>>,
    /// Filtration map on the finest feature grid.
    pub filtration: Option<Tensor<f32>>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct SrTod {
    cfg: ModelConfig,
    backbone: BackboneFpn,
    recon: ReconHead,
    dgfe: Dgfe,
    head: DetectionHead,
}

impl SrTod {
    /// Register every parameter in `store`. Baseline and SR-TOD runs build the
    /// same store, so shared parameters start identical for a given seed.
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        cfg.anchors.validate()?;
        cfg.loss.validate()?;
        cfg.diffmap.highpass().validate()?;
        let c = cfg.backbone.channels;
        let backbone = BackboneFpn::new(store, seed, &cfg.backbone)?;
        let recon = ReconHead::new(store, seed, c, cfg.recon.source_level)?;
        let dgfe = Dgfe::new(store, seed, c, &cfg.dgfe)?;
        let head = DetectionHead::new(store, seed, c, cfg.anchors.per_location(), cfg.classes, &cfg.head)?;
        Ok(SrTod {
            cfg: cfg.clone(),
            backbone,
            recon,
            dgfe,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dgfe(&self) -> &Dgfe {
        &self.dgfe
    }

    pub fn backbone(&self) -> &BackboneFpn {
        &self.backbone
    }

    fn first_level(&self) -> usize {
        self.cfg.recon.source_level.level_index()
    }

    /// Strides of the levels the head runs on.
    pub fn strides(&self) -> &'static [usize] {
        &LEVEL_STRIDES[self.first_level()..]
    }

    pub fn anchors(&self, h: usize, w: usize) -> Vec<BBox> {
        self.cfg.anchors.generate(h, w, self.strides())
    }

    /// Difference map between a reconstruction and the input, both `N×3×H×W`.
    fn diff_var<T: Real>(&self, g: &mut Graph<T>, recon: Var, images: Var) -> Var {
        match self.cfg.diffmap.flavor {
            DiffFlavor::Pixel => g.tape.pixel_diff(recon, images),
            DiffFlavor::HighFrequency => {
                let r = g.tape.frequency_filter(recon, self.cfg.diffmap.cutoff, Band::High);
                let o = g.tape.frequency_filter(images, self.cfg.diffmap.cutoff, Band::High);
                g.tape.pixel_diff(r, o)
            }
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, images: Var, mode: Mode) -> Result<Outputs> {
        let pyramid = self.backbone.forward(g, images)?;
        let first = self.first_level();
        let mut levels: Vec<Var> = pyramid.levels[first..].to_vec();
        let (mut recon, mut diff) = (None, None);
        if mode == Mode::Srtod {
            let src = if self.cfg.recon.detach_source {
                g.tape.detach(levels[0])
            } else {
                levels[0]
            };
            let r = self.recon.forward(g, src)?;
            let d = self.diff_var(g, r, images);
            levels[0] = self.dgfe.enhance(g, levels[0], d, LEVEL_STRIDES[first])?;
            recon = Some(r);
            diff = Some(d);
        }
        let (cls, boxes) = self.head.forward(g, &levels);
        Ok(Outputs {
            pyramid,
            cls,
            boxes,
            recon,
            diff,
            finest: levels[0],
        })
    }

    /// Total loss variable plus the report of its components.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        out: &Outputs,
        images: Var,
        targets: &[Assignment],
    ) -> (Var, LossReport) {
        let lc = &self.cfg.loss;
        let labels: Vec<i32> = targets.iter().flat_map(|a| a.labels.iter().copied()).collect();
        let mask: Vec<bool> = targets
            .iter()
            .flat_map(|a| a.matched.iter().map(|m| m.is_some()))
            .collect();
        let deltas: Vec<T> = targets
            .iter()
            .flat_map(|a| a.deltas.iter().flat_map(|d| d.iter().map(|&v| T::lit(v))))
            .collect();
        let num_pos = targets.iter().map(Assignment::num_positive).sum::<usize>().max(1);
        let norm = T::lit(num_pos as f64);
        let focal = FocalParams {
            alpha: lc.focal_alpha,
            gamma: lc.focal_gamma,
        };
        let cls = g.tape.focal_loss(out.cls, labels, focal, norm);
        let reg = g.tape.masked_l1(out.boxes, deltas, mask, norm);
        let mut total = g.tape.add(cls, reg);
        let mut recon_value = 0.0;
        if let Some(r) = out.recon {
            let mse = g.tape.mse(r, images);
            recon_value = g.tape.scalar(mse).as_f64();
            if lc.lambda != 0.0 {
                let weighted = g.tape.scale(mse, T::lit(lc.lambda));
                total = g.tape.add(total, weighted);
            }
        }
        let report = LossReport::new(
            g.tape.scalar(cls).as_f64(),
            g.tape.scalar(reg).as_f64(),
            recon_value,
            lc.lambda,
        );
        (total, report)
    }

    /// Targets for every scene of a batch of `h × w` images.
    pub fn targets(&self, h: usize, w: usize, boxes: &[&[GroundTruthBox]]) -> Vec<Assignment> {
        let anchors = self.anchors(h, w);
        let cfg = self.cfg.loss.assign();
        boxes.iter().map(|b| assign_targets(&anchors, b, cfg)).collect()
    }

    /// Forward and loss without updating anything.
    pub fn evaluate_loss<T: Real>(&self, store: &ParamStore<T>, batch: &[&Scene], mode: Mode) -> Result<LossReport> {
        let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
        let x = image_batch::<T>(&images)?;
        let (_, _, h, w) = x.dims4();
        let boxes: Vec<&[GroundTruthBox]> = batch.iter().map(|s| s.boxes.as_slice()).collect();
        let targets = self.targets(h, w, &boxes);
        let mut g = Graph::new(store, false);
        let xi = g.tape.constant(x);
        let out = self.forward(&mut g, xi, mode)?;
        Ok(self.loss(&mut g, &out, xi, &targets).1)
    }

    fn decode_image<T: Real>(&self, cls: &[T], deltas: &[T], anchors: &[BBox], h: usize, w: usize) -> Vec<Detection> {
        let ic = &self.cfg.inference;
        let k = self.cfg.classes;
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (a, logits) in cls.chunks(k).enumerate() {
            for (c, &z) in logits.iter().enumerate() {
                let s = 1.0 / (1.0 + (-z.as_f64()).exp());
                if s > ic.score_threshold {
                    cand.push((s, a, c));
                }
            }
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0));
        cand.truncate(ic.pre_nms);
        let dets = cand
            .into_iter()
            .filter_map(|(score, a, c)| {
                let d = &deltas[a * 4..a * 4 + 4];
                let b = anchors::decode(&anchors[a], [d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()]);
                let b = BBox::new(
                    b.x_min.clamp(0.0, w as f64),
                    b.y_min.clamp(0.0, h as f64),
                    b.x_max.clamp(0.0, w as f64),
                    b.y_max.clamp(0.0, h as f64),
                )
                .ok()?;
                Some(Detection {
                    bbox: b,
                    class_id: c as u32,
                    score,
                })
            })
            .collect();
        let mut kept = nms(dets, ic.nms_iou);
        kept.truncate(ic.max_detections);
        kept
    }

    /// Inference on a batch of images, returning intermediate maps as well.
    pub fn inspect<T: Real>(&self, store: &ParamStore<T>, images: &[&ImageTensor], mode: Mode) -> Result<Vec<Inspection>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = image_batch::<T>(images)?;
        let (n, _, h, w) = x.dims4();
        let mut g = Graph::new(store, false);
        let xi = g.tape.constant(x);
        let out = self.forward(&mut g, xi, mode)?;
        let filtration = match out.diff {
            Some(d) if self.dgfe.config().mode != crate::dgfe::DgfeMode::Off => {
                let f = self.dgfe.filtration(&mut g, d, LEVEL_STRIDES[self.first_level()]);
                Some(g.value(f).clone())
            }
            _ => None,
        };
        let anchors = self.anchors(h, w);
        let (cls, deltas) = (g.value(out.cls), g.value(out.boxes));
        let per_cls = cls.len() / n;
        let per_box = deltas.len() / n;
        let image_of = |t: &Tensor<T>, i: usize| -> Tensor<f32> {
            let item = t.select(i);
            let shape = item.shape()[1..].to_vec();
            item.cast::<f32>().reshape(&shape).expect("same length")
        };
        Ok((0..n)
            .map(|i| Inspection {
                recon: out.recon.map(|r| image_of(g.value(r), i)),
                diff: out.diff.map(|d| image_of(g.value(d), i)),
                filtration: filtration.as_ref().map(|f| image_of(f, i)),
                detections: self.decode_image(
                    &cls.data()[i * per_cls..(i + 1) * per_cls],
                    &deltas.data()[i * per_box..(i + 1) * per_box],
                    &anchors,
                    h,
                    w,
                ),
            })
            .collect())
    }

    pub fn detect<T: Real>(&self, store: &ParamStore<T>, images: &[&ImageTensor], mode: Mode) -> Result<Vec<Vec<Detection>>> {
        Ok(self
            .inspect(store, images, mode)?
            .into_iter()
            .map(|i| i.detections)
            .collect())
    }
}

/// Model, parameters and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub model: SrTod,
    pub store: ParamStore<T>,
    pub state: SgdState<T>,
    pub sgd: SgdConfig,
    pub mode: Mode,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &ModelConfig, sgd: &SgdConfig, mode: Mode, seed: u64) -> Result<Self> {
        sgd.validate()?;
        let mut store = ParamStore::new();
        let model = SrTod::new(&mut store, seed, cfg)?;
        let state = SgdState::new(&store);
        Ok(Trainer {
            model,
            store,
            state,
            sgd: sgd.clone(),
            mode,
            step: 0,
        })
    }

    /// One update on `batch` at learning rate `lr`; returns the losses measured
    /// before the update.
    pub fn training_step(&mut self, batch: &[&Scene], lr: f64) -> Result<LossReport> {
        let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
        let x = image_batch::<T>(&images)?;
        let (_, _, h, w) = x.dims4();
        let boxes: Vec<&[GroundTruthBox]> = batch.iter().map(|s| s.boxes.as_slice()).collect();
        let targets = self.model.targets(h, w, &boxes);

        let mut g = Graph::new(&self.store, true);
        let xi = g.tape.constant(x);
        let out = self.model.forward(&mut g, xi, self.mode)?;
        let (total, report) = self.model.loss(&mut g, &out, xi, &targets);
        if !report.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: cls {} box {} recon {} total {}",
                self.step, report.cls_loss, report.box_loss, report.recon_loss, report.total
            )));
        }
        let grads = g.tape.backward(total);
        if let Some((id, _)) = grads.params().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite(format!(
                "step {}: gradient of {} is not finite",
                self.step,
                self.store.entry(id).name
            )));
        }
        let updates = std::mem::take(&mut g.norm_updates);
        drop(g);
        sgd_step(&mut self.store, &mut self.state, &grads, &self.sgd, lr);
        apply_norm_updates(&mut self.store, &updates, NORM_MOMENTUM);
        self.model.dgfe().clamp_threshold(&mut self.store);
        self.step += 1;
        Ok(report)
    }
}
