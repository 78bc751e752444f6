//! Difference-map guided feature enhancement.
//!
//! The difference map is thresholded into a binary map, resized onto the
//! feature grid and offset by one, so every cell of the filtration map is 1
//! (keep) or 2 (boost). A channel-attention vector computed from the feature
//! map's global average and max pools through a shared two-layer perceptron
//! scales each channel. Their broadcast product is the element-wise attention
//! applied to the feature map:
//!
//! `out[c, y, x] = w[c] · F[y, x] · P[c, y, x]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Graph};
use crate::nn::{ParamId, ParamStore, Resize, Threshold, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgfeMode {
    /// Element-wise attention `(w ⊗ F) ⊗ P`.
    Attention,
    /// Append the resized binary map as a channel and mix back with a 1×1 conv.
    Concat,
    /// Multiply by the resized binary map with no offset.
    Multiply,
    /// Leave the feature map untouched.
    Off,
}

impl DgfeMode {
    pub fn label(self) -> &'static str {
        match self {
            DgfeMode::Attention => "attention",
            DgfeMode::Concat => "concat",
            DgfeMode::Multiply => "multiply",
            DgfeMode::Off => "off",
        }
    }
}

/// How the difference map is binarized. Serialized as `learnable`,
/// `fixed:<value>` or `none`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdMode {
    Learnable,
    Fixed(f64),
    /// No binarization: the raw difference map is resized and offset.
    None,
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Learnable => write!(f, "learnable"),
            ThresholdMode::Fixed(v) => write!(f, "fixed:{v}"),
            ThresholdMode::None => write!(f, "none"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(ThresholdMode::Learnable),
            "none" => Ok(ThresholdMode::None),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "threshold must be `learnable`, `fixed:<value>` or `none`, got `{s}`"
                        ))
                    })?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("fixed threshold {v} outside [0, 1]")));
                }
                Ok(ThresholdMode::Fixed(v))
            }
        }
    }
}

impl TryFrom<String> for ThresholdMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ThresholdMode> for String {
    fn from(t: ThresholdMode) -> String {
        t.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Maxpool,
    Nearest,
    Bilinear,
}

impl From<ResizeMode> for Resize {
    fn from(m: ResizeMode) -> Resize {
        match m {
            ResizeMode::Maxpool => Resize::MaxPool,
            ResizeMode::Nearest => Resize::Nearest,
            ResizeMode::Bilinear => Resize::Bilinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgfeConfig {
    pub mode: DgfeMode,
    pub threshold: ThresholdMode,
    /// Initial value of the learnable threshold.
    pub init_threshold: f64,
    /// Temperature of the logistic surrogate used for gradients.
    pub tau: f64,
    pub resize: ResizeMode,
    /// Hidden width of the channel perceptron is `channels / reduction`.
    pub reduction: usize,
    /// Stop detection gradients from flowing back through the difference map.
    pub detach_diff: bool,
}

impl Default for DgfeConfig {
    fn default() -> Self {
        DgfeConfig {
            mode: DgfeMode::Attention,
            threshold: ThresholdMode::Learnable,
            init_threshold: 0.1,
            tau: 0.05,
            resize: ResizeMode::Maxpool,
            reduction: 4,
            detach_diff: false,
        }
    }
}

impl DgfeConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduction == 0 || channels % self.reduction != 0 {
            return Err(Error::config(format!(
                "reduction {} must divide {channels} channels",
                self.reduction
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.init_threshold) {
            return Err(Error::config(format!(
                "initial threshold {} outside [0, 1]",
                self.init_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dgfe {
    cfg: DgfeConfig,
    channels: usize,
    threshold: Option<ParamId>,
    fc1: Conv2d,
    fc2: Conv2d,
    mix: Conv2d,
}

impl Dgfe {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize, cfg: &DgfeConfig) -> Result<Self> {
        cfg.validate(channels)?;
        let hidden = channels / cfg.reduction;
        let threshold = (cfg.threshold == ThresholdMode::Learnable)
            .then(|| store.add_const("dgfe.threshold", &[1], cfg.init_threshold));
        Ok(Dgfe {
            cfg: cfg.clone(),
            channels,
            threshold,
            fc1: Conv2d::new(store, seed, "dgfe.fc1", channels, hidden, 1, 1, true),
            fc2: Conv2d::new(store, seed, "dgfe.fc2", hidden, channels, 1, 1, true),
            mix: Conv2d::new(store, seed, "dgfe.mix", channels + 1, channels, 1, 1, true),
        })
    }

    pub fn config(&self) -> &DgfeConfig {
        &self.cfg
    }

    pub fn threshold_param(&self) -> Option<ParamId> {
        self.threshold
    }

    /// Current threshold value, if one is used.
    pub fn threshold_value<T: Real>(&self, store: &ParamStore<T>) -> Option<f64> {
        match self.cfg.threshold {
            ThresholdMode::Learnable => self.threshold.map(|id| store.get(id).data()[0].as_f64()),
            ThresholdMode::Fixed(v) => Some(v),
            ThresholdMode::None => None,
        }
    }

    /// Keep the learnable threshold inside `[0, 1]`.
    pub fn clamp_threshold<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(id) = self.threshold {
            for v in store.get_mut(id).data_mut() {
                *v = v.max(T::zero()).min(T::one());
            }
        }
    }

    fn check_ratio<T: Real>(&self, g: &Graph<T>, d: Var, feat: Var, factor: usize) -> Result<()> {
        let (dn, dc, dh, dw) = g.value(d).dims4();
        let (fnn, _, fh, fw) = g.value(feat).dims4();
        if dc != 1 || dn != fnn || dh != fh * factor || dw != fw * factor {
            return Err(Error::shape(format!(
                "difference map {:?} must be {factor}× the feature grid {:?}",
                g.value(d).shape(),
                g.value(feat).shape()
            )));
        }
        Ok(())
    }

    /// Thresholded, resized map plus `offset`. `hard = false` evaluates the
    /// logistic surrogate in the forward pass as well (used to check gradients).
    pub fn filtration_offset<T: Real>(&self, g: &mut Graph<T>, d: Var, factor: usize, offset: f64, hard: bool) -> Var {
        let d = if self.cfg.detach_diff { g.tape.detach(d) } else { d };
        let resize: Resize = self.cfg.resize.into();
        let threshold = match self.cfg.threshold {
            ThresholdMode::Learnable => {
                let id = self.threshold.expect("learnable threshold registered");
                Threshold::Learnable(g.param(id))
            }
            ThresholdMode::Fixed(v) => Threshold::Fixed(T::lit(v)),
            ThresholdMode::None => {
                let r = g.tape.resize_down(d, factor, resize);
                return g.tape.add_scalar(r, T::lit(offset));
            }
        };
        g.tape
            .filtration(d, threshold, T::lit(self.cfg.tau), factor, resize, T::lit(offset), hard)
    }

    /// Filtration map `resize(D_b) + 1` on a grid `factor` times coarser than `d`.
    pub fn filtration<T: Real>(&self, g: &mut Graph<T>, d: Var, factor: usize) -> Var {
        self.filtration_offset(g, d, factor, 1.0, true)
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.tape.relu(h);
        self.fc2.forward(g, h)
    }

    /// Channel weights `sigmoid(mlp(avgpool(P)) + mlp(maxpool(P)))`, `N × C × 1 × 1`.
    pub fn reweight<T: Real>(&self, g: &mut Graph<T>, feat: Var) -> Result<Var> {
        let c = g.value(feat).dims4().1;
        if c != self.channels {
            return Err(Error::shape(format!(
                "reweighting expects {} channels, got {c}",
                self.channels
            )));
        }
        let avg = g.tape.global_avg_pool(feat);
        let max = g.tape.global_max_pool(feat);
        let a = self.mlp(g, avg);
        let m = self.mlp(g, max);
        let s = g.tape.add(a, m);
        Ok(g.tape.sigmoid(s))
    }

    /// Enhanced feature map for the configured mode.
    pub fn enhance<T: Real>(&self, g: &mut Graph<T>, feat: Var, d: Var, factor: usize) -> Result<Var> {
        if self.cfg.mode == DgfeMode::Off {
            return Ok(feat);
        }
        self.check_ratio(g, d, feat, factor)?;
        match self.cfg.mode {
            DgfeMode::Attention => {
                let w = self.reweight(g, feat)?;
                let f = self.filtration(g, d, factor);
                let m = g.tape.mul(w, f);
                Ok(g.tape.mul(m, feat))
            }
            DgfeMode::Multiply => {
                let b = self.filtration_offset(g, d, factor, 0.0, true);
                Ok(g.tape.mul(b, feat))
            }
            DgfeMode::Concat => {
                let b = self.filtration_offset(g, d, factor, 0.0, true);
                let cat = g.tape.concat_channels(&[feat, b]);
                Ok(self.mix.forward(g, cat))
            }
            DgfeMode::Off => unreachable!(),
        }
    }

    /// Inference-mode enhancement of concrete tensors: `feat` is `N×C×h×w`,
    /// `diff` is `N×1×(factor·h)×(factor·w)`.
    pub fn enhance_tensors<T: Real>(
        &self,
        store: &ParamStore<T>,
        feat: &Tensor<T>,
        diff: &Tensor<T>,
        factor: usize,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let f = g.tape.constant(feat.clone());
        let d = g.tape.constant(diff.clone());
        let out = self.enhance(&mut g, f, d, factor)?;
        Ok(g.value(out).clone())
    }

    pub fn filtration_tensor<T: Real>(&self, store: &ParamStore<T>, diff: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
        let (_, c, h, w) = diff.dims4();
        if c != 1 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "difference map {:?} is not divisible by {factor}",
                diff.shape()
            )));
        }
        let mut g = Graph::new(store, false);
        let d = g.tape.constant(diff.clone());
        let f = self.filtration(&mut g, d, factor);
        Ok(g.value(f).clone())
    }

    pub fn reweight_tensor<T: Real>(&self, store: &ParamStore<T>, feat: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let f = g.tape.constant(feat.clone());
        let w = self.reweight(&mut g, f)?;
        Ok(g.value(w).clone())
    }
}
