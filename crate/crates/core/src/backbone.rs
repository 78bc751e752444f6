//! Small residual backbone and top-down feature pyramid producing P2–P6.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormRelu, Graph, Norm, NormKind};
use crate::nn::{ParamStore, Var};
use crate::synthdata::ImageTensor;
use crate::tensor::{Real, Tensor};

/// Strides of P2..P6.
pub const LEVEL_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];

/// Input sides must be multiples of the coarsest stride.
pub const SIZE_DIVISOR: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel count of every pyramid level.
    pub channels: usize,
    /// Residual blocks at strides 4, 8, 16 and 32.
    pub stage_depths: [usize; 4],
    pub norm: NormKind,
    /// Groups for group normalization.
    pub groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 64,
            stage_depths: [1, 1, 1, 1],
            norm: NormKind::Batch,
            groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::config(format!(
                "backbone channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.norm == NormKind::Group
            && (self.groups == 0 || self.channels % self.groups != 0 || (self.channels / 2) % self.groups != 0)
        {
            return Err(Error::config(format!(
                "group norm needs {} groups to divide {} and {} channels",
                self.groups,
                self.channels / 2,
                self.channels
            )));
        }
        Ok(())
    }
}

/// Pyramid levels P2..P6 as tape variables.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: [Var; 5],
}

/// Pyramid levels P2..P6 as concrete tensors, each `N × C × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn level(&self, index: usize) -> &Tensor<T> {
        &self.levels[index]
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: ConvNormRelu,
    conv2: Conv2d,
    norm2: Norm,
}

impl ResidualBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, cfg: &BackboneConfig) -> Self {
        let c = cfg.channels;
        ResidualBlock {
            conv1: ConvNormRelu::new(store, seed, &format!("{name}.a"), c, c, 1, cfg.norm, cfg.groups),
            conv2: Conv2d::new(store, seed, &format!("{name}.b.conv"), c, c, 3, 1, false),
            norm2: Norm::new(store, &format!("{name}.b.norm"), c, cfg.norm, cfg.groups),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.conv1.forward(g, x);
        let y = self.conv2.forward(g, y);
        let y = self.norm2.forward(g, y);
        let y = g.tape.add(y, x);
        g.tape.relu(y)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<ConvNormRelu>,
    blocks: Vec<ResidualBlock>,
}

/// Backbone plus feature pyramid network.
#[derive(Clone, Debug)]
pub struct BackboneFpn {
    cfg: BackboneConfig,
    stem1: ConvNormRelu,
    stem2: ConvNormRelu,
    stages: Vec<Stage>,
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
}

impl BackboneFpn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem1 = ConvNormRelu::new(store, seed, "backbone.stem1", 3, c / 2, 2, cfg.norm, cfg.groups);
        let stem2 = ConvNormRelu::new(store, seed, "backbone.stem2", c / 2, c, 2, cfg.norm, cfg.groups);
        let stages = (0..4)
            .map(|s| Stage {
                down: (s > 0).then(|| {
                    ConvNormRelu::new(store, seed, &format!("backbone.stage{s}.down"), c, c, 2, cfg.norm, cfg.groups)
                }),
                blocks: (0..cfg.stage_depths[s])
                    .map(|b| ResidualBlock::new(store, seed, &format!("backbone.stage{s}.block{b}"), cfg))
                    .collect(),
            })
            .collect();
        let lateral = (0..4)
            .map(|l| Conv2d::new(store, seed, &format!("fpn.lateral{}", l + 2), c, c, 1, 1, true))
            .collect();
        let output = (0..4)
            .map(|l| Conv2d::new(store, seed, &format!("fpn.output{}", l + 2), c, c, 3, 1, true))
            .collect();
        Ok(BackboneFpn {
            cfg: cfg.clone(),
            stem1,
            stem2,
            stages,
            lateral,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Check an `N × 3 × H × W` input shape.
    pub fn check_input(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("expected N×3×H×W input, got {shape:?}")));
        }
        if shape[2] == 0 || shape[3] == 0 || shape[2] % SIZE_DIVISOR != 0 || shape[3] % SIZE_DIVISOR != 0 {
            return Err(Error::shape(format!(
                "input sides must be positive multiples of {SIZE_DIVISOR}, got {}×{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<PyramidVars> {
        Self::check_input(g.value(image).shape())?;
        let mut x = self.stem1.forward(g, image);
        x = self.stem2.forward(g, x);
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                x = down.forward(g, x);
            }
            for block in &stage.blocks {
                x = block.forward(g, x);
            }
            feats.push(x);
        }
        // top-down pathway, coarsest first
        let mut merged: Vec<Var> = Vec::with_capacity(4);
        let mut above: Option<Var> = None;
        for l in (0..4).rev() {
            let lat = self.lateral[l].forward(g, feats[l]);
            let m = match above {
                Some(a) => {
                    let up = g.tape.upsample2x(a);
                    g.tape.add(lat, up)
                }
                None => lat,
            };
            above = Some(m);
            merged.push(m);
        }
        merged.reverse();
        let p: Vec<Var> = merged
            .iter()
            .enumerate()
            .map(|(l, &m)| self.output[l].forward(g, m))
            .collect();
        let p6 = g.tape.max_pool(p[3], 2, 2);
        Ok(PyramidVars {
            levels: [p[0], p[1], p[2], p[3], p6],
        })
    }

    /// Inference-mode pyramid of a single `3 × H × W` image.
    pub fn extract_pyramid<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        if image.shape().len() != 3 {
            return Err(Error::shape(format!("expected 3×H×W image, got {:?}", image.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        Self::check_input(&shape)?;
        let mut g = Graph::new(store, false);
        let x = g.tape.constant(image.clone().reshape(&shape)?);
        let pv = self.forward(&mut g, x)?;
        Ok(FeaturePyramid {
            levels: pv.levels.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

/// Convert an `f32` image into a batch-of-one tensor of `T`.
pub fn image_batch<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images
        .iter()
        .map(|img| {
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            img.cast::<T>().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}
