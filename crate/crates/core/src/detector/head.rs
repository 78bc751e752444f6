use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Graph};
use crate::nn::{ParamStore, Var};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// 3×3 conv + ReLU layers shared by the classification and box branches.
    pub tower_depth: usize,
    /// Initial foreground probability encoded in the classifier bias.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tower_depth: 4,
            prior: 0.01,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::config(format!("head prior must lie in (0, 1), got {}", self.prior)));
        }
        Ok(())
    }
}

/// Convolutional head shared across pyramid levels.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    tower: Vec<Conv2d>,
    cls: Conv2d,
    reg: Conv2d,
    classes: usize,
}

impl DetectionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        channels: usize,
        anchors: usize,
        classes: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 {
            return Err(Error::config("the detector needs at least one class"));
        }
        let tower = (0..cfg.tower_depth)
            .map(|i| Conv2d::new(store, seed, &format!("head.tower{i}"), channels, channels, 3, 1, true))
            .collect();
        let bias = -((1.0 - cfg.prior) / cfg.prior).ln();
        let cls = Conv2d {
            weight: store.add_normal(seed, "head.cls.weight", &[anchors * classes, channels, 3, 3], 0.01),
            bias: Some(store.add_const("head.cls.bias", &[anchors * classes], bias)),
            stride: 1,
            pad: 1,
        };
        let reg = Conv2d {
            weight: store.add_normal(seed, "head.box.weight", &[anchors * 4, channels, 3, 3], 0.01),
            bias: Some(store.add_const("head.box.bias", &[anchors * 4], 0.0)),
            stride: 1,
            pad: 1,
        };
        Ok(DetectionHead {
            tower,
            cls,
            reg,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Classification logits `N × A × K` and box deltas `N × A × 4`, anchors
    /// ordered by level, row, column and aspect ratio.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, levels: &[Var]) -> (Var, Var) {
        let mut cls = Vec::with_capacity(levels.len());
        let mut reg = Vec::with_capacity(levels.len());
        for &level in levels {
            let mut x = level;
            for conv in &self.tower {
                x = conv.forward(g, x);
                x = g.tape.relu(x);
            }
            cls.push(self.cls.forward(g, x));
            reg.push(self.reg.forward(g, x));
        }
        let cls = g.tape.flatten_levels(&cls, self.classes);
        let reg = g.tape.flatten_levels(&reg, 4);
        (cls, reg)
    }
}
