//! Self-reconstruction head: learned upsampling from a fine pyramid level
//! back to an image of the input's size, and the MSE reconstruction loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvTranspose2d, Graph};
use crate::nn::{ParamStore, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Pyramid level the image is reconstructed from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceLevel {
    P2,
    P3,
}

impl SourceLevel {
    /// Number of doubling blocks needed to return to input resolution.
    pub fn up_blocks(self) -> usize {
        match self {
            SourceLevel::P2 => 2,
            SourceLevel::P3 => 3,
        }
    }

    /// Index into the P2..P6 level list.
    pub fn level_index(self) -> usize {
        match self {
            SourceLevel::P2 => 0,
            SourceLevel::P3 => 1,
        }
    }

    pub fn stride(self) -> usize {
        1 << self.up_blocks()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub source_level: SourceLevel,
    /// Stop the reconstruction loss from reaching the pyramid.
    pub detach_source: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig {
            source_level: SourceLevel::P2,
            detach_source: false,
        }
    }
}

/// Transpose conv (×2) → ReLU∘conv → ReLU∘conv, halving the channel count.
#[derive(Clone, Debug)]
pub struct UpBlock {
    channels: usize,
    up: ConvTranspose2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl UpBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, channels: usize) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::config(format!(
                "up block needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(UpBlock {
            channels,
            up: ConvTranspose2d::new(store, seed, &format!("{name}.up"), channels, half),
            conv1: Conv2d::new(store, seed, &format!("{name}.conv1"), half, half, 3, 1, true),
            conv2: Conv2d::new(store, seed, &format!("{name}.conv2"), half, half, 3, 1, true),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.channels
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "up block expects N×{}×h×w, got {shape:?}",
                self.channels
            )));
        }
        let y = self.up.forward(g, x);
        let y = self.conv1.forward(g, y);
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y);
        Ok(g.tape.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct ReconHead {
    source: SourceLevel,
    blocks: Vec<UpBlock>,
    out: Conv2d,
}

impl ReconHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, channels: usize, source: SourceLevel) -> Result<Self> {
        let n = source.up_blocks();
        if channels == 0 || channels % (1 << n) != 0 {
            return Err(Error::config(format!(
                "reconstruction from {source:?} needs channels divisible by {}, got {channels}",
                1 << n
            )));
        }
        let blocks = (0..n)
            .map(|i| UpBlock::new(store, seed, &format!("recon.block{i}"), channels >> i))
            .collect::<Result<Vec<_>>>()?;
        // small output weights start the image at sigmoid(0) = 0.5, off saturation
        let out = Conv2d {
            weight: store.add_normal(seed, "recon.out.weight", &[3, channels >> n, 3, 3], 0.01),
            bias: Some(store.add_const("recon.out.bias", &[3], 0.0)),
            stride: 1,
            pad: 1,
        };
        Ok(ReconHead { source, blocks, out })
    }

    pub fn source(&self) -> SourceLevel {
        self.source
    }

    /// `sigmoid(conv(up^n(source)))`: an `N × 3 × H × W` image in `(0, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, source: Var) -> Result<Var> {
        let mut x = source;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let y = self.out.forward(g, x);
        Ok(g.tape.sigmoid(y))
    }

    /// Inference-mode reconstruction of a concrete `N × C × h × w` level.
    pub fn reconstruct<T: Real>(&self, store: &ParamStore<T>, source: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let x = g.tape.constant(source.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Mean over every element of the squared difference.
pub fn recon_loss<T: Real>(recon: &Tensor<T>, original: &Tensor<T>) -> Result<T> {
    if recon.shape() != original.shape() {
        return Err(Error::shape(format!(
            "reconstruction {:?} and original {:?} differ in shape",
            recon.shape(),
            original.shape()
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(recon.clone());
    let b = tape.constant(original.clone());
    let l = tape.mse(a, b);
    Ok(tape.scalar(l))
}
