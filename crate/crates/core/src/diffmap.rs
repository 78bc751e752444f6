//! Difference maps between a reconstruction and its input: the pixel map
//! (channel mean of absolute differences) and the high-frequency map (the same
//! construction applied after an ideal radial high-pass filter).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spectral::{self, Band};
use crate::nn::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffFlavor {
    Pixel,
    HighFrequency,
}

impl DiffFlavor {
    pub fn label(self) -> &'static str {
        match self {
            DiffFlavor::Pixel => "pixel",
            DiffFlavor::HighFrequency => "high_frequency",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HighPassConfig {
    /// Fraction of the half-diagonal radius below which bins are removed.
    pub cutoff: f64,
}

impl Default for HighPassConfig {
    fn default() -> Self {
        HighPassConfig { cutoff: 0.1 }
    }
}

impl HighPassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::config(format!(
                "high-pass cutoff must lie in [0, 1], got {}",
                self.cutoff
            )));
        }
        Ok(())
    }
}

/// Non-negative `1 × H × W` map.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap<T> {
    pub data: Tensor<T>,
    pub flavor: DiffFlavor,
    pub source_shape: (usize, usize),
}

impl<T: Real> DifferenceMap<T> {
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data.data()[y * self.source_shape.1 + x]
    }
}

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::shape(format!(
            "difference map needs two equal C×H×W images, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2]))
}

fn batched<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    img.clone().reshape(&shape).expect("same length")
}

/// Channel mean of `|recon − original|` at every pixel.
pub fn pixel_diff<T: Real>(recon: &Tensor<T>, original: &Tensor<T>) -> Result<DifferenceMap<T>> {
    let (_, h, w) = check_pair(recon, original)?;
    let mut tape = Tape::new();
    let a = tape.constant(batched(recon));
    let b = tape.constant(batched(original));
    let d = tape.pixel_diff(a, b);
    Ok(DifferenceMap {
        data: tape.value(d).clone().reshape(&[1, h, w])?,
        flavor: DiffFlavor::Pixel,
        source_shape: (h, w),
    })
}

fn filtered<T: Real>(img: &Tensor<T>, cutoff: f64, band: Band) -> Tensor<T> {
    let mut out = img.clone();
    let (h, w) = (img.shape()[img.shape().len() - 2], img.shape()[img.shape().len() - 1]);
    spectral::filter_planes(out.data_mut(), h, w, cutoff, band);
    out
}

/// Per-channel ideal high-pass: every bin within `cutoff` of the DC bin is
/// zeroed and the real part of the inverse transform returned.
pub fn highpass<T: Real>(img: &Tensor<T>, cfg: &HighPassConfig) -> Tensor<T> {
    filtered(img, cfg.cutoff, Band::High)
}

/// Complement of [`highpass`]: keeps exactly the bins it removes.
pub fn lowpass<T: Real>(img: &Tensor<T>, cfg: &HighPassConfig) -> Tensor<T> {
    filtered(img, cfg.cutoff, Band::Low)
}

/// Pixel difference of the high-passed images.
pub fn highfreq_diff<T: Real>(
    recon: &Tensor<T>,
    original: &Tensor<T>,
    cfg: &HighPassConfig,
) -> Result<DifferenceMap<T>> {
    check_pair(recon, original)?;
    cfg.validate()?;
    let mut map = pixel_diff(&highpass(recon, cfg), &highpass(original, cfg))?;
    map.flavor = DiffFlavor::HighFrequency;
    Ok(map)
}

/// Difference map of the requested flavor.
pub fn difference_map<T: Real>(
    recon: &Tensor<T>,
    original: &Tensor<T>,
    flavor: DiffFlavor,
    cfg: &HighPassConfig,
) -> Result<DifferenceMap<T>> {
    match flavor {
        DiffFlavor::Pixel => pixel_diff(recon, original),
        DiffFlavor::HighFrequency => highfreq_diff(recon, original, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, h, w], |_| rng.gen())
    }

    #[test]
    fn identical_images_give_zero_maps() {
        let a = random_image(1, 16, 16);
        assert!(pixel_diff(&a, &a).unwrap().data.data().iter().all(|&v| v == 0.0));
        let hf = highfreq_diff(&a, &a, &HighPassConfig::default()).unwrap();
        assert!(hf.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_channel_difference_is_averaged() {
        let a = Tensor::<f64>::zeros(&[3, 2, 2]);
        let mut b = a.clone();
        b.data_mut()[0] = 0.3;
        let d = pixel_diff(&a, &b).unwrap();
        assert!((d.get(0, 0) - 0.1).abs() < 1e-15);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[3, 4, 4]);
        let b = Tensor::<f64>::zeros(&[3, 4, 8]);
        assert!(matches!(pixel_diff(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(
            highfreq_diff(&a, &b, &HighPassConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn constant_image_and_full_cutoff_vanish() {
        let c = Tensor::<f64>::full(&[3, 8, 8], 0.7);
        for cutoff in [0.0, 0.1, 0.5, 1.0] {
            let hp = highpass(&c, &HighPassConfig { cutoff });
            assert!(hp.data().iter().all(|v| v.abs() < 1e-12));
        }
        let a = random_image(2, 8, 8);
        let hp = highpass(&a, &HighPassConfig { cutoff: 1.0 });
        assert!(hp.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_vanishes_from_high_frequency_map() {
        let a = random_image(3, 16, 16);
        let b = a.map(|v| v + 0.25);
        let hf = highfreq_diff(&b, &a, &HighPassConfig { cutoff: 0.0 }).unwrap();
        assert!(hf.data.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn highpass_energy_is_non_increasing_in_cutoff() {
        let a = random_image(4, 16, 16);
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let e = highpass(&a, &HighPassConfig { cutoff: i as f64 / 20.0 }).sq_norm();
            assert!(e <= prev + 1e-9, "energy rose at cutoff {}", i as f64 / 20.0);
            prev = e;
        }
    }

    #[test]
    fn cutoff_is_validated() {
        assert!(HighPassConfig { cutoff: 1.5 }.validate().is_err());
        assert!(HighPassConfig { cutoff: -0.1 }.validate().is_err());
    }
}
