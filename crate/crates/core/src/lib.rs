//! Self-reconstructed tiny object detection.
//!
//! A small residual backbone and feature pyramid feed a reconstruction head
//! that rebuilds the input image from the finest pyramid level. The absolute
//! difference between reconstruction and input marks where small objects lost
//! information; that map gates an element-wise attention on the finest level
//! before a single-stage anchor head predicts boxes.

pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod detector;
pub mod dgfe;
pub mod diffmap;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod par;
pub mod recon;
pub mod synthdata;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
