//! Minimal tensor autodiff engine: kernels, parameter storage and the tape.

pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tape;

pub use params::{ParamId, ParamStore};
pub use tape::{FocalParams, Gradients, Resize, Tape, Threshold, Var};
