//! Hyperspectral image super-resolution with dynamic channel-sparse attention
//! and frequency-enhanced feed-forward blocks, built on a small reverse-mode
//! tensor engine.

pub mod data;
pub mod dcsa;
pub mod error;
pub mod feffn;
pub mod layers;
pub mod model;
pub mod objective;
pub mod par;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Activation, GateAnchor, ParamStore, Parameter, Tape, Tensor, Var};
