//! Hybrid convolutional-LSTM / shifted-window transformer U-Net for medical
//! image segmentation, built on a small reverse-mode autodiff engine.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ForwardCtx, ParamDef, ParamStore};
pub use tensor::Tensor;
