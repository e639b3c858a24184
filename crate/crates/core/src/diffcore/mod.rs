//! Dense tensors with reverse-mode differentiation over the handful of
//! operators the remapping network and its classifier need.

pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{read_checkpoint, Gradients, Init, Param, ParamId, ParamKind, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
