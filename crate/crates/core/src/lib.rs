//! Channel remapping for multichannel signals whose channel order and count
//! vary between recordings.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`diffcore`]), the remapping module ([`charm`]), a 1-D CNN classifier
//! ([`cnn`]), channel shuffling/masking ([`augment`]), dataset storage and a
//! synthetic data generator ([`signal`]), training and evaluation
//! ([`train`]) and the experiment protocols used by the CLI ([`experiment`]).

pub mod augment;
pub mod charm;
pub mod cnn;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod io_util;
pub mod par;
pub mod signal;
pub mod train;

pub use diffcore::{ParamStore, Scalar, Tape, Tensor, Var};
pub use error::{DataError, ModelError, TensorError};
