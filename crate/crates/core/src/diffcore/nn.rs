//! Parameterized layers built from tape operations.

use rand::Rng;

use super::params::{Init, ParamId, ParamKind, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Scalar;
use crate::error::TensorError;

/// Variance epsilon for every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Valid 1-D convolution with a per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[cout, cin, kernel], ParamKind::Weight, Init::FanIn(cin * kernel), rng);
        let bias = store.add(format!("{name}.bias"), &[cout], ParamKind::Bias, Init::Zeros, rng);
        Self { weight, bias, stride }
    }

    /// `x` is `[C_in, L]` or `[B, C_in, L]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.conv1d(x, w, self.stride)?;
        let channel_axis = tape.shape(y)?.len() - 2;
        tape.add_bias(y, b, channel_axis)
    }
}

/// `y = x W^T + b` for row-vector batches `x: [R, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self::with_init(store, name, din, dout, Init::FanIn(din), rng)
    }

    pub fn with_init<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[dout, din], ParamKind::Weight, init, rng);
        let bias = store.add(format!("{name}.bias"), &[dout], ParamKind::Bias, Init::Zeros, rng);
        Self { weight, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul_t(x, w, false, true)?;
        tape.add_bias(y, b, 1)
    }
}

/// Normalization over one axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let gain = store.add(format!("{name}.gain"), &[width], ParamKind::Gain, Init::Constant(1.0), rng);
        let bias = store.add(format!("{name}.bias"), &[width], ParamKind::Bias, Init::Zeros, rng);
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var, axis: usize) -> Result<Var, TensorError> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.normalize(x, axis, NORM_EPS, Some((g, b)))
    }
}

/// Learnable per-channel PReLU.
#[derive(Clone, Copy, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let slope = store.add(format!("{name}.slope"), &[channels], ParamKind::Slope, Init::Constant(PRELU_INIT), rng);
        Self { slope }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var, axis: usize) -> Result<Var, TensorError> {
        let s = tape.param(self.slope);
        tape.prelu(x, s, axis)
    }
}
