//! Central finite differences, used to validate backward passes.
//!
//! Everything here only evaluates forward passes; it never touches the tape's
//! backward code, so it can serve as an independent reference.

use super::params::{ParamId, ParamStore};

/// One compared coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Central difference of `f` with respect to one parameter coordinate.
pub fn central_difference(
    store: &mut ParamStore<f64>,
    id: ParamId,
    index: usize,
    h: f64,
    f: &mut impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let orig = store.value(id).data()[index];
    store.get_mut(id).value.data_mut()[index] = orig + h;
    let plus = f(store);
    store.get_mut(id).value.data_mut()[index] = orig - h;
    let minus = f(store);
    store.get_mut(id).value.data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// Central difference of `f` with respect to one coordinate of a plain vector.
pub fn central_difference_vec(x: &mut [f64], index: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[index];
    x[index] = orig + h;
    let plus = f(x);
    x[index] = orig - h;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * h)
}
