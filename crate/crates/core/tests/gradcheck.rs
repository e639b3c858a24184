//! Finite-difference checks of whole models in 64-bit precision.

mod common;

use charm_core::cnn::ModelKind;
use charm_core::diffcore::gradcheck::Probe;

fn check(kind: ModelKind) {
    let probes = common::probes(kind);
    let bad: Vec<&Probe> = probes.iter().filter(|p| p.relative_error(1e-7) > 1e-4).collect();
    let pass = 1.0 - bad.len() as f64 / probes.len() as f64;
    assert!(pass >= 0.99, "{kind:?}: {} of {} coordinates off, first {:?}", bad.len(), probes.len(), bad.first());
}

#[test]
fn baseline_gradients() {
    check(ModelKind::Baseline);
}

#[test]
fn charm_base_gradients() {
    check(ModelKind::CharmBase);
}

#[test]
fn charm_ckv_gradients() {
    check(ModelKind::CharmCkv);
}

#[test]
fn charm_cq_gradients() {
    check(ModelKind::CharmCq);
}
