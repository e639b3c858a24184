//! Helpers shared by integration targets.

use charm_core::cnn::{BackboneConfig, Model, ModelKind, ModelSpec};
use charm_core::diffcore::gradcheck::{central_difference, Probe};
use charm_core::signal::stream_rng;
use charm_core::{ParamStore, Tape, Tensor};
use rand::Rng;

fn composite(kind: ModelKind) -> (Model, ParamStore<f64>) {
    let mut spec = ModelSpec::new(kind, 3, 2);
    spec.backbone = BackboneConfig { maps: vec![6], ..BackboneConfig::default() };
    spec.charm.embed_maps = 5;
    spec.charm.dim = 6;
    spec.charm.canonical = 4;
    spec.charm.mlp_hidden = 7;
    let mut rng = stream_rng(11, 0);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, spec, &mut rng).unwrap();
    // move every parameter off its structured initial value
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    (model, store)
}

fn loss(model: &Model, store: &ParamStore<f64>, x: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new(store);
    let xv = tape.input(x.clone()).unwrap();
    let out = model.forward(&mut tape, xv).unwrap();
    let mut l = tape.weighted_cross_entropy(out.logits, &[1], &[0.5, 2.0, 1.0]).unwrap();
    if let Some(p) = out.p {
        let a = tape.mean_abs(p).unwrap();
        let a = tape.scale(a, 0.3).unwrap();
        l = tape.add(l, a).unwrap();
    }
    tape.value(l).unwrap().data()[0]
}

/// Analytic against central-difference gradient for every parameter
/// coordinate of a small composite model: 2 channels x 40 samples, one
/// backbone block, weighted cross-entropy plus an L1 term on p.
pub fn probes(kind: ModelKind) -> Vec<Probe> {
    let (model, mut store) = composite(kind);
    let mut rng = stream_rng(12, 0);
    let x = Tensor::new(vec![2, 40], (0..80).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let grads = {
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone()).unwrap();
        let out = model.forward(&mut tape, xv).unwrap();
        let mut l = tape.weighted_cross_entropy(out.logits, &[1], &[0.5, 2.0, 1.0]).unwrap();
        if let Some(p) = out.p {
            let a = tape.mean_abs(p).unwrap();
            let a = tape.scale(a, 0.3).unwrap();
            l = tape.add(l, a).unwrap();
        }
        tape.backward(l).unwrap()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let analytic = grads.param(id).expect("every parameter reaches the loss").to_vec();
        for (index, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&mut store, id, index, 1e-4, &mut |s| loss(&model, s, &x));
            out.push(Probe { param: store.get(id).name.clone(), index, analytic: a, numeric });
        }
    }
    out
}

/// Fraction of probes within `tol` relative error.
pub fn pass_rate(probes: &[Probe], tol: f64) -> f64 {
    probes.iter().filter(|p| p.relative_error(1e-7) <= tol).count() as f64 / probes.len() as f64
}
