//! Training and evaluation throughput on the rayon pool versus a single
//! thread. Build with `--no-default-features` to time the plain sequential
//! fallback instead; both groups then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use charm_core::augment::NoiseSpec;
use charm_core::cnn::{BackboneConfig, ModelKind, ModelSpec};
use charm_core::signal::{generate_synthetic, Recording, SynthSpec};
use charm_core::train::{evaluate, train_model, TrainConfig, Trained};

fn setup(kind: ModelKind) -> (Vec<Recording>, Trained, TrainConfig) {
    let ds = generate_synthetic(&SynthSpec { recordings_per_class: 4, samples: 500, ..SynthSpec::synth_a() }).unwrap();
    let mut spec = ModelSpec::new(kind, 5, 24);
    spec.backbone = BackboneConfig::narrowed(8);
    spec.charm.embed_maps = 16;
    let cfg = TrainConfig { epochs: 1, batch_size: 20, window: 250, ..TrainConfig::default() };
    (ds.recordings, Trained::init(spec, 0).unwrap(), cfg)
}

fn pools() -> [(&'static str, rayon::ThreadPool); 2] {
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    [("parallel", all), ("sequential", one)]
}

fn train_epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for kind in [ModelKind::Baseline, ModelKind::CharmCq] {
        let (recs, init, cfg) = setup(kind);
        let refs: Vec<&Recording> = recs.iter().collect();
        group.throughput(Throughput::Elements(refs.len() as u64));
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(name, kind.name()), &refs, |b, refs| {
                b.iter(|| {
                    let mut t = init.clone();
                    pool.install(|| train_model(&mut t, refs, 5, &cfg).unwrap())
                })
            });
        }
    }
    group.finish();
}

fn eval_windows(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for kind in [ModelKind::Baseline, ModelKind::CharmCq] {
        let (recs, trained, cfg) = setup(kind);
        let refs: Vec<&Recording> = recs.iter().collect();
        let noise = NoiseSpec::noisy().with_seed(1);
        group.throughput(Throughput::Elements((refs.len() * 2) as u64));
        for (name, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(name, kind.name()), &refs, |b, refs| {
                b.iter(|| pool.install(|| evaluate(&trained, refs, 5, &noise, None, cfg.window, true).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, train_epoch, eval_windows);
criterion_main!(benches);
