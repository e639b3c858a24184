//! Optimization, evaluation and the fold/transfer protocols.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_noise, cms_augment, NoiseSpec, Representation};
use crate::cnn::{Model, ModelKind, ModelSpec, HEAD_PREFIX};
use crate::diffcore::{Gradients, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{DataError, ModelError, TensorError};
use crate::io_util::write_atomic;
use crate::signal::{eval_windows, sample_window, stratified_kfold, stream_rng, Dataset, Montage, Recording};

/// Samples per gradient work unit. Fixed so that the reduction order, and so
/// the result, never depends on the number of threads.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    Cms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub window: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub l1_weight: f64,
    pub l2_weight: f64,
    pub class_weighting: bool,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 64,
            epochs: 15,
            window: 500,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l1_weight: 1e-4,
            l2_weight: 1e-4,
            class_weighting: true,
            augment: Augment::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [self.lr, self.adam_eps].iter().all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.batch_size == 0 || self.window == 0 {
            return Err(ModelError::Config("learning rate, eps, batch size and window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(ModelError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.l1_weight >= 0.0 && self.l2_weight >= 0.0) {
            return Err(ModelError::Config("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One bias-corrected Adam update of every trainable parameter that received a gradient.
pub fn adam_step(store: &mut ParamStore<f32>, grads: &Gradients<f32>, state: &mut AdamState, cfg: &TrainConfig) -> Result<(), ModelError> {
    if grads.params.len() != store.len() {
        return Err(ModelError::Config(format!("{} gradient slots for {} parameters", grads.params.len(), store.len())));
    }
    if state.m.is_empty() {
        state.m = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let Some(g) = grads.param(id) else { continue };
        let param = store.get_mut(id);
        if !param.trainable {
            continue;
        }
        if g.len() != param.value.len() || state.m[i].len() != g.len() {
            return Err(ModelError::Config(format!("gradient shape mismatch for {}", param.name)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in param.value.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let step = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// `w_k = total / (K * count_k)`.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>, DataError> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(DataError::InvalidDataset(format!("label {l} outside {classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::InvalidDataset(format!("class {k} has no examples")));
    }
    let total = labels.len() as f64;
    Ok(counts.iter().map(|&c| total / (classes as f64 * c as f64)).collect())
}

/// `l2 · Σ w²` over trainable decayed parameters.
pub fn l2_penalty<S: Scalar>(store: &ParamStore<S>, l2: f64) -> f64 {
    l2 * store
        .iter()
        .filter(|(_, p)| p.decay && p.trainable)
        .map(|(_, p)| p.value.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
}

/// Builds the full objective on a tape: weighted cross-entropy over the batch,
/// plus `l1 · mean|p|` averaged over the batch's matrices, plus the L2 term.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<'_, S>,
    logits: Var,
    targets: &[usize],
    weights: &[f64],
    ps: &[Var],
    cfg: &TrainConfig,
) -> Result<Var, TensorError> {
    let mut loss = tape.weighted_cross_entropy(logits, targets, weights)?;
    if cfg.l1_weight > 0.0 && !ps.is_empty() {
        for &p in ps {
            let l1 = tape.mean_abs(p)?;
            let l1 = tape.scale(l1, cfg.l1_weight / ps.len() as f64)?;
            loss = tape.add(loss, l1)?;
        }
    }
    if cfg.l2_weight > 0.0 {
        let store = tape.params();
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.decay && p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let w = tape.param(id);
            let sq = tape.sum_squares(w)?;
            let sq = tape.scale(sq, cfg.l2_weight)?;
            loss = tape.add(loss, sq)?;
        }
    }
    Ok(loss)
}

/// Loss gradient of one sample, scaled for a batch of `batch` samples,
/// without the L2 term. Returns `(gradients, loss share, predicted class)`.
fn sample_gradient(
    model: &Model,
    store: &ParamStore<f32>,
    x: Tensor<f32>,
    target: usize,
    weights: &[f64],
    batch: usize,
    l1: f64,
) -> Result<(Gradients<f32>, f64, usize), TensorError> {
    let mut tape = Tape::new(store);
    let xv = tape.input(x)?;
    let out = model.forward(&mut tape, xv)?;
    let pred = argmax(tape.value(out.logits)?.data());
    let mut loss = tape.weighted_cross_entropy(out.logits, &[target], weights)?;
    if let (Some(p), true) = (out.p, l1 > 0.0) {
        let l = tape.mean_abs(p)?;
        let l = tape.scale(l, l1)?;
        loss = tape.add(loss, l)?;
    }
    let value = tape.value(loss)?.data()[0].as_f64() / batch as f64;
    let grads = tape.backward_seeded(loss, 1.0 / batch as f64)?;
    Ok((grads, value, pred))
}

pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Trainable model with its parameters.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl Trained {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let (model, store) = Model::init(spec, seed)?;
        Ok(Self { model, store })
    }

    /// Writes `model.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let spec = serde_json::to_string_pretty(self.model.spec()).expect("spec serializes");
        let path = dir.join("model.json");
        write_atomic(&path, spec.as_bytes()).map_err(|e| ModelError::Data(DataError::io(&path, e)))?;
        self.store.save(&dir.join("params.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let path = dir.join("model.json");
        let text = std::fs::read_to_string(&path).map_err(|e| ModelError::Data(DataError::io(&path, e)))?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|source| ModelError::Data(DataError::Json { path, source }))?;
        let mut t = Self::init(spec, 0)?;
        t.store.load(&dir.join("params.bin"))?;
        Ok(t)
    }
}

/// Fits `trained` on `recordings` (labels taken from the recordings).
pub fn train_model(trained: &mut Trained, recordings: &[&Recording], classes: usize, cfg: &TrainConfig) -> Result<Vec<EpochRecord>, ModelError> {
    cfg.validate()?;
    if recordings.is_empty() {
        return Err(ModelError::Config("no training recordings".into()));
    }
    let labels: Vec<usize> = recordings.iter().map(|r| r.label).collect();
    let weights = if cfg.class_weighting { class_weights(&labels, classes)? } else { vec![1.0; classes] };
    let l1 = if trained.model.charm().is_some() { cfg.l1_weight } else { 0.0 };
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..recordings.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, 0x5eed_0000 + epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n = batch.len();
            let model = &trained.model;
            let store = &trained.store;
            let chunks = crate::par::map_chunks(batch, GRAD_CHUNK, |chunk| {
                let mut acc = Gradients::empty(store.len());
                let (mut loss, mut hits) = (0.0, 0);
                for &i in chunk {
                    let rec = recordings[i];
                    let mut rng = stream_rng(cfg.seed, ((epoch as u64) << 32) | i as u64);
                    let mut x = sample_window(rec, cfg.window, &mut rng)?;
                    if cfg.augment == Augment::Cms {
                        x = cms_augment(&x, &mut rng);
                    }
                    let (g, l, pred) = sample_gradient(model, store, x, rec.label, &weights, n, l1)?;
                    acc.merge(&g);
                    loss += l;
                    hits += usize::from(pred == rec.label);
                }
                Ok::<_, ModelError>((acc, loss, hits))
            });
            let mut grads = Gradients::empty(trained.store.len());
            let mut batch_loss = l2_penalty(&trained.store, cfg.l2_weight);
            for r in chunks {
                let (g, l, hits) = r.map_err(|e| if e.is_numeric() { ModelError::Diverged { epoch, batch: b } } else { e })?;
                grads.merge(&g);
                batch_loss += l;
                correct += hits;
            }
            add_l2_gradient(&trained.store, &mut grads, cfg.l2_weight);
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(ModelError::Diverged { epoch, batch: b });
            }
            adam_step(&mut trained.store, &grads, &mut adam, cfg)?;
            loss_sum += batch_loss * n as f64;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / recordings.len() as f64,
            accuracy: correct as f64 / recordings.len() as f64,
        });
    }
    Ok(history)
}

fn add_l2_gradient(store: &ParamStore<f32>, grads: &mut Gradients<f32>, l2: f64) {
    if l2 == 0.0 {
        return;
    }
    for (id, p) in store.iter() {
        if !(p.decay && p.trainable) {
            continue;
        }
        let extra: Vec<f32> = p.value.data().iter().map(|&w| (2.0 * l2 * w as f64) as f32).collect();
        grads.accumulate(id, &extra);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean of per-class recalls when weighted, plain accuracy otherwise.
    pub accuracy: f64,
    pub unweighted: f64,
    pub recalls: Vec<Option<f64>>,
    pub windows: usize,
}

/// Weighted (mean recall over present classes) and plain accuracy.
pub fn score(predictions: &[usize], targets: &[usize], classes: usize) -> EvalResult {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &t) in predictions.iter().zip(targets) {
        counts[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let recalls: Vec<Option<f64>> = hits.iter().zip(&counts).map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64)).collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let weighted = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let unweighted = if targets.is_empty() { 0.0 } else { hits.iter().sum::<usize>() as f64 / targets.len() as f64 };
    EvalResult { accuracy: weighted, unweighted, recalls, windows: targets.len() }
}

/// Zero rows appended so that `x` has `channels` rows.
pub fn pad_channels(x: &Tensor<f32>, channels: usize) -> Result<Tensor<f32>, DataError> {
    let (n, t) = x.dims2()?;
    if n > channels {
        return Err(DataError::InvalidDataset(format!("{n} channels cannot be padded down to {channels}")));
    }
    let mut data = x.data().to_vec();
    data.resize(channels * t, 0.0);
    Ok(Tensor::new(vec![channels, t], data)?)
}

/// Scores every non-overlapping window of `recordings` under `noise`.
///
/// Baseline models always see masked channels as zero rows and, when
/// `pad_to` is set, get zero rows appended up to their input width.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    trained: &Trained,
    recordings: &[&Recording],
    classes: usize,
    noise: &NoiseSpec,
    montage: Option<&Montage>,
    window: usize,
    weighted: bool,
) -> Result<EvalResult, ModelError> {
    noise.validate()?;
    let spec = trained.model.spec();
    if spec.classes != classes {
        return Err(ModelError::Incompatible(format!("model predicts {} classes, data has {classes}", spec.classes)));
    }
    let baseline = spec.kind == ModelKind::Baseline;
    let noise = if baseline { noise.clone().with_representation(Representation::Zero) } else { noise.clone() };
    let per_rec = crate::par::map_range(recordings.len(), |r| {
        let rec = recordings[r];
        let mut preds = Vec::new();
        for (w, x) in eval_windows(rec, window)?.into_iter().enumerate() {
            let x = if noise.is_clean() {
                x
            } else {
                let mut rng = stream_rng(noise.seed, ((r as u64) << 20) | w as u64);
                apply_noise(&x, &noise, montage, &mut rng)?
            };
            let x = if baseline { pad_channels(&x, spec.input_channels)? } else { x };
            let (logits, _) = trained.model.predict(&trained.store, &x)?;
            preds.push((argmax(&logits), rec.label));
        }
        Ok::<_, ModelError>(preds)
    });
    let mut predictions = Vec::new();
    let mut targets = Vec::new();
    for r in per_rec {
        for (p, t) in r? {
            predictions.push(p);
            targets.push(t);
        }
    }
    let mut res = score(&predictions, &targets, classes);
    if !weighted {
        res.accuracy = res.unweighted;
    }
    Ok(res)
}

/// Per-fold outcome of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub test_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Mean and sample standard deviation (`n - 1`).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldMetrics {
    pub model: ModelSpec,
    pub config: TrainConfig,
    pub dataset: String,
    pub folds: Vec<FoldRecord>,
    pub mean: f64,
    pub std: f64,
}

/// Deterministic per-fold seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains one model per held-out fold and reports clean test accuracy.
/// Returns the metrics and the trained models in fold order.
pub fn run_kfold(dataset: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, k: usize) -> Result<(KFoldMetrics, Vec<Trained>), ModelError> {
    let labels = dataset.labels();
    let folds = stratified_kfold(&labels, k, cfg.seed)?;
    let classes = dataset.class_count();
    let runs = crate::par::map_range(k, |f| {
        let mut trained = Trained::init(spec.clone(), fold_seed(cfg.seed, f))?;
        let train: Vec<&Recording> = crate::signal::complement(labels.len(), &folds[f]).into_iter().map(|i| &dataset.recordings[i]).collect();
        let test: Vec<&Recording> = folds[f].iter().map(|&i| &dataset.recordings[i]).collect();
        let fold_cfg = TrainConfig { seed: fold_seed(cfg.seed, f), ..cfg.clone() };
        let history = train_model(&mut trained, &train, classes, &fold_cfg)?;
        let acc = evaluate(&trained, &test, classes, &NoiseSpec::clean(), None, cfg.window, cfg.class_weighting)?;
        Ok::<_, ModelError>((FoldRecord { fold: f, test_indices: folds[f].clone(), test_accuracy: acc.accuracy, history }, trained))
    });
    let mut records = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for r in runs {
        let (rec, model) = r?;
        records.push(rec);
        models.push(model);
    }
    let (mean, std) = mean_std(&records.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    let metrics = KFoldMetrics { model: spec.clone(), config: cfg.clone(), dataset: dataset.manifest.name.clone(), folds: records, mean, std };
    Ok((metrics, models))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Only a new linear head is trained.
    Fixed,
    /// Every parameter is trained.
    Finetune,
}

/// Copies `source` into a model for `classes` target classes with a fresh head,
/// frozen except for the head in fixed mode.
pub fn transfer_init(source: &Trained, classes: usize, mode: TransferMode, seed: u64) -> Result<Trained, ModelError> {
    let mut spec = source.model.spec().clone();
    spec.classes = classes;
    let mut t = Trained::init(spec, seed)?;
    let head = format!("{HEAD_PREFIX}.");
    t.store.load_matching(&source.store, Some(&head));
    if mode == TransferMode::Fixed {
        t.store.set_all_trainable(false);
        t.store.set_trainable_prefix(&head, true);
    }
    Ok(t)
}

/// Recordings as the transferred model sees them: baseline inputs are zero-padded
/// to the source channel count.
pub fn adapt_recordings(source: &Trained, target: &Dataset) -> Result<Vec<Recording>, ModelError> {
    let spec = source.model.spec();
    if spec.kind != ModelKind::Baseline {
        return Ok(target.recordings.clone());
    }
    if target.channels() > spec.input_channels {
        return Err(ModelError::Incompatible(format!(
            "target has {} channels, baseline source accepts {}",
            target.channels(),
            spec.input_channels
        )));
    }
    target
        .recordings
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.signal = pad_channels(&r.signal, spec.input_channels)?;
            Ok(r)
        })
        .collect()
}

/// Cross-validated accuracy on `target` of models transferred from `source`.
pub fn transfer_protocol(source: &Trained, target: &Dataset, mode: TransferMode, cfg: &TrainConfig, k: usize) -> Result<KFoldMetrics, ModelError> {
    let recordings = adapt_recordings(source, target)?;
    let labels = target.labels();
    let folds = stratified_kfold(&labels, k, cfg.seed)?;
    let classes = target.class_count();
    let runs = crate::par::map_range(k, |f| {
        let seed = fold_seed(cfg.seed, f);
        let mut trained = transfer_init(source, classes, mode, seed)?;
        let train: Vec<&Recording> = crate::signal::complement(labels.len(), &folds[f]).into_iter().map(|i| &recordings[i]).collect();
        let test: Vec<&Recording> = folds[f].iter().map(|&i| &recordings[i]).collect();
        let history = train_model(&mut trained, &train, classes, &TrainConfig { seed, ..cfg.clone() })?;
        let acc = evaluate(&trained, &test, classes, &NoiseSpec::clean(), None, cfg.window, cfg.class_weighting)?;
        Ok::<_, ModelError>(FoldRecord { fold: f, test_indices: folds[f].clone(), test_accuracy: acc.accuracy, history })
    });
    let folds = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = mean_std(&folds.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
    Ok(KFoldMetrics { model: source.model.spec().clone(), config: cfg.clone(), dataset: target.manifest.name.clone(), folds, mean, std })
}

/// `epoch,loss,acc` lines for one fold.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,acc\n");
    for r in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.loss, r.accuracy));
    }
    out
}
