//! The convolutional classifier and the full model around it.
//!
//! A model standardizes each input channel, optionally remaps the channels
//! onto a canonical layout, then runs a stack of conv blocks followed by a
//! global max over time and a linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::charm::{Charm, CharmConfig, Variant};
use crate::diffcore::nn::{Conv1d, Linear, Norm, Prelu, NORM_EPS};
use crate::diffcore::{ParamStore, Scalar, Tape, Var};
use crate::error::{ModelError, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Feature maps per block.
    pub maps: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
    pub pool_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { maps: vec![256, 256, 256, 512], kernel: 8, stride: 1, pool: 2, pool_stride: 2 }
    }
}

impl BackboneConfig {
    /// Same block structure with every width divided by `factor`.
    pub fn narrowed(factor: usize) -> Self {
        let d = Self::default();
        Self { maps: d.maps.iter().map(|m| (m / factor.max(1)).max(1)).collect(), ..d }
    }

    /// `(conv output, pool output)` length per block, or `None` if `len` is too short.
    pub fn lengths(&self, mut len: usize) -> Option<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.maps.len());
        for _ in &self.maps {
            if len < self.kernel {
                return None;
            }
            let conv = (len - self.kernel) / self.stride + 1;
            if conv < self.pool {
                return None;
            }
            len = (conv - self.pool) / self.pool_stride + 1;
            out.push((conv, len));
        }
        Some(out)
    }

    /// Shortest input accepted.
    pub fn min_len(&self) -> usize {
        (1..).find(|&l| self.lengths(l).is_some()).expect("some length fits")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.maps.is_empty() || self.maps.contains(&0) {
            return Err(ModelError::Config("backbone needs at least one block with positive width".into()));
        }
        if self.kernel == 0 || self.stride == 0 || self.pool == 0 || self.pool_stride == 0 {
            return Err(ModelError::Config("kernel, stride and pool sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Baseline,
    CharmBase,
    CharmCkv,
    CharmCq,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [Self::Baseline, Self::CharmBase, Self::CharmCkv, Self::CharmCq];

    pub fn variant(self) -> Option<Variant> {
        match self {
            Self::Baseline => None,
            Self::CharmBase => Some(Variant::Base),
            Self::CharmCkv => Some(Variant::Ckv),
            Self::CharmCq => Some(Variant::Cq),
        }
    }

    pub fn name(self) -> &'static str {
        self.variant().map_or("baseline", Variant::name)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub classes: usize,
    /// Channels the backbone sees in baseline mode.
    pub input_channels: usize,
    pub backbone: BackboneConfig,
    pub charm: CharmConfig,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, classes: usize, input_channels: usize) -> Self {
        Self {
            kind,
            classes,
            input_channels,
            backbone: BackboneConfig::default(),
            charm: CharmConfig::new(kind.variant().unwrap_or(Variant::Base)),
        }
    }

    /// Rows entering the backbone.
    pub fn backbone_channels(&self) -> usize {
        match self.kind {
            ModelKind::Baseline => self.input_channels,
            _ => self.charm.canonical,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::Config("need at least two classes".into()));
        }
        if self.backbone_channels() == 0 {
            return Err(ModelError::Config("backbone needs at least one input channel".into()));
        }
        self.backbone.validate()?;
        if self.kind != ModelKind::Baseline {
            self.charm.validate()?;
            if Some(self.charm.variant) != self.kind.variant() {
                return Err(ModelError::Config("charm variant does not match model kind".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv: Conv1d,
    norm: Norm,
    act: Prelu,
}

/// Conv blocks with a global max over time.
#[derive(Clone, Debug)]
pub struct Backbone {
    blocks: Vec<Block>,
    config: BackboneConfig,
    channels: usize,
}

/// Parameter name prefixes.
pub const BACKBONE_PREFIX: &str = "cnn";
pub const HEAD_PREFIX: &str = "head";

impl Backbone {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, channels: usize, config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = channels;
        let blocks = config
            .maps
            .iter()
            .enumerate()
            .map(|(b, &maps)| {
                let name = format!("{BACKBONE_PREFIX}.block{b}");
                let block = Block {
                    conv: Conv1d::new(store, &format!("{name}.conv"), cin, maps, config.kernel, config.stride, rng),
                    norm: Norm::new(store, &format!("{name}.norm"), maps, rng),
                    act: Prelu::new(store, &format!("{name}.act"), maps, rng),
                };
                cin = maps;
                block
            })
            .collect();
        Self { blocks, config, channels }
    }

    pub fn out_features(&self) -> usize {
        *self.config.maps.last().expect("validated")
    }

    /// `[C, L]` to a `[1, maps_last]` feature row.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, TensorError> {
        let &[c, len] = tape.shape(x)? else {
            return Err(TensorError::Rank { op: "backbone", expected: 2, got: tape.shape(x)?.to_vec() });
        };
        if c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "backbone",
                detail: format!("expected {} input channels, got {c}", self.channels),
            });
        }
        if self.config.lengths(len).is_none() {
            return Err(TensorError::TooShort { op: "backbone", len, min: self.config.min_len() });
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(tape, h)?;
            // normalized over feature maps at each time step
            h = block.norm.forward(tape, h, 0)?;
            h = block.act.forward(tape, h, 0)?;
            h = tape.maxpool1d(h, self.config.pool, self.config.pool_stride)?;
        }
        let g = tape.global_maxpool(h)?;
        tape.reshape(g, &[1, self.out_features()])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[1, K]`.
    pub logits: Var,
    /// Reordering matrix in charm mode.
    pub p: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    charm: Option<Charm>,
    backbone: Backbone,
    head: Linear,
}

impl Model {
    /// Registers all parameters in `store`. The head is excluded from weight decay.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, spec: ModelSpec, rng: &mut impl Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        let charm = match spec.kind {
            ModelKind::Baseline => None,
            _ => Some(Charm::new(store, spec.charm.clone(), rng)?),
        };
        let backbone = Backbone::new(store, spec.backbone_channels(), spec.backbone.clone(), rng);
        let head = Linear::new(store, HEAD_PREFIX, backbone.out_features(), spec.classes, rng);
        store.get_mut(head.weight).decay = false;
        Ok(Self { spec, charm, backbone, head })
    }

    /// Builds the model and a freshly initialized store from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<(Self, ParamStore<f32>), ModelError> {
        let mut store = ParamStore::new();
        let mut rng = crate::signal::stream_rng(seed, 0x1417);
        let model = Self::new(&mut store, spec, &mut rng)?;
        Ok((model, store))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn charm(&self) -> Option<&Charm> {
        self.charm.as_ref()
    }

    /// Pre-head features `[1, F]` plus `p` in charm mode.
    pub fn features<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<(Var, Option<Var>), TensorError> {
        let n = tape.shape(x)?.first().copied().unwrap_or(0);
        if self.charm.is_none() && n != self.spec.input_channels {
            return Err(TensorError::ShapeMismatch {
                op: "baseline model",
                detail: format!("expected {} channels, got {n}", self.spec.input_channels),
            });
        }
        let x = tape.instance_norm(x, NORM_EPS)?;
        let (x, p) = match &self.charm {
            Some(charm) => {
                let out = charm.forward(tape, x)?;
                (out.xhat, Some(out.p))
            }
            None => (x, None),
        };
        Ok((self.backbone.forward(tape, x)?, p))
    }

    /// Logits for one `[N, T]` window.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<ModelOutput, TensorError> {
        let (f, p) = self.features(tape, x)?;
        Ok(ModelOutput { logits: self.head.forward(tape, f)?, p })
    }

    /// Convenience inference on a plain tensor; returns logits and `p`.
    pub fn predict<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &crate::Tensor<S>,
    ) -> Result<(Vec<S>, Option<crate::Tensor<S>>), TensorError> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone())?;
        let out = self.forward(&mut tape, xv)?;
        let logits = tape.value(out.logits)?.data().to_vec();
        let p = out.p.map(|p| tape.value(p).cloned()).transpose()?;
        Ok((logits, p))
    }

    /// Ids of the head parameters.
    pub fn head(&self) -> &Linear {
        &self.head
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::stream_rng;
    use crate::Tensor;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn small_spec(kind: ModelKind, n: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(kind, 3, n);
        spec.backbone = BackboneConfig::narrowed(32);
        spec.charm.embed_maps = 8;
        spec.charm.canonical = 6;
        spec
    }

    #[test]
    fn block_lengths_for_default_window() {
        let lengths = BackboneConfig::default().lengths(500).unwrap();
        assert_eq!(lengths, vec![(493, 246), (239, 119), (112, 56), (49, 24)]);
        let min = BackboneConfig::default().min_len();
        assert!(BackboneConfig::default().lengths(min - 1).is_none());
    }

    #[test]
    fn backbone_output_width() {
        let mut rng = stream_rng(1, 0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, 3, BackboneConfig::default(), &mut rng);
        let mut tape = Tape::new(&store);
        let x = tape.input(random(&[3, 500], &mut rng)).unwrap();
        let f = bb.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f).unwrap(), &[1, 512]);
    }

    #[test]
    fn backbone_sees_channel_scale() {
        let mut rng = stream_rng(2, 0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, 2, BackboneConfig::narrowed(16), &mut rng);
        let x = random(&[2, 200], &mut rng);
        let mut scaled = x.clone();
        scaled.row_mut(1).iter_mut().for_each(|v| *v *= 3.0);
        let feat = |t: Tensor<f32>| {
            let mut tape = Tape::new(&store);
            let v = tape.input(t).unwrap();
            let f = bb.forward(&mut tape, v).unwrap();
            tape.value(f).unwrap().clone()
        };
        assert!(feat(x).max_abs_diff(&feat(scaled)) > 1e-3);
    }

    #[test]
    fn baseline_rejects_wrong_channel_count() {
        let (model, store) = Model::init(small_spec(ModelKind::Baseline, 4), 3).unwrap();
        assert!(model.predict(&store, &Tensor::zeros(vec![5, 160])).is_err());
        assert!(model.predict(&store, &Tensor::zeros(vec![4, 120])).is_err());
        let x = random(&[4, 160], &mut stream_rng(4, 0));
        model.predict(&store, &x.select_rows(&[3, 1, 0, 2])).unwrap();
    }

    #[test]
    fn charm_logits_are_permutation_invariant() {
        let mut rng = stream_rng(5, 0);
        for kind in [ModelKind::CharmBase, ModelKind::CharmCkv, ModelKind::CharmCq] {
            let (model, store) = Model::init(small_spec(kind, 0), 6).unwrap();
            for n in [2, 5, 9] {
                let x = random(&[n, 160], &mut rng);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let (a, _) = model.predict(&store, &x).unwrap();
                let (b, _) = model.predict(&store, &x.select_rows(&perm)).unwrap();
                assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-4), "{kind:?}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut spec = small_spec(ModelKind::CharmCq, 0);
        spec.classes = 2;
        let (model, mut store) = Model::init(spec, 7).unwrap();
        store.get_mut(model.head().weight).value.data_mut().fill(0.0);
        let (logits, p) = model.predict(&store, &random(&[3, 160], &mut stream_rng(8, 0))).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
        assert_eq!(p.unwrap().shape(), &[6, 3]);
    }

    #[test]
    fn charm_backbone_size_ignores_dataset_channels() {
        let count = |n| Model::init(small_spec(ModelKind::CharmCkv, n), 9).unwrap().1.numel();
        assert_eq!(count(4), count(17));
        let base = |n| Model::init(small_spec(ModelKind::Baseline, n), 9).unwrap().1.numel();
        assert!(base(17) > base(4));
    }

    #[test]
    fn inference_is_deterministic() {
        let (model, store) = Model::init(small_spec(ModelKind::CharmCkv, 0), 10).unwrap();
        let x = random(&[4, 160], &mut stream_rng(11, 0));
        assert_eq!(model.predict(&store, &x).unwrap().0, model.predict(&store, &x).unwrap().0);
    }

    #[test]
    fn head_is_not_decayed() {
        let (model, store) = Model::init(small_spec(ModelKind::Baseline, 2), 12).unwrap();
        assert!(!store.get(model.head().weight).decay);
        let decayed = store.iter().filter(|(_, p)| p.decay).count();
        assert_eq!(decayed, 4);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::parse(k.name()), Some(k));
        }
        assert_eq!(ModelKind::parse("charm"), None);
    }
}
