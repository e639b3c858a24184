//! The channel remapping module.
//!
//! Every variant embeds each input channel from its own content, builds a
//! row-stochastic `[M, N]` matrix `p` from those embeddings and returns the
//! remapped signal `x̂ = p · x` with `M` canonical rows. Rows of `p` index
//! canonical channels, columns index input channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{Conv1d, Linear, Norm, Prelu};
use crate::diffcore::{Init, ParamId, ParamKind, ParamStore, Scalar, Tape, Var};
use crate::error::{ModelError, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Canonical anchors matched directly against channel embeddings.
    Base,
    /// Channel queries refined by attention over canonical keys and values.
    Ckv,
    /// Canonical queries refined by attention over channel keys and values.
    Cq,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "charm-base",
            Self::Ckv => "charm-ckv",
            Self::Cq => "charm-cq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharmConfig {
    pub variant: Variant,
    /// Number of canonical channels `M`.
    pub canonical: usize,
    /// Embedding width `d`.
    pub dim: usize,
    pub embed_layers: usize,
    pub embed_maps: usize,
    pub embed_kernel: usize,
    /// Attention layers `L` (unused by the base variant).
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Weight of the mean-absolute penalty on `p`.
    pub l1_weight: f64,
}

impl CharmConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            canonical: 24,
            dim: 32,
            embed_layers: 3,
            embed_maps: 32,
            embed_kernel: 8,
            layers: 2,
            mlp_hidden: 64,
            l1_weight: 1e-4,
        }
    }

    /// Shortest signal the embedder accepts.
    pub fn min_samples(&self) -> usize {
        self.embed_layers * (self.embed_kernel - 1) + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.canonical == 0 || self.dim == 0 || self.embed_maps == 0 || self.embed_kernel == 0 || self.mlp_hidden == 0 {
            return Err(ModelError::Config("canonical count, dim, maps, kernel and mlp width must be positive".into()));
        }
        if self.embed_layers == 0 {
            return Err(ModelError::Config("the embedder needs at least one layer".into()));
        }
        if self.variant != Variant::Base && self.layers == 0 {
            return Err(ModelError::Config("attention variants need at least one layer".into()));
        }
        if !(self.l1_weight >= 0.0) {
            return Err(ModelError::Config("l1 weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-channel convolutional trunk: conv, PReLU between layers, global max over time.
#[derive(Clone, Debug)]
pub struct Trunk {
    convs: Vec<Conv1d>,
    acts: Vec<Prelu>,
    min_len: usize,
}

impl Trunk {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, cfg: &CharmConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut acts = Vec::new();
        for l in 0..cfg.embed_layers {
            let cin = if l == 0 { 1 } else { cfg.embed_maps };
            convs.push(Conv1d::new(store, &format!("{name}.conv{l}"), cin, cfg.embed_maps, cfg.embed_kernel, 1, rng));
            if l + 1 < cfg.embed_layers {
                acts.push(Prelu::new(store, &format!("{name}.act{l}"), cfg.embed_maps, rng));
            }
        }
        Self { convs, acts, min_len: cfg.min_samples() }
    }

    /// `[N, T]` to `[N, maps]`; each row depends only on the matching input row.
    fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, TensorError> {
        let &[n, t] = tape.shape(x)? else {
            return Err(TensorError::Rank { op: "channel embedding", expected: 2, got: tape.shape(x)?.to_vec() });
        };
        if t < self.min_len {
            return Err(TensorError::TooShort { op: "channel embedding", len: t, min: self.min_len });
        }
        let mut h = tape.reshape(x, &[n, 1, t])?;
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, h)?;
            if let Some(act) = self.acts.get(l) {
                h = act.forward(tape, h, 1)?;
            }
        }
        tape.global_maxpool(h)
    }
}

/// Residual attention block: `layernorm(q + mlp(attend(q, k, v)))`.
#[derive(Clone, Debug)]
pub struct AttnLayer {
    hidden: Linear,
    act: Prelu,
    out: Linear,
    norm: Norm,
}

impl AttnLayer {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.mlp0"), dim, hidden, rng),
            act: Prelu::new(store, &format!("{name}.mlp_act"), hidden, rng),
            // zero so that a fresh layer is a normalized identity
            out: Linear::with_init(store, &format!("{name}.mlp1"), hidden, dim, Init::Zeros, rng),
            norm: Norm::new(store, &format!("{name}.norm"), dim, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let h = attend(tape, q, k, v)?;
        let m = self.hidden.forward(tape, h)?;
        let m = self.act.forward(tape, m, 1)?;
        let m = self.out.forward(tape, m)?;
        let r = tape.add(q, m)?;
        self.norm.forward(tape, r, 1)
    }

    /// Parameter ids in the order `mlp0.weight, mlp0.bias, slope, mlp1.weight, mlp1.bias, gain, bias`.
    pub fn param_ids(&self) -> [ParamId; 7] {
        [
            self.hidden.weight,
            self.hidden.bias,
            self.act.slope,
            self.out.weight,
            self.out.bias,
            self.norm.gain,
            self.norm.bias,
        ]
    }
}

/// Unscaled dot-product attention: `softmax_j(q_i · k_j)` applied to the rows of `v`.
pub fn attend<S: Scalar>(tape: &mut Tape<'_, S>, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
    let scores = tape.matmul_t(q, k, false, true)?;
    let a = tape.softmax(scores, 1)?;
    tape.matmul(a, v)
}

/// `p[i, j] = softmax_j(anchors_i · keys_j)`, shape `[M, N]`.
pub fn softreorder<S: Scalar>(tape: &mut Tape<'_, S>, anchors: Var, keys: Var) -> Result<Var, TensorError> {
    let logits = tape.matmul_t(anchors, keys, false, true)?;
    tape.softmax(logits, 1)
}

/// Remapped signal and the matrix that produced it.
#[derive(Clone, Copy, Debug)]
pub struct CharmOutput {
    /// `[M, T]`.
    pub xhat: Var,
    /// `[M, N]`.
    pub p: Var,
}

#[derive(Clone, Debug)]
enum Heads {
    /// Base and CKV: one projection to the embedding.
    Embed(Linear),
    /// CQ: separate key and value projections over a shared trunk.
    KeyValue { key: Linear, value: Linear },
}

/// Learned canonical tables, each `[M, d]`.
#[derive(Clone, Debug)]
enum Canonical {
    Base { anchors: ParamId },
    Ckv { anchors: ParamId, keys: ParamId, values: ParamId },
    Cq { queries: ParamId },
}

#[derive(Clone, Debug)]
pub struct Charm {
    config: CharmConfig,
    trunk: Trunk,
    heads: Heads,
    canonical: Canonical,
    layers: Vec<AttnLayer>,
}

/// Prefix shared by every parameter this module registers.
pub const PREFIX: &str = "charm";

impl Charm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: CharmConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (m, d) = (config.canonical, config.dim);
        let trunk = Trunk::new(store, &format!("{PREFIX}.embed"), &config, rng);
        let maps = config.embed_maps;
        let table = |store: &mut ParamStore<S>, name: &str, rng: &mut _| {
            store.add(format!("{PREFIX}.{name}"), &[m, d], ParamKind::Embedding, Init::Normal(0.02), rng)
        };
        let (heads, canonical) = match config.variant {
            Variant::Base => (
                Heads::Embed(Linear::new(store, &format!("{PREFIX}.embed.proj"), maps, d, rng)),
                Canonical::Base { anchors: table(store, "anchors", rng) },
            ),
            Variant::Ckv => (
                Heads::Embed(Linear::new(store, &format!("{PREFIX}.embed.proj"), maps, d, rng)),
                Canonical::Ckv {
                    anchors: table(store, "anchors", rng),
                    keys: table(store, "keys", rng),
                    values: table(store, "values", rng),
                },
            ),
            Variant::Cq => (
                Heads::KeyValue {
                    key: Linear::new(store, &format!("{PREFIX}.embed.key"), maps, d, rng),
                    value: Linear::new(store, &format!("{PREFIX}.embed.value"), maps, d, rng),
                },
                Canonical::Cq { queries: table(store, "queries", rng) },
            ),
        };
        let layers = match config.variant {
            Variant::Base => Vec::new(),
            _ => (0..config.layers)
                .map(|l| AttnLayer::new(store, &format!("{PREFIX}.attn{l}"), d, config.mlp_hidden, rng))
                .collect(),
        };
        Ok(Self { config, trunk, heads, canonical, layers })
    }

    pub fn config(&self) -> &CharmConfig {
        &self.config
    }

    pub fn layers(&self) -> &[AttnLayer] {
        &self.layers
    }

    /// Per-channel embeddings `[N, d]`. For the CQ variant these are the keys.
    pub fn channel_embed<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var, TensorError> {
        let f = self.trunk.forward(tape, x)?;
        match &self.heads {
            Heads::Embed(proj) => proj.forward(tape, f),
            Heads::KeyValue { key, .. } => key.forward(tape, f),
        }
    }

    /// Maps `x: [N, T]` to `x̂: [M, T]` for any `N >= 1`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<CharmOutput, TensorError> {
        let p = match (&self.canonical, &self.heads) {
            (Canonical::Base { anchors }, Heads::Embed(_)) => {
                let h = self.channel_embed(tape, x)?;
                let c = tape.param(*anchors);
                softreorder(tape, c, h)?
            }
            (Canonical::Ckv { anchors, keys, values }, Heads::Embed(_)) => {
                let mut q = self.channel_embed(tape, x)?;
                let (k, v) = (tape.param(*keys), tape.param(*values));
                for layer in &self.layers {
                    q = layer.forward(tape, q, k, v)?;
                }
                let c = tape.param(*anchors);
                softreorder(tape, c, q)?
            }
            (Canonical::Cq { queries }, Heads::KeyValue { key, value }) => {
                let f = self.trunk.forward(tape, x)?;
                let k = key.forward(tape, f)?;
                let v = value.forward(tape, f)?;
                let mut q = tape.param(*queries);
                for layer in &self.layers {
                    q = layer.forward(tape, q, k, v)?;
                }
                softreorder(tape, q, k)?
            }
            _ => unreachable!("heads and canonical tables are built together"),
        };
        let xhat = tape.matmul(p, x)?;
        Ok(CharmOutput { xhat, p })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::signal::stream_rng;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn small(variant: Variant) -> CharmConfig {
        CharmConfig { embed_maps: 8, dim: 8, canonical: 6, mlp_hidden: 16, ..CharmConfig::new(variant) }
    }

    /// Randomizes every parameter so zero-initialized layers take part.
    fn randomize(store: &mut ParamStore<f32>, rng: &mut impl Rng) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    fn build(cfg: CharmConfig, seed: u64) -> (ParamStore<f32>, Charm) {
        let mut rng = stream_rng(seed, 0);
        let mut store = ParamStore::new();
        let charm = Charm::new(&mut store, cfg, &mut rng).unwrap();
        (store, charm)
    }

    fn run(store: &ParamStore<f32>, charm: &Charm, x: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone()).unwrap();
        let out = charm.forward(&mut tape, xv).unwrap();
        (tape.value(out.xhat).unwrap().clone(), tape.value(out.p).unwrap().clone())
    }

    fn embed(store: &ParamStore<f32>, charm: &Charm, x: &Tensor<f32>) -> Tensor<f32> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone()).unwrap();
        let h = charm.channel_embed(&mut tape, xv).unwrap();
        tape.value(h).unwrap().clone()
    }

    #[test]
    fn embedding_depends_on_own_channel_only() {
        let (store, charm) = build(small(Variant::Base), 1);
        let mut rng = stream_rng(2, 0);
        let mut x = random(&[3, 40], &mut rng);
        let row = x.row(0).to_vec();
        x.row_mut(2).copy_from_slice(&row);
        let h = embed(&store, &charm, &x);
        assert_eq!(h.row(0), h.row(2));

        let alone = embed(&store, &charm, &Tensor::new(vec![1, 40], row).unwrap());
        let mut other = random(&[3, 40], &mut rng);
        other.row_mut(1).copy_from_slice(x.row(0));
        let h2 = embed(&store, &charm, &other);
        assert!(alone.row(0).iter().zip(h.row(0)).all(|(a, b)| (a - b).abs() <= 1e-6));
        assert!(h2.row(1).iter().zip(h.row(0)).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn zero_channel_embeds_to_projection_bias() {
        let (store, charm) = build(small(Variant::Base), 3);
        let h = embed(&store, &charm, &Tensor::zeros(vec![1, 30]));
        let bias = store.value(store.id("charm.embed.proj.bias").unwrap());
        assert_eq!(h.data(), bias.data());
    }

    #[test]
    fn short_signal_reports_minimum() {
        let (store, charm) = build(CharmConfig::new(Variant::Base), 4);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::zeros(vec![2, 21])).unwrap();
        match charm.forward(&mut tape, x) {
            Err(TensorError::TooShort { min, .. }) => assert_eq!(min, 22),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_channel_fills_every_canonical_row() {
        for variant in [Variant::Base, Variant::Ckv, Variant::Cq] {
            let (store, charm) = build(small(variant), 5);
            let x = random(&[1, 30], &mut stream_rng(6, 0));
            let (xhat, p) = run(&store, &charm, &x);
            assert_eq!(p.shape(), &[6, 1]);
            assert!(p.data().iter().all(|&v| v == 1.0));
            for r in 0..6 {
                assert_eq!(xhat.row(r), x.row(0));
            }
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (store, charm) = build(small(Variant::Ckv), 7);
        let (xhat, _) = run(&store, &charm, &Tensor::zeros(vec![4, 30]));
        assert!(xhat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_moves_columns_and_keeps_output() {
        let mut rng = stream_rng(8, 0);
        for variant in [Variant::Base, Variant::Ckv, Variant::Cq] {
            let (mut store, charm) = build(small(variant), 9);
            randomize(&mut store, &mut rng);
            for n in [1, 3, 7] {
                let x = random(&[n, 30], &mut rng);
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let (xhat, p) = run(&store, &charm, &x);
                let (xhat2, p2) = run(&store, &charm, &x.select_rows(&perm));
                assert!(xhat.max_abs_diff(&xhat2) <= 1e-5, "{variant:?}");
                for i in 0..6 {
                    for (j, &src) in perm.iter().enumerate() {
                        assert!((p2.get2(i, j) - p.get2(i, src)).abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn rows_are_stochastic() {
        let mut rng = stream_rng(10, 0);
        for variant in [Variant::Base, Variant::Ckv, Variant::Cq] {
            let (mut store, charm) = build(small(variant), 11);
            randomize(&mut store, &mut rng);
            let (_, p) = run(&store, &charm, &random(&[5, 25], &mut rng));
            for i in 0..6 {
                let s: f64 = p.row(i).iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() <= 1e-6);
                assert!(p.row(i).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn duplicate_channels_give_duplicate_columns() {
        let (mut store, charm) = build(small(Variant::Ckv), 12);
        let mut rng = stream_rng(13, 0);
        randomize(&mut store, &mut rng);
        let mut x = random(&[4, 30], &mut rng);
        let row = x.row(1).to_vec();
        x.row_mut(3).copy_from_slice(&row);
        let (_, p) = run(&store, &charm, &x);
        for i in 0..6 {
            assert_eq!(p.get2(i, 1), p.get2(i, 3));
        }
    }

    #[test]
    fn identical_channels_give_uniform_rows_for_cq() {
        let (mut store, charm) = build(small(Variant::Cq), 14);
        let mut rng = stream_rng(15, 0);
        randomize(&mut store, &mut rng);
        let one = random(&[1, 30], &mut rng);
        let x = one.select_rows(&[0, 0, 0, 0, 0]);
        let (_, p) = run(&store, &charm, &x);
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn single_layer_ckv_starts_as_normalized_embedding() {
        let cfg = CharmConfig { layers: 1, ..small(Variant::Ckv) };
        let (store, charm) = build(cfg, 16);
        let x = random(&[3, 30], &mut stream_rng(17, 0));
        let (_, p) = run(&store, &charm, &x);

        let mut tape = Tape::new(&store);
        let xv = tape.input(x).unwrap();
        let h = charm.channel_embed(&mut tape, xv).unwrap();
        let g = tape_param(&mut tape, &store, "charm.attn0.norm.gain");
        let b = tape_param(&mut tape, &store, "charm.attn0.norm.bias");
        let q = tape.layernorm(h, g, b, 1e-5).unwrap();
        let c = tape_param(&mut tape, &store, "charm.anchors");
        let expected = softreorder(&mut tape, c, q).unwrap();
        assert!(tape.value(expected).unwrap().max_abs_diff(&p) <= 1e-6);
    }

    fn tape_param(tape: &mut Tape<'_, f32>, store: &ParamStore<f32>, name: &str) -> Var {
        tape.param(store.id(name).unwrap())
    }

    fn reorder(anchors: Tensor<f64>, keys: Tensor<f64>) -> Tensor<f64> {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.input(anchors).unwrap();
        let k = tape.input(keys).unwrap();
        let p = softreorder(&mut tape, a, k).unwrap();
        tape.value(p).unwrap().clone()
    }

    #[test]
    fn softreorder_limits() {
        let mut rng = stream_rng(18, 0);
        let anchors = random(&[4, 3], &mut rng).cast::<f64>();
        let keys = Tensor::from_rows(&vec![vec![0.3, -1.0, 2.0]; 5]).unwrap();
        assert!(reorder(anchors.clone(), keys).data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let p = reorder(anchors, random(&[1, 3], &mut rng).cast());
        assert_eq!(p.shape(), &[4, 1]);
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn large_scale_softreorder_is_an_assignment() {
        let m = 6;
        let eye: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 50.0f64.sqrt() } else { 0.0 }).collect()).collect();
        let t = Tensor::from_rows(&eye).unwrap();
        let p = reorder(t.clone(), t);
        for i in 0..m {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| p.get2(i, j)).sum();
            assert!(off < 1e-10, "off-target mass {off}");
        }
    }
}
