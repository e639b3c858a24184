//! Named parameter storage, gradient buffers and the checkpoint format.
//!
//! A checkpoint is a flat sequence of records, little-endian, until end of file:
//! `name_len: u16`, `name: [u8; name_len]`, `rank: u8`, `dims: [u32; rank]`,
//! `data: [f32; product(dims)]`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::ModelError;
use crate::diffcore::tensor::{Scalar, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// What kind of parameter this is; drives L2 selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or linear weight.
    Weight,
    Bias,
    /// Normalization gain.
    Gain,
    Slope,
    Embedding,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub kind: ParamKind,
    pub trainable: bool,
    /// Included in the L2 penalty.
    pub decay: bool,
}

/// Ordered, named collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

/// Weight initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a new parameter; names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Constant(c) => vec![S::of(c); n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| S::of(dist.sample(rng))).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| S::of(dist.sample(rng))).collect()
            }
        };
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            value: Tensor::new(shape.to_vec(), data).expect("shape matches"),
            kind,
            trainable: true,
            decay: kind == ParamKind::Weight,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Converts every value to another precision, keeping names and flags.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                    trainable: p.trainable,
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies values for every name present in both stores with equal shapes.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<S>, skip_prefix: Option<&str>) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if skip_prefix.is_some_and(|s| p.name.starts_with(s)) {
                continue;
            }
            if let Some(src) = other.id(&p.name).map(|id| other.value(id)) {
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }

    /// Writes all parameters in the named-tensor checkpoint format.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> std::io::Result<()> {
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.value.rank() as u8])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("write to memory");
        crate::io_util::write_atomic(path, &buf)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Overwrites values from a checkpoint. Every parameter of this store must
    /// appear in the checkpoint with the same shape.
    pub fn load(&mut self, path: &Path) -> Result<(), ModelError> {
        let tensors = read_checkpoint(path)?;
        self.assign_from(&tensors)
    }

    pub fn assign_from(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<(), ModelError> {
        let by_name: HashMap<&str, &Tensor<f32>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| ModelError::Incompatible(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(ModelError::Incompatible(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.cast();
        }
        Ok(())
    }
}

/// Reads every record of a named-tensor checkpoint.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, ModelError> {
    let bytes = std::fs::read(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn parse_checkpoint(mut bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, String> {
    let total = bytes.len();
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let offset = total - bytes.len();
        let truncated = || format!("truncated record at offset {offset}");
        let mut u16b = [0u8; 2];
        bytes.read_exact(&mut u16b).map_err(|_| truncated())?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        bytes.read_exact(&mut name).map_err(|_| truncated())?;
        let name = String::from_utf8(name).map_err(|_| format!("non-utf8 name at offset {offset}"))?;
        let mut rank = [0u8; 1];
        bytes.read_exact(&mut rank).map_err(|_| truncated())?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            bytes.read_exact(&mut d).map_err(|_| truncated())?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let n: usize = dims.iter().product();
        if bytes.len() < 4 * n {
            return Err(truncated());
        }
        let data: Vec<f32> = bytes[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        bytes = &bytes[4 * n..];
        out.push((name, Tensor::new(dims, data).expect("dims match data")));
    }
    Ok(out)
}

/// Gradient buffers aligned with a [`ParamStore`]; `None` where nothing flowed.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub(crate) params: Vec<Option<Vec<S>>>,
    pub(crate) inputs: HashMap<usize, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn empty(n_params: usize) -> Self {
        Self { params: vec![None; n_params], inputs: HashMap::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&[S]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[S]) {
        match &mut self.params[id.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients<S>) {
        for (i, g) in other.params.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
