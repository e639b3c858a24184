//! Recordings, their on-disk format, datasets, the synthetic generator,
//! window sampling and stratified fold assignment.
//!
//! Recording file layout (little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0 | 4 | magic `CHRM` |
//! | 4 | 4 | version `u32` = 1 |
//! | 8 | 4 | channels `u32` |
//! | 12 | 4 | samples `u32` |
//! | 16 | 4 | label `u32` |
//! | 20 | 4 | sample rate `f32` |
//! | 24 | 8 | reserved |
//! | 32 | 4·N·T | `f32` samples, channel-major |

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::DataError;
use crate::io_util::write_atomic;

pub const MAGIC: &[u8; 4] = b"CHRM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Seeded generator for stream `stream` of base seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A multichannel signal with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    /// `[N, T]`, channel-major.
    pub signal: Tensor<f32>,
    pub label: usize,
    pub sample_rate: f32,
    /// Montage indices of the stored channels. Diagnostics only; models never see these.
    pub channel_ids: Option<Vec<usize>>,
}

impl Recording {
    pub fn new(signal: Tensor<f32>, label: usize, sample_rate: f32) -> Result<Self, DataError> {
        let (n, t) = signal.dims2()?;
        if n == 0 || t == 0 {
            return Err(DataError::InvalidRecording(format!("empty signal {n}x{t}")));
        }
        Ok(Self { signal, label, sample_rate, channel_ids: None })
    }

    pub fn channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.signal.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples() as u32).to_le_bytes());
        out.extend_from_slice(&(self.label as u32).to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        for v in self.signal.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary format; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, DataError> {
        let truncated = |offset: usize, expected: usize| DataError::Truncated {
            path: path.to_path_buf(),
            offset: offset as u64,
            expected: expected as u64,
            found: bytes.len().saturating_sub(offset) as u64,
        };
        if bytes.len() < 4 {
            return Err(truncated(0, HEADER_LEN));
        }
        if &bytes[..4] != MAGIC {
            return Err(DataError::BadMagic { path: path.to_path_buf(), offset: 0 });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(4, HEADER_LEN - 4));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(DataError::BadVersion { path: path.to_path_buf(), version, offset: 4 });
        }
        let (n, t, label) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let sample_rate = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let payload = 4 * n * t;
        if bytes.len() < HEADER_LEN + payload {
            return Err(truncated(HEADER_LEN, payload));
        }
        let data = bytes[HEADER_LEN..HEADER_LEN + payload]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(Tensor::new(vec![n, t], data)?, label, sample_rate)
    }
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<(), DataError> {
    write_atomic(path, &rec.to_bytes()).map_err(|e| DataError::io(path, e))
}

pub fn load_recording(path: &Path) -> Result<Recording, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    Recording::from_bytes(&bytes, path)
}

/// One electrode position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub index: usize,
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Spatial layout of a dataset's channels, in storage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Montage(pub Vec<Electrode>);

const GRID_NAMES: [&str; 24] = [
    "Fp1", "AF3", "Fpz", "Fp2", "AF4", "AF8", //
    "F7", "F3", "Fz", "F4", "F8", "FT10", //
    "T3", "C3", "Cz", "C4", "T4", "TP10", //
    "O1", "P3", "Pz", "P4", "O2", "Oz",
];

impl Montage {
    /// `size` positions on a 6-column grid spanning `[-1, 1]^2`, row 0 at the top (y = 1).
    /// The 24-channel default is a 4x6 grid.
    pub fn grid(size: usize) -> Self {
        let cols = 6usize;
        let rows = size.div_ceil(cols).max(1);
        let electrodes = (0..size)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                let x = -1.0 + 2.0 * c as f64 / (cols - 1) as f64;
                let y = if rows == 1 { 0.0 } else { 1.0 - 2.0 * r as f64 / (rows - 1) as f64 };
                let name = GRID_NAMES.get(i).map_or_else(|| format!("E{i}"), |n| n.to_string());
                Electrode { index: i, name, x, y }
            })
            .collect();
        Self(electrodes)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries for the given montage indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        indices
            .iter()
            .map(|&i| {
                self.0
                    .iter()
                    .find(|e| e.index == i)
                    .cloned()
                    .ok_or_else(|| DataError::InvalidDataset(format!("montage has no index {i}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.0 {
            if !seen.insert(e.index) {
                return Err(DataError::InvalidDataset(format!("duplicate montage index {}", e.index)));
            }
            if !e.x.is_finite() || !e.y.is_finite() {
                return Err(DataError::InvalidDataset(format!("non-finite coordinate for {}", e.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.into(), source })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("montage serializes");
        write_atomic(path, text.as_bytes()).map_err(|e| DataError::io(path, e))
    }
}

/// Parameters of the synthetic channel-identifiable generator.
///
/// Channel with montage index `i` carries a sinusoid at
/// `carrier_base_hz + carrier_spacing_hz * i` with random phase plus white
/// noise. Class `k` adds Hann-windowed bursts at
/// `burst_base_hz + burst_spacing_hz * k` on the channels whose montage index
/// satisfies `i % class_count == k`; one burst of `burst_length` samples starts
/// at a random offset inside every `burst_period`-sample period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub montage_size: usize,
    /// Montage indices stored, in storage order; `None` stores all of them.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    pub class_count: usize,
    pub recordings_per_class: usize,
    pub samples: usize,
    pub sample_rate: f64,
    pub carrier_base_hz: f64,
    pub carrier_spacing_hz: f64,
    pub carrier_amplitude: f64,
    pub burst_base_hz: f64,
    pub burst_spacing_hz: f64,
    pub burst_amplitude: f64,
    pub burst_period: usize,
    pub burst_length: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Montage indices used by the 17-channel "synth-B" dataset.
pub const SYNTH_B_CHANNELS: [usize; 17] = [0, 2, 3, 5, 6, 7, 9, 10, 12, 13, 15, 16, 17, 18, 20, 21, 23];

impl SynthSpec {
    /// 24 channels, 5 classes.
    pub fn synth_a() -> Self {
        Self {
            name: "synth-A".into(),
            montage_size: 24,
            channels: None,
            class_count: 5,
            recordings_per_class: 64,
            samples: 1000,
            sample_rate: 250.0,
            carrier_base_hz: 4.0,
            carrier_spacing_hz: 1.5,
            carrier_amplitude: 1.0,
            burst_base_hz: 45.0,
            burst_spacing_hz: 15.0,
            burst_amplitude: 2.0,
            burst_period: 250,
            burst_length: 100,
            noise_std: 0.1,
            seed: 1,
        }
    }

    /// 17 channels drawn from synth-A's montage, 2 classes.
    pub fn synth_b() -> Self {
        Self {
            name: "synth-B".into(),
            channels: Some(SYNTH_B_CHANNELS.to_vec()),
            class_count: 2,
            recordings_per_class: 64,
            seed: 2,
            ..Self::synth_a()
        }
    }

    /// Built-in specs by alias.
    pub fn alias(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "synth-a" | "synth_a" => Some(Self::synth_a()),
            "synth-b" | "synth_b" => Some(Self::synth_b()),
            _ => None,
        }
    }

    /// Montage indices of the stored channels.
    pub fn channel_ids(&self) -> Vec<usize> {
        self.channels.clone().unwrap_or_else(|| (0..self.montage_size).collect())
    }

    pub fn carrier_hz(&self, montage_index: usize) -> f64 {
        self.carrier_base_hz + self.carrier_spacing_hz * montage_index as f64
    }

    pub fn burst_hz(&self, class: usize) -> f64 {
        self.burst_base_hz + self.burst_spacing_hz * class as f64
    }

    /// Whether class `class` bursts on montage index `montage_index`.
    pub fn bursts_on(&self, class: usize, montage_index: usize) -> bool {
        montage_index % self.class_count == class
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.montage_size == 0 || self.class_count == 0 || self.recordings_per_class == 0 || self.samples == 0 {
            return bad("montage size, class count, recordings per class and samples must be positive".into());
        }
        if !(self.sample_rate > 0.0) {
            return bad("sample rate must be positive".into());
        }
        let ids = self.channel_ids();
        if ids.is_empty() {
            return bad("at least one channel is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &ids {
            if i >= self.montage_size || !seen.insert(i) {
                return bad(format!("channel index {i} is duplicated or outside the montage"));
            }
        }
        let nyquist = self.sample_rate / 2.0;
        let top_carrier = ids.iter().map(|&i| self.carrier_hz(i)).fold(f64::MIN, f64::max);
        let top_burst = self.burst_hz(self.class_count - 1);
        for (what, f) in [("carrier", top_carrier), ("burst", top_burst), ("carrier base", self.carrier_base_hz), ("burst base", self.burst_base_hz)] {
            if !(f > 0.0) || f >= nyquist {
                return bad(format!("{what} frequency {f} Hz must be in (0, {nyquist}) Hz"));
            }
        }
        if self.burst_amplitude > 0.0 && (self.burst_length == 0 || self.burst_length > self.burst_period) {
            return bad("burst length must be in 1..=burst period".into());
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return bad("noise std must be non-negative".into());
        }
        Ok(())
    }
}

/// Dataset description written next to the recordings as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub class_count: usize,
    pub class_names: Vec<String>,
    /// Recording file names relative to the dataset directory.
    pub recordings: Vec<String>,
    /// Montage file name relative to the dataset directory.
    pub montage: String,
    pub sample_rate: f64,
    #[serde(default)]
    pub channel_ids: Option<Vec<usize>>,
    #[serde(default)]
    pub generator: Option<SynthSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Recordings plus their manifest and montage.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub recordings: Vec<Recording>,
    pub montage: Montage,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MONTAGE_FILE: &str = "montage.json";

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.recordings.iter().map(|r| r.label).collect()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    /// Channel count shared by all recordings.
    pub fn channels(&self) -> usize {
        self.recordings.first().map_or(0, Recording::channels)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.channels();
        for (i, r) in self.recordings.iter().enumerate() {
            if r.label >= self.manifest.class_count {
                return Err(DataError::InvalidDataset(format!(
                    "recording {i} has label {} but the dataset has {} classes",
                    r.label, self.manifest.class_count
                )));
            }
            if r.channels() != n {
                return Err(DataError::InvalidDataset(format!("recording {i} has {} channels, expected {n}", r.channels())));
            }
        }
        if self.montage.len() != n {
            return Err(DataError::InvalidDataset(format!("montage has {} entries for {n} channels", self.montage.len())));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        for (rec, file) in self.recordings.iter().zip(&self.manifest.recordings) {
            save_recording(rec, &dir.join(file))?;
        }
        self.montage.save(&dir.join(&self.manifest.montage))?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, text.as_bytes()).map_err(|e| DataError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.clone(), source })?;
        let montage = Montage::load(&dir.join(&manifest.montage))?;
        let recordings = crate::par::map(&manifest.recordings, |f| {
            load_recording(&dir.join(f)).map(|mut r| {
                r.channel_ids.clone_from(&manifest.channel_ids);
                r
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        let ds = Self { manifest, recordings, montage };
        ds.validate()?;
        Ok(ds)
    }
}

/// Generates one synthetic recording. Pure function of `(spec, index, label)`.
pub fn synth_recording(spec: &SynthSpec, index: usize, label: usize) -> Recording {
    let ids = spec.channel_ids();
    let mut rng = stream_rng(spec.seed, index as u64);
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid noise");
    let t_len = spec.samples;
    let dt = 1.0 / spec.sample_rate;
    let mut data = Vec::with_capacity(ids.len() * t_len);
    for &ch in &ids {
        let f = spec.carrier_hz(ch);
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut row: Vec<f64> = (0..t_len)
            .map(|t| spec.carrier_amplitude * (2.0 * PI * f * t as f64 * dt + phase).sin())
            .collect();
        if spec.burst_amplitude > 0.0 && spec.bursts_on(label, ch) {
            let fb = spec.burst_hz(label);
            let len = spec.burst_length;
            let mut start_period = 0;
            while start_period < t_len {
                let offset = rng.random_range(0..=spec.burst_period - len);
                let bphase = rng.random_range(0.0..2.0 * PI);
                for j in 0..len {
                    let t = start_period + offset + j;
                    if t >= t_len {
                        break;
                    }
                    let hann = 0.5 - 0.5 * (2.0 * PI * j as f64 / (len - 1).max(1) as f64).cos();
                    row[t] += spec.burst_amplitude * hann * (2.0 * PI * fb * j as f64 * dt + bphase).sin();
                }
                start_period += spec.burst_period;
            }
        }
        if spec.noise_std > 0.0 {
            for v in &mut row {
                *v += noise.sample(&mut rng);
            }
        }
        data.extend(row.into_iter().map(|v| v as f32));
    }
    let mut rec = Recording::new(Tensor::new(vec![ids.len(), t_len], data).expect("shape"), label, spec.sample_rate as f32)
        .expect("non-empty");
    rec.channel_ids = Some(ids);
    rec
}

/// Generates a full dataset from a spec, recordings ordered class by class.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let total = spec.class_count * spec.recordings_per_class;
    let recordings = crate::par::map_range(total, |i| synth_recording(spec, i, i / spec.recordings_per_class));
    let ids = spec.channel_ids();
    let montage = Montage::grid(spec.montage_size).subset(&ids)?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        class_count: spec.class_count,
        class_names: (0..spec.class_count).map(|k| format!("class-{k}")).collect(),
        recordings: (0..total).map(|i| format!("rec_{i:05}.chrm")).collect(),
        montage: MONTAGE_FILE.into(),
        sample_rate: spec.sample_rate,
        channel_ids: Some(ids),
        generator: Some(spec.clone()),
        seed: Some(spec.seed),
    };
    Ok(Dataset { manifest, recordings, montage })
}

/// Contiguous window with a uniformly random start in `[0, T - length]`.
pub fn sample_window(rec: &Recording, length: usize, rng: &mut impl Rng) -> Result<Tensor<f32>, DataError> {
    let t = rec.samples();
    if length == 0 || length > t {
        return Err(DataError::InvalidRecording(format!("window length {length} does not fit {t} samples")));
    }
    let start = rng.random_range(0..=t - length);
    Ok(rec.signal.slice_cols(start, length)?)
}

/// Non-overlapping consecutive windows covering the recording from its start.
pub fn eval_windows(rec: &Recording, length: usize) -> Result<Vec<Tensor<f32>>, DataError> {
    let t = rec.samples();
    if length == 0 || length > t {
        return Err(DataError::InvalidRecording(format!("window length {length} does not fit {t} samples")));
    }
    (0..t / length).map(|w| rec.signal.slice_cols(w * length, length).map_err(Into::into)).collect()
}

/// Splits indices into `k` disjoint folds, stratified by label.
///
/// Members of each class are shuffled and dealt round-robin, continuing
/// where the previous class stopped, so per-class counts across folds differ
/// by at most one and so do fold sizes.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if k < 2 {
        return Err(DataError::Folds(format!("need at least 2 folds, got {k}")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = stream_rng(seed, 0x6b66);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(DataError::Folds(format!("class {class} has {} members, fewer than {k} folds", members.len())));
        }
        members.shuffle(&mut rng);
        for &m in members.iter() {
            folds[next % k].push(m);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Indices not in `fold`, ascending.
pub fn complement(total: usize, fold: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; total];
    for &i in fold {
        mask[i] = false;
    }
    (0..total).filter(|&i| mask[i]).collect()
}
