//! Channel shuffling and masking: the training-time augmentation and the
//! evaluation-time corruptions.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::DataError;
use crate::signal::Montage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    /// Mask count drawn uniformly from `0..=N-1`.
    UniformCount,
    /// Mask `round(ratio * N)` channels (at most `N - 1`).
    FixedRatio,
    /// Keep one half of the montage.
    Structured,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitAxis {
    /// Split along y = 0. Group A is y >= 0.
    Horizontal,
    /// Split along x = 0. Group A is x <= 0.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

/// How masked channels are represented in the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Keep the row, set it to zero.
    Zero,
    /// Remove the row.
    Drop,
}

/// Declarative evaluation-time corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub shuffle: bool,
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub ratio: f64,
    #[serde(default)]
    pub axis: Option<SplitAxis>,
    /// The group that stays active in structured mode.
    #[serde(default)]
    pub group: Option<Group>,
    pub representation: Representation,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        Self {
            shuffle: false,
            mask_mode: MaskMode::None,
            ratio: 0.0,
            axis: None,
            group: None,
            representation: Representation::Zero,
            seed: 0,
        }
    }

    pub fn shuffled() -> Self {
        Self { shuffle: true, ..Self::clean() }
    }

    /// Shuffle plus a uniformly drawn mask count.
    pub fn noisy() -> Self {
        Self { shuffle: true, mask_mode: MaskMode::UniformCount, ..Self::clean() }
    }

    /// Shuffle plus a fixed fraction of masked channels.
    pub fn noisy_ratio(ratio: f64) -> Self {
        Self { shuffle: true, mask_mode: MaskMode::FixedRatio, ratio, ..Self::clean() }
    }

    pub fn structured(axis: SplitAxis, group: Group) -> Self {
        Self { mask_mode: MaskMode::Structured, axis: Some(axis), group: Some(group), ..Self::clean() }
    }

    pub fn with_representation(mut self, r: Representation) -> Self {
        self.representation = r;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        match self.mask_mode {
            MaskMode::FixedRatio if !(0.0..1.0).contains(&self.ratio) => {
                Err(DataError::InvalidDataset(format!("mask ratio {} outside [0, 1)", self.ratio)))
            }
            MaskMode::Structured if self.axis.is_none() || self.group.is_none() => {
                Err(DataError::InvalidDataset("structured masking needs an axis and a group".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_clean(&self) -> bool {
        !self.shuffle && self.mask_mode == MaskMode::None
    }
}

/// Number of channels masked under a fixed ratio, capped so one channel survives.
pub fn ratio_mask_count(ratio: f64, channels: usize) -> usize {
    ((ratio * channels as f64).round() as usize).min(channels.saturating_sub(1))
}

/// Which group each montage entry belongs to. Entries on the split line go to group A.
pub fn structured_groups(montage: &Montage, axis: SplitAxis) -> Vec<Group> {
    montage
        .0
        .iter()
        .map(|e| {
            let in_a = match axis {
                SplitAxis::Horizontal => e.y >= 0.0,
                SplitAxis::Vertical => e.x <= 0.0,
            };
            if in_a {
                Group::A
            } else {
                Group::B
            }
        })
        .collect()
}

/// Rows of `x` in the order `perm`, with rows flagged in `masked` (indexed by
/// source row) zeroed or removed.
fn assemble(x: &Tensor<f32>, perm: &[usize], masked: &[bool], repr: Representation) -> Tensor<f32> {
    let t = x.shape()[1];
    let mut data = Vec::with_capacity(perm.len() * t);
    let mut rows = 0;
    for &src in perm {
        if masked[src] {
            if repr == Representation::Zero {
                data.extend(std::iter::repeat_n(0.0, t));
                rows += 1;
            }
        } else {
            data.extend_from_slice(x.row(src));
            rows += 1;
        }
    }
    Tensor::new(vec![rows, t], data).expect("assembled shape")
}

fn random_mask(n: usize, count: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut masked = vec![false; n];
    for i in index::sample(rng, n, count) {
        masked[i] = true;
    }
    masked
}

/// Training augmentation: random channel permutation, then a mask count drawn
/// uniformly from `0..=N-1` and that many random channels zeroed.
pub fn cms_augment(x: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let n = x.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let count = rng.random_range(0..n.max(1));
    let masked = random_mask(n, count, rng);
    assemble(x, &perm, &masked, Representation::Zero)
}

/// Applies an evaluation-time corruption. Shuffling happens first, then masking.
/// `montage` describes the rows of `x` and is required in structured mode.
pub fn apply_noise(x: &Tensor<f32>, spec: &NoiseSpec, montage: Option<&Montage>, rng: &mut impl Rng) -> Result<Tensor<f32>, DataError> {
    spec.validate()?;
    let n = x.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    if spec.shuffle {
        perm.shuffle(rng);
    }
    let masked = match spec.mask_mode {
        MaskMode::None => vec![false; n],
        MaskMode::UniformCount => {
            let count = rng.random_range(0..n.max(1));
            random_mask(n, count, rng)
        }
        MaskMode::FixedRatio => random_mask(n, ratio_mask_count(spec.ratio, n), rng),
        MaskMode::Structured => {
            let montage = montage.ok_or_else(|| DataError::InvalidDataset("structured masking requires a montage".into()))?;
            if montage.len() != n {
                return Err(DataError::InvalidDataset(format!("montage has {} entries for {n} channels", montage.len())));
            }
            let keep = spec.group.expect("validated");
            structured_groups(montage, spec.axis.expect("validated")).into_iter().map(|g| g != keep).collect()
        }
    };
    Ok(assemble(x, &perm, &masked, spec.representation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::stream_rng;

    fn signal(n: usize, t: usize) -> Tensor<f32> {
        Tensor::new(vec![n, t], (0..n * t).map(|v| v as f32 + 1.0).collect()).unwrap()
    }

    fn zero_rows(x: &Tensor<f32>) -> usize {
        (0..x.shape()[0]).filter(|&r| x.row(r).iter().all(|&v| v == 0.0)).count()
    }

    #[test]
    fn single_channel_is_never_masked() {
        let x = signal(1, 5);
        let mut rng = stream_rng(1, 0);
        for _ in 0..50 {
            assert_eq!(cms_augment(&x, &mut rng), x);
        }
    }

    #[test]
    fn cms_only_permutes_and_zeroes() {
        let x = signal(6, 4);
        let mut rng = stream_rng(2, 0);
        for _ in 0..200 {
            let y = cms_augment(&x, &mut rng);
            assert_eq!(y.shape(), x.shape());
            assert!(zero_rows(&y) <= 5);
            let mut seen = vec![false; 6];
            for r in 0..6 {
                if y.row(r).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let src = (0..6).find(|&s| x.row(s) == y.row(r)).expect("row comes from the input");
                assert!(!seen[src]);
                seen[src] = true;
            }
        }
    }

    #[test]
    fn cms_mask_count_is_uniform() {
        let x = signal(10, 2);
        let mut rng = stream_rng(3, 0);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            counts[zero_rows(&cms_augment(&x, &mut rng))] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 5% critical value, 9 degrees of freedom
        assert!(chi2 < 16.919, "chi-square {chi2}");
    }

    #[test]
    fn identity_and_ratio_counts() {
        let x = signal(24, 3);
        let mut rng = stream_rng(4, 0);
        assert_eq!(apply_noise(&x, &NoiseSpec::clean(), None, &mut rng).unwrap(), x);
        let spec = NoiseSpec { ratio: 0.0, ..NoiseSpec::noisy_ratio(0.0) }.with_representation(Representation::Drop);
        let y = apply_noise(&x, &NoiseSpec { shuffle: false, ..spec }, None, &mut rng).unwrap();
        assert_eq!(y, x);
        for ratio in [0.25, 0.5, 0.75] {
            let drop = NoiseSpec::noisy_ratio(ratio).with_representation(Representation::Drop);
            let y = apply_noise(&x, &drop, None, &mut rng).unwrap();
            assert_eq!(y.shape()[0], 24 - (ratio * 24.0f64).round() as usize);
            let zero = NoiseSpec::noisy_ratio(ratio);
            let y = apply_noise(&x, &zero, None, &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert_eq!(zero_rows(&y), (ratio * 24.0f64).round() as usize);
        }
        assert_eq!(ratio_mask_count(0.75, 24), 18);
        assert_eq!(ratio_mask_count(0.99, 24), 23);
        assert!(apply_noise(&x, &NoiseSpec::noisy_ratio(1.0), None, &mut rng).is_err());
    }

    #[test]
    fn structured_needs_montage() {
        let x = signal(24, 3);
        let mut rng = stream_rng(5, 0);
        let spec = NoiseSpec::structured(SplitAxis::Vertical, Group::A);
        assert!(apply_noise(&x, &spec, None, &mut rng).is_err());
        let small = Montage::grid(23);
        assert!(apply_noise(&x, &spec, Some(&small), &mut rng).is_err());
    }

    #[test]
    fn vertical_split_keeps_left_half() {
        let montage = Montage::grid(24);
        let x = signal(24, 3);
        let mut rng = stream_rng(6, 0);
        let spec = NoiseSpec::structured(SplitAxis::Vertical, Group::A).with_representation(Representation::Drop);
        let y = apply_noise(&x, &spec, Some(&montage), &mut rng).unwrap();
        let left: Vec<usize> = montage.0.iter().filter(|e| e.x < 0.0).map(|e| e.index).collect();
        assert_eq!(y.shape()[0], left.len());
        for (r, &src) in left.iter().enumerate() {
            assert_eq!(y.row(r), x.row(src));
        }
    }

    #[test]
    fn structured_groups_partition() {
        let montage = Montage::grid(24);
        for axis in [SplitAxis::Horizontal, SplitAxis::Vertical] {
            let groups = structured_groups(&montage, axis);
            let a = groups.iter().filter(|&&g| g == Group::A).count();
            let b = groups.iter().filter(|&&g| g == Group::B).count();
            assert_eq!(a + b, 24);
            assert_eq!(a, 12);
        }
        // a point exactly on the line belongs to group A
        let on_line = Montage(vec![crate::signal::Electrode { index: 0, name: "Cz".into(), x: 0.0, y: 0.0 }]);
        assert_eq!(structured_groups(&on_line, SplitAxis::Vertical), vec![Group::A]);
        assert_eq!(structured_groups(&on_line, SplitAxis::Horizontal), vec![Group::A]);
    }

    #[test]
    fn noise_is_deterministic_given_seed() {
        let x = signal(17, 4);
        let spec = NoiseSpec::noisy();
        let a = apply_noise(&x, &spec, None, &mut stream_rng(9, 1)).unwrap();
        let b = apply_noise(&x, &spec, None, &mut stream_rng(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_spec_json() {
        let spec = NoiseSpec::structured(SplitAxis::Horizontal, Group::B).with_seed(3);
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"structured\"") && text.contains("\"horizontal\""));
        assert_eq!(serde_json::from_str::<NoiseSpec>(&text).unwrap(), spec);
    }
}
