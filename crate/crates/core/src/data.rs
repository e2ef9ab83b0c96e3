//! Frozen-backbone surrogate: class-conditional feature datasets and splits.
//!
//! Features come from a fixed linear map of the class embedding plus
//! isotropic noise, `x = W a_y + b + eps`, so a class's visual features are
//! predictable from its semantics and unseen classes are solvable in
//! principle. `noise_std` is the difficulty knob.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GilError, Result};
use crate::rng;
use crate::semantic::EmbeddingTable;
use crate::tensor::Tensor;

pub type ClassId = u32;

/// Labelled feature vectors stored as `f32`, the precision of the feature
/// files, so that saving and loading is lossless.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    dim: usize,
    instance_ids: Vec<u32>,
    class_ids: Vec<ClassId>,
    features: Vec<f32>,
    index: BTreeMap<ClassId, Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Dataset { dim, ..Default::default() }
    }

    pub fn push(&mut self, instance_id: u32, class_id: ClassId, feature: &[f32]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(GilError::Input(format!(
                "feature of instance {instance_id} has dimension {}, dataset has {}",
                feature.len(),
                self.dim
            )));
        }
        self.index.entry(class_id).or_default().push(self.class_ids.len());
        self.instance_ids.push(instance_id);
        self.class_ids.push(class_id);
        self.features.extend_from_slice(feature);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_f64(&self, i: usize) -> Vec<f64> {
        self.feature(i).iter().map(|&v| v as f64).collect()
    }

    pub fn class_of(&self, i: usize) -> ClassId {
        self.class_ids[i]
    }

    pub fn instance_id(&self, i: usize) -> u32 {
        self.instance_ids[i]
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        self.index.keys().copied().collect()
    }

    pub fn class_count(&self) -> usize {
        self.index.len()
    }

    pub fn positions(&self, class_id: ClassId) -> &[usize] {
        self.index.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn class_features(&self, class_id: ClassId) -> Vec<Vec<f64>> {
        self.positions(class_id).iter().map(|&i| self.feature_f64(i)).collect()
    }

    /// Mean number of items per class.
    pub fn mean_class_size(&self) -> f64 {
        if self.index.is_empty() {
            0.0
        } else {
            self.len() as f64 / self.index.len() as f64
        }
    }

    /// Rows at `positions` as an `n x dim` tensor.
    pub fn tensor(&self, positions: &[usize]) -> Tensor {
        let data = positions.iter().flat_map(|&i| self.feature(i).iter().map(|&v| v as f64)).collect();
        Tensor::matrix(positions.len(), self.dim, data)
    }

    pub fn select(&self, positions: impl IntoIterator<Item = usize>) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for i in positions {
            out.push(self.instance_ids[i], self.class_ids[i], self.feature(i))
                .expect("same dimension");
        }
        out
    }

    /// Items belonging to `classes`, original order preserved.
    pub fn subset(&self, classes: &[ClassId]) -> Dataset {
        self.select((0..self.len()).filter(|&i| classes.contains(&self.class_ids[i])))
    }

    /// Per-class hold-out: `round(n * test_fraction)` items of each class go
    /// to the test part, always leaving at least one for training.
    pub fn holdout(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(GilError::Input(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut r = rng::stream(seed, "holdout");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for positions in self.index.values() {
            let mut p = positions.clone();
            p.shuffle(&mut r);
            let n_test = (libm::round(p.len() as f64 * test_fraction) as usize).min(p.len() - 1);
            test.extend_from_slice(&p[..n_test]);
            train.extend_from_slice(&p[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(train), self.select(test)))
    }

    /// Union of two datasets of the same dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(GilError::Input(format!("dimension {} vs {}", self.dim, other.dim)));
        }
        let mut out = self.clone();
        for i in 0..other.len() {
            out.push(other.instance_ids[i], other.class_ids[i], other.feature(i))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_min: usize,
    pub samples_max: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.feature_dim == 0 || self.semantic_dim == 0 {
            return Err(GilError::Config("class count and dimensions must be positive".into()));
        }
        if self.samples_min == 0 || self.samples_min > self.samples_max {
            return Err(GilError::Config(format!(
                "sample range ({}, {}) is empty",
                self.samples_min, self.samples_max
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(GilError::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        Ok(())
    }
}

/// The ground-truth semantic-to-visual map `a -> W a + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    /// `feature_dim x semantic_dim`, entries `N(0, 1)`.
    pub weight: Tensor,
    /// Entries `N(0, 1)`.
    pub bias: Vec<f64>,
}

impl LinearMap {
    pub fn from_seed(feature_dim: usize, semantic_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "ground-truth-map");
        let w = (0..feature_dim * semantic_dim).map(|_| rng::normal(&mut r)).collect();
        let bias = (0..feature_dim).map(|_| rng::normal(&mut r)).collect();
        LinearMap { weight: Tensor::matrix(feature_dim, semantic_dim, w), bias }
    }

    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        let s = self.weight.cols();
        (0..self.weight.rows())
            .map(|i| crate::tensor::dot(&self.weight.data()[i * s..(i + 1) * s], a) + self.bias[i])
            .collect()
    }
}

/// Synthesize `config.n_classes` classes with ids `0..n_classes`.
pub fn synth_dataset(config: &SynthConfig, embeddings: &EmbeddingTable) -> Result<Dataset> {
    config.validate()?;
    if embeddings.dim() != config.semantic_dim {
        return Err(GilError::Input(format!(
            "embedding dimension {} does not match semantic_dim {}",
            embeddings.dim(),
            config.semantic_dim
        )));
    }
    let map = LinearMap::from_seed(config.feature_dim, config.semantic_dim, config.seed);
    let mut r = rng::stream(config.seed, "features");
    let mut out = Dataset::new(config.feature_dim);
    let mut next_id = 0u32;
    let mut buf = vec![0f32; config.feature_dim];
    for class_id in 0..config.n_classes as ClassId {
        let center = map.apply(embeddings.vector(class_id)?);
        let count = r.random_range(config.samples_min..=config.samples_max);
        for _ in 0..count {
            for (b, c) in buf.iter_mut().zip(&center) {
                *b = (c + config.noise_std * rng::normal(&mut r)) as f32;
            }
            out.push(next_id, class_id, &buf)?;
            next_id += 1;
        }
    }
    Ok(out)
}

/// Seen/unseen partition of a class set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<ClassId>,
    pub unseen: Vec<ClassId>,
    pub seed: u64,
}

/// Random partition with `round(seen_fraction * n)` seen classes (kept in
/// `1..n`). Both lists come back sorted.
pub fn split(classes: &[ClassId], seen_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if classes.len() < 2 {
        return Err(GilError::Input(format!("need at least 2 classes to split, got {}", classes.len())));
    }
    if !(seen_fraction > 0.0 && seen_fraction < 1.0) {
        return Err(GilError::Input(format!("seen fraction {seen_fraction} outside (0, 1)")));
    }
    let n = classes.len();
    let n_seen = (libm::round(seen_fraction * n as f64) as usize).clamp(1, n - 1);
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "split"));
    let mut seen = shuffled[..n_seen].to_vec();
    let mut unseen = shuffled[n_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(SplitSpec { seen, unseen, seed })
}
