//! Per-class semantic embeddings.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{GilError, Result};
use crate::rng;

/// Rejection sampling gives up on a single vector after this many draws.
pub const MAX_REJECTIONS: usize = 10_000;

/// Pairwise cosine bound enforced when the dimension allows it.
pub const MAX_RANDOM_COSINE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Loaded,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub class_id: ClassId,
    /// Unit Euclidean norm.
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

/// Class id to unit-norm embedding, all of one dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<ClassId, SemanticEmbedding>,
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = crate::tensor::norm(v);
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, entries: BTreeMap::new() }
    }

    /// Build from raw rows; every vector is rescaled to unit norm.
    pub fn from_rows(
        dim: usize,
        rows: impl IntoIterator<Item = (ClassId, Vec<f64>)>,
        source: EmbeddingSource,
    ) -> Result<Self> {
        let mut table = EmbeddingTable::new(dim);
        for (class_id, v) in rows {
            table.insert(class_id, &v, source)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, class_id: ClassId, vector: &[f64], source: EmbeddingSource) -> Result<()> {
        if vector.len() != self.dim {
            return Err(GilError::Input(format!(
                "embedding for class {class_id} has dimension {}, table has {}",
                vector.len(),
                self.dim
            )));
        }
        if self.entries.contains_key(&class_id) {
            return Err(GilError::Input(format!("duplicate embedding for class {class_id}")));
        }
        let vector = normalized(vector).ok_or_else(|| {
            GilError::Input(format!("embedding for class {class_id} has zero or non-finite norm"))
        })?;
        self.entries.insert(class_id, SemanticEmbedding { class_id, vector, source });
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn get(&self, class_id: ClassId) -> Option<&SemanticEmbedding> {
        self.entries.get(&class_id)
    }

    /// Embedding vector of `class_id`, or an input error naming the class.
    pub fn vector(&self, class_id: ClassId) -> Result<&[f64]> {
        self.entries
            .get(&class_id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| GilError::Input(format!("no semantic embedding for class {class_id}")))
    }

    /// Class ids in ascending order.
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SemanticEmbedding> {
        self.entries.values()
    }

    /// Copy with every vector perturbed by isotropic Gaussian noise of the
    /// given per-coordinate scale (relative to a unit vector), then
    /// renormalized. Models a weaker semantic source describing the same
    /// classes.
    pub fn perturbed(&self, level: f64, seed: u64) -> Result<Self> {
        if level == 0.0 {
            return Ok(self.clone());
        }
        let mut out = EmbeddingTable::new(self.dim);
        let scale = level / libm::sqrt(self.dim as f64);
        for e in self.iter() {
            let mut r = rng::seeded(rng::derive_indexed(seed, "perturb", e.class_id as u64));
            let v: Vec<f64> = e.vector.iter().map(|x| x + scale * rng::normal(&mut r)).collect();
            out.insert(e.class_id, &v, e.source)?;
        }
        Ok(out)
    }
}

/// Random unit vectors, rejection-sampled to keep pairwise `|cos|` below
/// [`MAX_RANDOM_COSINE`] whenever `dim >= 4 * class_ids.len()`.
pub fn random_embeddings(class_ids: &[ClassId], dim: usize, seed: u64) -> Result<EmbeddingTable> {
    random_embeddings_capped(class_ids, dim, seed, MAX_REJECTIONS)
}

fn random_embeddings_capped(
    class_ids: &[ClassId],
    dim: usize,
    seed: u64,
    max_draws: usize,
) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(GilError::Input("embedding dimension must be positive".into()));
    }
    if dim < class_ids.len() {
        log::warn!(
            "semantic dimension {dim} is smaller than the {} classes; embeddings will be correlated",
            class_ids.len()
        );
    }
    let enforce = dim >= 4 * class_ids.len();
    let mut r = rng::stream(seed, "semantic");
    let mut table = EmbeddingTable::new(dim);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(class_ids.len());
    for &class_id in class_ids {
        let mut tries = 0;
        let v = loop {
            tries += 1;
            if tries > max_draws {
                return Err(GilError::Generation(format!(
                    "could not place class {class_id} with |cos| < {MAX_RANDOM_COSINE} after \
                     {max_draws} draws; use a larger semantic dimension than {dim}"
                )));
            }
            let raw: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
            let Some(v) = normalized(&raw) else { continue };
            if !enforce
                || accepted
                    .iter()
                    .all(|u| libm::fabs(crate::tensor::dot(u, &v)) < MAX_RANDOM_COSINE)
            {
                break v;
            }
        };
        table.insert(class_id, &v, EmbeddingSource::Random)?;
        accepted.push(v);
    }
    Ok(table)
}
