//! The replay memory: per-class prototypes and noise, the buffer that holds
//! them, and the semantic-to-visual encoder `E` that predicts them from a
//! class embedding.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::error::{at_step, GilError, Result};
use crate::nn::{widths, Activation, AdamConfig, AdamState, Graph, Mlp, NnError};
use crate::rng;
use crate::tensor::Tensor;

/// One buffered class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub class_id: ClassId,
    /// Mean feature of the class.
    pub prototype: Vec<f64>,
    /// Per-dimension population standard deviation around the prototype.
    pub noise: Vec<f64>,
    pub embedding: Vec<f64>,
    /// Stage at which the class was archived (0 = initialization).
    pub stage: usize,
    /// Raw instances kept by the instance-based memory variants; empty for
    /// the default prototype + noise memory.
    pub instances: Vec<Vec<f64>>,
}

impl ClassRecord {
    pub fn new(
        class_id: ClassId,
        prototype: Vec<f64>,
        noise: Vec<f64>,
        embedding: Vec<f64>,
        stage: usize,
    ) -> Result<Self> {
        if prototype.len() != noise.len() {
            return Err(GilError::Input(format!(
                "class {class_id}: prototype has {} dims, noise has {}",
                prototype.len(),
                noise.len()
            )));
        }
        if noise.iter().any(|&s| !(s >= 0.0)) {
            return Err(GilError::Input(format!("class {class_id}: negative noise")));
        }
        Ok(ClassRecord {
            class_id,
            prototype: to_f32(prototype),
            noise: to_f32(noise),
            embedding: to_f32(embedding),
            stage,
            instances: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.prototype.len()
    }

    /// Keep raw instances alongside the statistics.
    pub fn with_instances(mut self, instances: Vec<Vec<f64>>) -> Self {
        self.instances = instances.into_iter().map(to_f32).collect();
        self
    }
}

/// Round to the precision of the buffer file, so a saved buffer loads back
/// bit-identical.
fn to_f32(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
    v
}

/// Mean and per-dimension population standard deviation of one class.
///
/// Single pass (Welford); a one-sample class has zero noise.
pub fn compute_prototype<F: AsRef<[f64]>>(features: &[F]) -> Result<(Vec<f64>, Vec<f64>)> {
    let Some(first) = features.first() else {
        return Err(GilError::Input("cannot compute a prototype of an empty class".into()));
    };
    let d = first.as_ref().len();
    let mut mean = alloc::vec![0.0; d];
    let mut m2 = alloc::vec![0.0; d];
    for (k, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != d {
            return Err(GilError::Input(format!("feature {k} has {} dims, expected {d}", f.len())));
        }
        let n = (k + 1) as f64;
        for j in 0..d {
            let delta = f[j] - mean[j];
            mean[j] += delta / n;
            m2[j] += delta * (f[j] - mean[j]);
        }
    }
    let n = features.len() as f64;
    let std = m2.iter().map(|&v| libm::sqrt((v / n).max(0.0))).collect();
    Ok((mean, std))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: usize,
    pub classes: Vec<ClassId>,
}

/// Append-only list of class records, one per class id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ReplayBuffer {
    records: Vec<ClassRecord>,
    stages: Vec<StageEntry>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: ClassRecord) -> Result<()> {
        if self.contains(record.class_id) {
            return Err(GilError::Consistency(format!(
                "class {} is already in the replay buffer",
                record.class_id
            )));
        }
        if let Some(first) = self.records.first() {
            if first.dim() != record.dim() || first.embedding.len() != record.embedding.len() {
                return Err(GilError::Consistency(format!(
                    "class {} has dimensions ({}, {}), buffer holds ({}, {})",
                    record.class_id,
                    record.dim(),
                    record.embedding.len(),
                    first.dim(),
                    first.embedding.len()
                )));
            }
        }
        match self.stages.last_mut() {
            Some(entry) if entry.stage == record.stage => entry.classes.push(record.class_id),
            _ => self.stages.push(StageEntry { stage: record.stage, classes: alloc::vec![record.class_id] }),
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.records.iter().any(|r| r.class_id == class_id)
    }

    pub fn get(&self, class_id: ClassId) -> Option<&ClassRecord> {
        self.records.iter().find(|r| r.class_id == class_id)
    }

    pub fn records(&self) -> &[ClassRecord] {
        &self.records
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    pub fn stage_log(&self) -> &[StageEntry] {
        &self.stages
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub hidden: usize,
    pub latent: usize,
    /// Epochs when the encoder is first trained on the initial buffer.
    pub epochs: usize,
    /// Epochs of each fine-tune after new classes are archived.
    pub finetune_epochs: usize,
    /// Weight of the KL term; 0 trains with mean squared error alone.
    pub kl_weight: f64,
    pub adam: AdamConfig,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            hidden: 256,
            latent: 64,
            epochs: 600,
            finetune_epochs: 150,
            kl_weight: 0.0,
            adam: AdamConfig::standard(),
        }
    }
}

/// Semantic-to-visual encoder: embedding -> latent -> prototype ++ noise.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    /// `s -> hidden -> hidden -> 2 * latent` (mean ++ log-variance).
    pub encoder: Mlp,
    /// `latent -> hidden -> hidden -> 2 * d`, output layer zero-initialized.
    pub decoder: Mlp,
}

impl CvaeModel {
    pub fn new(semantic_dim: usize, feature_dim: usize, config: &CvaeConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "cvae-init");
        let act = Activation::LeakyRelu(0.2);
        let encoder = Mlp::init(
            &widths(semantic_dim, config.hidden, 2, 2 * config.latent),
            act,
            Activation::Linear,
            &mut r,
        );
        let decoder = Mlp::init(
            &widths(config.latent, config.hidden, 2, 2 * feature_dim),
            act,
            Activation::Linear,
            &mut r,
        )
        .with_zero_output();
        CvaeModel { encoder, decoder }
    }

    pub fn semantic_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.decoder.output_dim() / 2
    }

    /// Deterministic prediction for a batch of embeddings: `n x 2d` rows of
    /// `mu_hat ++ |sigma_hat|`.
    pub fn encode_batch(&self, embeddings: &Tensor) -> Result<Tensor> {
        if embeddings.cols() != self.semantic_dim() {
            return Err(GilError::Input(format!(
                "embedding dimension {} does not match encoder input {}",
                embeddings.cols(),
                self.semantic_dim()
            )));
        }
        let latent = self.latent_dim();
        let enc = self.encoder.apply(embeddings)?;
        let n = enc.rows();
        let mut z = Vec::with_capacity(n * latent);
        for r in 0..n {
            z.extend_from_slice(&enc.row_slice(r)[..latent]);
        }
        let out = self.decoder.apply(&Tensor::matrix(n, latent, z))?;
        let d = self.feature_dim();
        Ok(out.map_indexed(|i, v| if i % (2 * d) >= d { libm::fabs(v) } else { v }))
    }

    /// Predicted `(prototype, noise)` for one embedding; noise is
    /// non-negative.
    pub fn encode(&self, embedding: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.encode_batch(&Tensor::row(embedding))?;
        let d = self.feature_dim();
        Ok((out.data()[..d].to_vec(), out.data()[d..].to_vec()))
    }
}

/// Mean squared error of the encoder over `records`.
pub fn cvae_loss<'a>(
    model: &CvaeModel,
    records: impl IntoIterator<Item = &'a ClassRecord>,
) -> Result<f64> {
    let records: Vec<&ClassRecord> = records.into_iter().collect();
    if records.is_empty() {
        return Err(GilError::Input("no records to evaluate".into()));
    }
    let (inputs, targets) = batch(&records);
    let pred = model.encode_batch(&inputs)?;
    let se: f64 = pred.data().iter().zip(targets.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(se / pred.len() as f64)
}

fn batch(records: &[&ClassRecord]) -> (Tensor, Tensor) {
    let inputs = Tensor::from_rows(&records.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>());
    let targets = Tensor::from_rows(
        &records
            .iter()
            .map(|r| r.prototype.iter().chain(&r.noise).copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    );
    (inputs, targets)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeReport {
    /// Training loss per epoch (reconstruction plus weighted KL).
    pub losses: Vec<f64>,
}

impl CvaeReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Loss at the end is no higher than at the start of the last 10% of
    /// epochs.
    pub fn settled(&self) -> bool {
        let n = self.losses.len();
        if n < 2 {
            return true;
        }
        let start = n - (n / 10).max(1) - 1;
        self.losses[n - 1] <= self.losses[start]
    }
}

/// Full-batch training of `model` to reproduce every buffered `(mu, sigma)`.
pub fn train_cvae(
    model: &mut CvaeModel,
    buffer: &ReplayBuffer,
    epochs: usize,
    config: &CvaeConfig,
    seed: u64,
) -> Result<CvaeReport> {
    if buffer.is_empty() {
        return Err(GilError::Input("cannot train the encoder on an empty buffer".into()));
    }
    let records: Vec<&ClassRecord> = buffer.records().iter().collect();
    if records[0].dim() != model.feature_dim() || records[0].embedding.len() != model.semantic_dim() {
        return Err(GilError::Input("buffer dimensions do not match the encoder".into()));
    }
    let (inputs, targets) = batch(&records);
    let n = records.len();
    let d = model.feature_dim();
    let latent = model.latent_dim();
    let mut enc_opt = AdamState::new(config.adam, &model.encoder);
    let mut dec_opt = AdamState::new(config.adam, &model.decoder);
    let mut r = rng::stream(seed, "cvae-train");
    let mut losses = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let mut step = || -> Result<(f64, Vec<Tensor>, Vec<Tensor>), NnError> {
            let mut g = Graph::new();
            let x = g.constant(inputs.clone());
            let enc = model.encoder.forward(&mut g, x)?;
            let mean = g.slice_cols(enc.output, 0, latent)?;
            let (z, kl) = if config.kl_weight > 0.0 {
                let logvar = g.slice_cols(enc.output, latent, 2 * latent)?;
                let half = g.scale(logvar, 0.5)?;
                let std = g.exp(half)?;
                let eps = Tensor::matrix(n, latent, (0..n * latent).map(|_| rng::normal(&mut r)).collect());
                let eps = g.constant(eps);
                let noise = g.mul(std, eps)?;
                let z = g.add(mean, noise)?;
                let one_plus = g.add_scalar(logvar, 1.0)?;
                let m2 = g.square(mean)?;
                let var = g.exp(logvar)?;
                let t = g.sub(one_plus, m2)?;
                let t = g.sub(t, var)?;
                let s = g.sum(t)?;
                (z, Some(g.scale(s, -0.5 * config.kl_weight / n as f64)?))
            } else {
                (mean, None)
            };
            let dec = model.decoder.forward(&mut g, z)?;
            let mu_hat = g.slice_cols(dec.output, 0, d)?;
            let sigma_raw = g.slice_cols(dec.output, d, 2 * d)?;
            let sigma_hat = g.abs(sigma_raw)?;
            let pred = g.concat_cols(mu_hat, sigma_hat)?;
            let target = g.constant(targets.clone());
            let diff = g.sub(pred, target)?;
            let sq = g.square(diff)?;
            let mut loss = g.mean(sq)?;
            if let Some(kl) = kl {
                loss = g.add(loss, kl)?;
            }
            let grads = g.backward(loss)?;
            Ok((
                g.value(loss).item(),
                model.encoder.gradients(&grads, &enc),
                model.decoder.gradients(&grads, &dec),
            ))
        };
        let (loss, enc_grads, dec_grads) = at_step(step(), "cvae loss", epoch)?;
        at_step(enc_opt.step(&mut model.encoder, &enc_grads), "cvae encoder gradient", epoch)?;
        at_step(dec_opt.step(&mut model.decoder, &dec_grads), "cvae decoder gradient", epoch)?;
        losses.push(loss);
    }
    Ok(CvaeReport { losses })
}
