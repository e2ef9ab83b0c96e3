//! The single document a run is driven by.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{GilError, Result};
use crate::gan::GanConfig;
use crate::pipeline::{PipelineConfig, Settings};
use crate::replay::CvaeConfig;

/// The synthetic benchmark: pretraining classes take ids `0..pretrain_classes`
/// and fine-tuning classes follow them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub pretrain_classes: usize,
    pub finetune_classes: usize,
    /// How many fine-tuning classes are held out as unseen.
    pub unseen_classes: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub noise_std: f64,
    pub samples_min: usize,
    pub samples_max: usize,
    /// Fraction of every trained class kept back for testing.
    pub test_fraction: f64,
    /// Seed of the data and embeddings (the run seeds drive everything else).
    pub seed: u64,
    /// Noise added to the embeddings the models see; the data is always
    /// generated from the clean ones.
    pub embedding_noise: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            pretrain_classes: 40,
            finetune_classes: 30,
            unseen_classes: 10,
            feature_dim: 64,
            semantic_dim: 64,
            noise_std: 0.5,
            samples_min: 20,
            samples_max: 40,
            test_fraction: 0.2,
            seed: 0,
            embedding_noise: 0.0,
        }
    }
}

impl BenchmarkConfig {
    pub fn total_classes(&self) -> usize {
        self.pretrain_classes + self.finetune_classes
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_classes: self.total_classes(),
            samples_min: self.samples_min,
            samples_max: self.samples_max,
            feature_dim: self.feature_dim,
            semantic_dim: self.semantic_dim,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn seen_fraction(&self) -> f64 {
        (self.finetune_classes - self.unseen_classes) as f64 / self.finetune_classes as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        if self.pretrain_classes < 2 {
            return Err(GilError::Config("data: at least 2 pretraining classes are needed".into()));
        }
        if self.unseen_classes == 0 || self.unseen_classes >= self.finetune_classes {
            return Err(GilError::Config(format!(
                "data: unseen_classes must be in 1..{}",
                self.finetune_classes
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(GilError::Config("data: test_fraction must be in (0, 1)".into()));
        }
        if self.samples_min < 2 {
            return Err(GilError::Config("data: samples_min must be at least 2 to hold out a test instance".into()));
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(GilError::Config("data: embedding_noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also adapt to seen and unseen classes together and report u, s and H.
    pub gzsl: bool,
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { gzsl: true, top_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: BenchmarkConfig,
    pub gan: GanConfig,
    pub cvae: CvaeConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: BenchmarkConfig::default(),
            gan: GanConfig::default(),
            cvae: CvaeConfig::default(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs".to_string(),
        }
    }
}

impl RunConfig {
    /// Sizes small enough for a single core: a full paired comparison over
    /// five seeds finishes in minutes.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.gan.hidden = 128;
        c.gan.noise_dim = 16;
        c.gan.steps = 1000;
        c.gan.cls_weight = 1.0;
        c.gan.generator_adam = c.gan.generator_adam.with_lr(4e-4);
        c.gan.critic_adam = c.gan.critic_adam.with_lr(1e-3);
        c.cvae.hidden = 64;
        c.cvae.latent = 16;
        c.cvae.epochs = 800;
        c.cvae.finetune_epochs = 100;
        c.pipeline.head_hidden = 64;
        c.pipeline.pretrain_epochs = 40;
        c.pipeline.epochs = 100;
        c.pipeline.adapt_epochs = 50;
        c
    }

    /// Every hidden layer at 4096 and a 512-wide encoder latent, over
    /// 768-dimensional features and embeddings.
    pub fn large() -> Self {
        let mut c = RunConfig::default();
        c.data.feature_dim = 768;
        c.data.semantic_dim = 768;
        c.gan.hidden = 4096;
        c.cvae.hidden = 4096;
        c.cvae.latent = 512;
        c.pipeline.head_hidden = 4096;
        c
    }

    /// Short hash of the configuration with its seed list and output
    /// directory left out: runs with equal digests differ only in the seed.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.seeds.clear();
        c.output_dir.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn settings(&self) -> Settings<'_> {
        Settings { gan: &self.gan, cvae: &self.cvae, pipeline: &self.pipeline }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.gan.validate()?;
        self.pipeline.validate()?;
        if self.cvae.hidden == 0 || self.cvae.latent == 0 {
            return Err(GilError::Config("cvae: hidden and latent must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(GilError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(GilError::Config("seeds must be distinct".into()));
        }
        if self.eval.top_k == 0 {
            return Err(GilError::Config("eval: top_k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        RunConfig::large().validate().unwrap();
    }

    #[test]
    fn standard_split_is_twenty_ten() {
        let c = BenchmarkConfig::default();
        let s = crate::data::split(&(40..70).collect::<Vec<_>>(), c.seen_fraction(), 3).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (20, 10));
    }

    #[test]
    fn digest_ignores_seeds_and_output() {
        let a = RunConfig::desk();
        let b = RunConfig { seeds: vec![9], output_dir: "elsewhere".into(), ..RunConfig::desk() };
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
        let mut c = RunConfig::desk();
        c.pipeline.synth_percent = 50.0;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let c = RunConfig { seeds: vec![1, 1], ..RunConfig::default() };
        assert!(matches!(c.validate(), Err(GilError::Config(_))));
    }
}
