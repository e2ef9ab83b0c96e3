//! A trained run on disk: `state.gilb` (replay buffer), `state.gilm` (every
//! network and the classifier) and `manifest.json` (everything else).
//!
//! Parameters are stored as f32, so a loaded state is the saved one rounded
//! to single precision. `run` scores the reloaded state so that `eval` on the
//! checkpoint reproduces its numbers exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use gil_core::config::RunConfig;
use gil_core::data::ClassId;
use gil_core::gan::{Conditioning, GanConfig, GanModels};
use gil_core::nn::Mlp;
use gil_core::pipeline::{ClassifierHead, ExperimentState, HeadModel, RunMode, ScheduleSpec, StageLog};
use gil_core::replay::CvaeModel;
use gil_core::{GilError, Tensor};

use crate::error::{CliError, Result};
use crate::formats;

pub const BUFFER_FILE: &str = "state.gilb";
pub const MODELS_FILE: &str = "state.gilm";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mode: RunMode,
    pub seed: u64,
    pub stage: usize,
    pub schedule: ScheduleSpec,
    pub log: Vec<StageLog>,
    pub conditioning: Conditioning,
    pub classes: Vec<ClassId>,
    pub classifier_scale: f64,
    pub classifier_learned: bool,
    /// Of the generator as trained, before rounding to f32.
    pub generator_checksum: u64,
    pub test_synth_count: usize,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
}

fn mlp_blocks(out: &mut Vec<(String, Tensor)>, name: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers().iter().enumerate() {
        out.push((format!("{name}.{i}.weight"), layer.weight.clone()));
        out.push((format!("{name}.{i}.bias"), layer.bias.clone()));
    }
}

/// Named parameter blocks of a state, in a fixed order.
pub fn model_blocks(state: &ExperimentState) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    mlp_blocks(&mut out, "generator", &state.gan.generator);
    mlp_blocks(&mut out, "critic", &state.gan.critic);
    mlp_blocks(&mut out, "projection", &state.gan.projection);
    mlp_blocks(&mut out, "statistics", &state.gan.statistics);
    mlp_blocks(&mut out, "head", &state.head.network);
    if let Some(cvae) = &state.cvae {
        mlp_blocks(&mut out, "encoder", &cvae.encoder);
        mlp_blocks(&mut out, "decoder", &cvae.decoder);
    }
    let c = &state.classifier;
    if !c.is_empty() {
        let s = c.weights()[0].len();
        let w = c.weights().iter().flatten().copied().collect();
        out.push(("classifier.weights".into(), Tensor::new(vec![c.len(), s], w).expect("shape")));
        out.push(("classifier.bias".into(), Tensor::new(vec![c.len()], c.bias().to_vec()).expect("shape")));
    }
    out
}

/// The config is stored without its output directory, so a checkpoint does
/// not depend on where it was written.
pub fn manifest_of(state: &ExperimentState, config: &RunConfig) -> Manifest {
    let mut config = config.clone();
    config.output_dir.clear();
    Manifest {
        mode: state.mode,
        seed: state.seed,
        stage: state.stage,
        schedule: state.schedule.clone(),
        log: state.log.clone(),
        conditioning: state.gan.conditioning,
        classes: state.classifier.classes().to_vec(),
        classifier_scale: state.classifier.scale(),
        classifier_learned: state.classifier.learned(),
        generator_checksum: state.generator_checksum,
        test_synth_count: state.test_synth_count,
        seeds: config.seeds.clone(),
        config,
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub fn save(state: &ExperimentState, config: &RunConfig, dir: &Path) -> Result<()> {
    formats::save_buffer(&state.buffer, &dir.join(BUFFER_FILE))?;
    formats::save_models(&model_blocks(state), &dir.join(MODELS_FILE))?;
    formats::write(&dir.join(MANIFEST_FILE), &to_json(&manifest_of(state, config)))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

struct Blocks {
    items: Vec<(String, Tensor)>,
    used: Vec<bool>,
}

impl Blocks {
    fn take(&mut self, name: &str) -> Option<Tensor> {
        let i = self.items.iter().position(|b| b.0 == name)?;
        self.used[i] = true;
        Some(self.items[i].1.clone())
    }

    fn has(&self, name: &str) -> bool {
        self.items.iter().any(|b| b.0 == name)
    }

    fn fill(&mut self, name: &str, mlp: &mut Mlp) -> Result<(), GilError> {
        for (i, layer) in mlp.layers_mut().iter_mut().enumerate() {
            for (part, slot) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let key = format!("{name}.{i}.{part}");
                let t = self.take(&key).ok_or_else(|| GilError::Consistency(format!("missing block {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(GilError::Consistency(format!(
                        "block {key} has shape {:?}, the config implies {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        let extra = format!("{name}.{}.weight", mlp.layers().len());
        if self.has(&extra) {
            return Err(GilError::Consistency(format!("{name} has more layers than the config implies")));
        }
        Ok(())
    }
}

/// Rebuild the networks from their stored parameters; shapes come from the
/// manifest's config and must match the file.
pub fn state_from_parts(manifest: &Manifest, buffer: gil_core::replay::ReplayBuffer, blocks: Vec<(String, Tensor)>) -> Result<ExperimentState, GilError> {
    let c = &manifest.config;
    let (d, s) = (c.data.feature_dim, c.data.semantic_dim);
    let used = vec![false; blocks.len()];
    let mut blocks = Blocks { items: blocks, used };

    let gan_config = GanConfig { conditioning: manifest.conditioning, ..c.gan.clone() };
    let mut gan = GanModels::new(manifest.conditioning, d, s, &gan_config, 0);
    blocks.fill("generator", &mut gan.generator)?;
    blocks.fill("critic", &mut gan.critic)?;
    blocks.fill("projection", &mut gan.projection)?;
    blocks.fill("statistics", &mut gan.statistics)?;
    let mut head = HeadModel::new(d, c.pipeline.head_hidden, s, 0);
    blocks.fill("head", &mut head.network)?;
    let cvae = if blocks.has("encoder.0.weight") {
        let mut m = CvaeModel::new(s, d, &c.cvae, 0);
        blocks.fill("encoder", &mut m.encoder)?;
        blocks.fill("decoder", &mut m.decoder)?;
        Some(m)
    } else {
        None
    };

    let classifier = if manifest.classes.is_empty() {
        ClassifierHead::new(manifest.classifier_scale, manifest.classifier_learned)
    } else {
        let missing = |k: &str| GilError::Consistency(format!("missing block {k}"));
        let w = blocks.take("classifier.weights").ok_or_else(|| missing("classifier.weights"))?;
        let b = blocks.take("classifier.bias").ok_or_else(|| missing("classifier.bias"))?;
        let k = manifest.classes.len();
        if w.shape() != [k, s] || b.shape() != [k] {
            return Err(GilError::Consistency(format!(
                "classifier blocks {:?} and {:?} do not fit {k} classes of dimension {s}",
                w.shape(),
                b.shape()
            )));
        }
        let weights = w.data().chunks(s).map(<[f64]>::to_vec).collect();
        ClassifierHead::from_parts(manifest.classes.clone(), weights, b.data().to_vec(), manifest.classifier_scale, manifest.classifier_learned)?
    };

    if let Some(i) = blocks.used.iter().position(|u| !u) {
        return Err(GilError::Consistency(format!("unexpected block {}", blocks.items[i].0)));
    }
    if buffer.records().first().is_some_and(|r| r.dim() != d || r.embedding.len() != s) {
        return Err(GilError::Consistency("buffer dimensions differ from the config".into()));
    }

    Ok(ExperimentState {
        mode: manifest.mode,
        buffer,
        cvae,
        generator_checksum: gan.generator.checksum(),
        gan,
        head,
        classifier,
        stage: manifest.stage,
        schedule: manifest.schedule.clone(),
        log: manifest.log.clone(),
        seed: manifest.seed,
        test_synth_count: manifest.test_synth_count,
    })
}

pub fn load(dir: &Path) -> Result<(ExperimentState, Manifest)> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let buffer = formats::load_buffer(&dir.join(BUFFER_FILE))?;
    let blocks = formats::load_models(&dir.join(MODELS_FILE))?;
    let state = state_from_parts(&manifest, buffer, blocks)?;
    Ok((state, manifest))
}
