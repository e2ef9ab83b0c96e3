//! Metrics, the experiment harness shared by the command line and the test
//! suites, multi-seed aggregation, and the ablation grid.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{BenchmarkConfig, RunConfig};
use crate::data::{split, synth_dataset, ClassId, Dataset, SplitSpec};
use crate::error::{GilError, Result};
use crate::pipeline::{
    anchors_for, build_foundation, cosine_scores, predict_batch, run_baseline, run_gil, zsl_adapt, Anchors,
    DataMix, ExperimentState, Foundation, GeneratorMode, HeadModel, MemoryVariant, RunInputs, RunMode, StageEval,
};
use crate::rng;
use crate::semantic::{random_embeddings, EmbeddingTable};
use crate::tensor::Tensor;

/// Fraction of instances whose label is among the `k` best-scoring
/// candidates. Candidates are ranked by score, then by ascending class id.
pub fn top_k_accuracy(scores: &Tensor, candidates: &[ClassId], labels: &[ClassId], k: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(GilError::Input("top-k accuracy of an empty instance set".into()));
    }
    if scores.rows() != labels.len() || scores.cols() != candidates.len() {
        return Err(GilError::Input(format!(
            "{}x{} scores for {} instances and {} candidates",
            scores.rows(),
            scores.cols(),
            labels.len(),
            candidates.len()
        )));
    }
    if k == 0 || k > candidates.len() {
        return Err(GilError::Input(format!("k = {k} outside 1..={}", candidates.len())));
    }
    let mut hits = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = scores.row_slice(i);
        let Some(t) = candidates.iter().position(|&c| c == label) else { continue };
        // Rank of the true class: candidates strictly ahead of it.
        let ahead = (0..candidates.len())
            .filter(|&j| row[j] > row[t] || (row[j] == row[t] && candidates[j] < candidates[t]))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// `2us / (u + s)`, and 0 when both are 0. Equal inputs come back exactly.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if !(u >= 0.0 && s >= 0.0) {
        return Err(GilError::Input(format!("harmonic mean of ({u}, {s})")));
    }
    Ok(if u == s {
        u
    } else {
        2.0 * (u * s) / (u + s)
    })
}

/// Top-1 accuracy of the state's head on pretraining classes.
pub fn forgetting_eval(state: &ExperimentState, test: &Dataset, anchors: &Anchors) -> Result<f64> {
    accuracy(&state.head, test, anchors)
}

/// Top-1 accuracy of 1-NN prediction with `head` over `anchors`.
pub fn accuracy(head: &HeadModel, test: &Dataset, anchors: &Anchors) -> Result<f64> {
    if test.is_empty() {
        return Err(GilError::Input("empty test split".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let pred = predict_batch(head, &test.tensor(&all), anchors)?;
    let hits = pred.iter().enumerate().filter(|&(i, &c)| c == test.class_of(i)).count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stage: usize,
    pub completion: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gzsl {
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// Metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub seed: u64,
    pub mode: RunMode,
    /// Unseen-class accuracy with only unseen candidates.
    pub zsl_top1: f64,
    pub zsl_top5: f64,
    pub gzsl: Option<Gzsl>,
    /// Accuracy on held-out instances of the pretraining classes.
    pub pretrain_retention: f64,
    pub stage_curve: Vec<CurvePoint>,
    /// Identifies the configuration without its seed list; runs are only
    /// aggregated when it matches.
    pub config_digest: String,
}

impl RunResult {
    /// Named scalar metrics in a fixed order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut m = vec![
            ("zsl_top1", self.zsl_top1),
            ("zsl_top5", self.zsl_top5),
            ("pretrain_retention", self.pretrain_retention),
        ];
        if let Some(g) = self.gzsl {
            m.extend([("gzsl_u", g.u), ("gzsl_s", g.s), ("gzsl_h", g.h)]);
        }
        m
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub stage: usize,
    pub completion: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub metrics: Vec<MetricSummary>,
    /// Present when every run logged the same stages.
    pub curve: Vec<CurveSummary>,
}

impl Aggregate {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Per-metric mean and population std over runs of one configuration.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Aggregate> {
    if results.len() < 2 {
        return Err(GilError::Input(format!("aggregation needs at least 2 runs, got {}", results.len())));
    }
    let first = &results[0];
    let names: Vec<&str> = first.metrics().iter().map(|m| m.0).collect();
    for r in &results[1..] {
        if r.config_digest != first.config_digest || r.mode != first.mode {
            return Err(GilError::Input("cannot aggregate runs of different configurations".into()));
        }
        if r.metrics().iter().map(|m| m.0).ne(names.iter().copied()) {
            return Err(GilError::Input("cannot aggregate runs reporting different metrics".into()));
        }
    }
    let metrics = names
        .iter()
        .enumerate()
        .map(|(j, &name)| {
            let v: Vec<f64> = results.iter().map(|r| r.metrics()[j].1).collect();
            let (mean, std) = mean_std(&v);
            MetricSummary { name: name.to_string(), mean, std }
        })
        .collect();
    let same_curve = results.iter().all(|r| {
        r.stage_curve.len() == first.stage_curve.len()
            && r.stage_curve.iter().zip(&first.stage_curve).all(|(a, b)| a.stage == b.stage)
    });
    let curve = if same_curve {
        (0..first.stage_curve.len())
            .map(|i| {
                let v: Vec<f64> = results.iter().map(|r| r.stage_curve[i].accuracy).collect();
                let (mean, std) = mean_std(&v);
                let c: Vec<f64> = results.iter().map(|r| r.stage_curve[i].completion).collect();
                CurveSummary { stage: first.stage_curve[i].stage, completion: mean_std(&c).0, mean, std }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Aggregate { runs: results.len(), metrics, curve })
}

/// Generated data of the synthetic benchmark, with the embeddings it was
/// generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub pretrain: Dataset,
    pub finetune: Dataset,
    pub embeddings: EmbeddingTable,
}

pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    let ids: Vec<ClassId> = (0..config.total_classes() as ClassId).collect();
    let embeddings = random_embeddings(&ids, config.semantic_dim, rng::derive(config.seed, "embeddings"))?;
    let all = synth_dataset(&config.synth_config(), &embeddings)?;
    let p = config.pretrain_classes;
    Ok(Benchmark {
        pretrain: all.subset(&ids[..p]),
        finetune: all.subset(&ids[p..]),
        embeddings,
    })
}

/// The per-seed view of a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub split: SplitSpec,
    pub pretrain_train: Dataset,
    pub pretrain_test: Dataset,
    pub seen_train: Dataset,
    pub seen_test: Dataset,
    /// Every instance of the unseen classes.
    pub unseen_test: Dataset,
    /// The embeddings the models are given.
    pub embeddings: EmbeddingTable,
}

impl Partition {
    pub fn pretrain_classes(&self) -> Vec<ClassId> {
        self.pretrain_train.classes()
    }

    pub fn inputs(&self, with_curve: bool) -> RunInputs<'_> {
        RunInputs {
            pretrain: &self.pretrain_train,
            seen: &self.seen_train,
            embeddings: &self.embeddings,
            stage_eval: with_curve.then_some(StageEval { unseen: &self.split.unseen, test: &self.unseen_test }),
        }
    }
}

pub fn partition(bench: &Benchmark, config: &BenchmarkConfig, seed: u64) -> Result<Partition> {
    let split = split(&bench.finetune.classes(), config.seen_fraction(), rng::derive(seed, "split"))?;
    let (pretrain_train, pretrain_test) = bench.pretrain.holdout(config.test_fraction, rng::derive(seed, "pretrain-holdout"))?;
    let (seen_train, seen_test) =
        bench.finetune.subset(&split.seen).holdout(config.test_fraction, rng::derive(seed, "seen-holdout"))?;
    let embeddings = bench.embeddings.perturbed(config.embedding_noise, rng::derive(config.seed, "embedding-noise"))?;
    Ok(Partition {
        unseen_test: bench.finetune.subset(&split.unseen),
        split,
        pretrain_train,
        pretrain_test,
        seen_train,
        seen_test,
        embeddings,
    })
}

/// What a foundation depends on; runs with equal keys share one.
#[derive(Clone, Debug, PartialEq)]
struct FoundationKey {
    seed: u64,
    data: BenchmarkConfig,
    gan: crate::gan::GanConfig,
    head: (usize, u64, crate::nn::AdamConfig, usize, usize),
}

impl FoundationKey {
    fn of(config: &RunConfig, seed: u64) -> Self {
        let p = &config.pipeline;
        FoundationKey {
            seed,
            data: config.data.clone(),
            gan: config.gan.clone(),
            head: (p.head_hidden, p.classifier_scale.to_bits(), p.head_adam, p.pretrain_epochs, p.batch_size),
        }
    }
}

/// Foundations already built in this process.
#[derive(Default)]
pub struct FoundationCache {
    entries: Vec<(FoundationKey, Foundation)>,
}

impl FoundationCache {
    pub fn new() -> Self {
        FoundationCache::default()
    }

    pub fn get_or_build(&mut self, config: &RunConfig, part: &Partition, seed: u64) -> Result<&Foundation> {
        let key = FoundationKey::of(config, seed);
        if let Some(i) = self.entries.iter().position(|e| e.0 == key) {
            return Ok(&self.entries[i].1);
        }
        let f = build_foundation(&part.pretrain_train, &part.embeddings, config.settings(), rng::derive(seed, "foundation"))?;
        self.entries.push((key, f));
        Ok(&self.entries.last().unwrap().1)
    }
}

/// Score a trained state: retention on the pretraining classes, zero-shot
/// accuracy on the unseen classes, optionally the generalized setting, and
/// the logged stage curve.
pub fn evaluate(state: &ExperimentState, part: &Partition, config: &RunConfig, seed: u64) -> Result<RunResult> {
    let mode = config.pipeline.anchors;
    let pretrain = part.pretrain_classes();
    let anchors = anchors_for(state, &state.head, &pretrain, &part.embeddings, mode)?;
    let pretrain_retention = forgetting_eval(state, &part.pretrain_test, &anchors)?;

    let (zsl_top1, zsl_top5) =
        zsl_metrics(state, part, config, &part.split.unseen, &part.unseen_test, rng::derive(seed, "zsl"))?;
    let gzsl = if config.eval.gzsl { Some(gzsl_metrics(state, part, config, rng::derive(seed, "gzsl"))?) } else { None };

    Ok(RunResult {
        seed,
        mode: state.mode,
        zsl_top1,
        zsl_top5,
        gzsl,
        pretrain_retention,
        stage_curve: state
            .log
            .iter()
            .filter_map(|l| l.unseen_accuracy.map(|accuracy| CurvePoint { stage: l.stage, completion: l.completion, accuracy }))
            .collect(),
        config_digest: config.digest(),
    })
}

/// Adapt to `classes` and score `test` against them: top-1 and top-k.
pub fn zsl_metrics(
    state: &ExperimentState,
    part: &Partition,
    config: &RunConfig,
    classes: &[ClassId],
    test: &Dataset,
    seed: u64,
) -> Result<(f64, f64)> {
    let mode = config.pipeline.anchors;
    let adapted = zsl_adapt(state, classes, &part.embeddings, config.settings(), seed)?;
    let anchors = anchors_for(state, &adapted.head, classes, &part.embeddings, mode)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let scores = cosine_scores(&adapted.head, &test.tensor(&all), &anchors)?;
    let labels: Vec<ClassId> = all.iter().map(|&i| test.class_of(i)).collect();
    let top1 = top_k_accuracy(&scores, anchors.ids(), &labels, 1)?;
    let topk = top_k_accuracy(&scores, anchors.ids(), &labels, config.eval.top_k.min(anchors.len()))?;
    Ok((top1, topk))
}

/// Adapt to seen and unseen classes together; accuracy on each part and
/// their harmonic mean.
pub fn gzsl_metrics(state: &ExperimentState, part: &Partition, config: &RunConfig, seed: u64) -> Result<Gzsl> {
    let mut targets = part.split.seen.clone();
    targets.extend_from_slice(&part.split.unseen);
    targets.sort_unstable();
    let adapted = zsl_adapt(state, &targets, &part.embeddings, config.settings(), seed)?;
    let anchors = anchors_for(state, &adapted.head, &targets, &part.embeddings, config.pipeline.anchors)?;
    let u = accuracy(&adapted.head, &part.unseen_test, &anchors)?;
    let s = accuracy(&adapted.head, &part.seen_test, &anchors)?;
    Ok(Gzsl { u, s, h: harmonic_mean(u, s)? })
}

/// Train one run of `mode` for `seed` and score it.
pub fn run_experiment(
    bench: &Benchmark,
    config: &RunConfig,
    mode: RunMode,
    seed: u64,
    cache: &mut FoundationCache,
) -> Result<(ExperimentState, RunResult)> {
    config.validate()?;
    let part = partition(bench, &config.data, seed)?;
    let foundation = cache.get_or_build(config, &part, seed)?;
    let settings = config.settings();
    let state = match mode {
        RunMode::Gil => run_gil(&part.inputs(config.pipeline.stage_curve), foundation, settings, seed)?,
        RunMode::Baseline => run_baseline(&part.inputs(false), foundation, settings, seed)?,
    };
    let result = evaluate(&state, &part, config, seed)?;
    Ok((state, result))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationName {
    MemoryVariant,
    SamplingPercent,
    SynthPercent,
    DataMix,
    GeneratorFreeze,
    EmbeddingSource,
}

impl AblationName {
    pub const ALL: [AblationName; 6] = [
        AblationName::MemoryVariant,
        AblationName::SamplingPercent,
        AblationName::SynthPercent,
        AblationName::DataMix,
        AblationName::GeneratorFreeze,
        AblationName::EmbeddingSource,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationName::MemoryVariant => "memory-variant",
            AblationName::SamplingPercent => "sampling-percent",
            AblationName::SynthPercent => "synth-percent",
            AblationName::DataMix => "data-mix",
            AblationName::GeneratorFreeze => "generator-freeze",
            AblationName::EmbeddingSource => "embedding-source",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        AblationName::ALL.into_iter().find(|a| a.as_str() == name)
    }

    /// The grid each ablation sweeps by default.
    pub fn default_grid(self) -> Vec<GridValue> {
        match self {
            AblationName::MemoryVariant => MemoryVariant::ALL.into_iter().map(GridValue::Memory).collect(),
            AblationName::SamplingPercent => {
                [1.0, 5.0, 10.0, 20.0, 50.0, 100.0].into_iter().map(GridValue::SamplingPercent).collect()
            }
            AblationName::SynthPercent => {
                [20.0, 50.0, 100.0, 150.0, 200.0].into_iter().map(GridValue::SynthPercent).collect()
            }
            AblationName::DataMix => {
                [DataMix::RealOnly, DataMix::Half, DataMix::SyntheticOnly].into_iter().map(GridValue::DataMix).collect()
            }
            AblationName::GeneratorFreeze => {
                [GeneratorMode::Frozen, GeneratorMode::FineTuned].into_iter().map(GridValue::Generator).collect()
            }
            AblationName::EmbeddingSource => [0.0, 0.5, 1.0].into_iter().map(GridValue::EmbeddingNoise).collect(),
        }
    }
}

/// One setting of an ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridValue {
    Memory(MemoryVariant),
    SamplingPercent(f64),
    SynthPercent(f64),
    DataMix(DataMix),
    Generator(GeneratorMode),
    EmbeddingNoise(f64),
}

impl GridValue {
    pub fn ablation(self) -> AblationName {
        match self {
            GridValue::Memory(_) => AblationName::MemoryVariant,
            GridValue::SamplingPercent(_) => AblationName::SamplingPercent,
            GridValue::SynthPercent(_) => AblationName::SynthPercent,
            GridValue::DataMix(_) => AblationName::DataMix,
            GridValue::Generator(_) => AblationName::GeneratorFreeze,
            GridValue::EmbeddingNoise(_) => AblationName::EmbeddingSource,
        }
    }

    pub fn label(self) -> String {
        match self {
            GridValue::Memory(m) => m.label().to_string(),
            GridValue::SamplingPercent(p) | GridValue::SynthPercent(p) => format!("{p}%"),
            GridValue::DataMix(DataMix::RealOnly) => "real only".to_string(),
            GridValue::DataMix(DataMix::Half) => "50:50".to_string(),
            GridValue::DataMix(DataMix::SyntheticOnly) => "synthetic only".to_string(),
            GridValue::Generator(GeneratorMode::Frozen) => "frozen".to_string(),
            GridValue::Generator(GeneratorMode::FineTuned) => "fine-tuned".to_string(),
            GridValue::EmbeddingNoise(n) if n == 0.0 => "clean".to_string(),
            GridValue::EmbeddingNoise(n) => format!("noise {n}"),
        }
    }

    pub fn apply(self, config: &mut RunConfig) {
        match self {
            GridValue::Memory(m) => config.pipeline.memory = m,
            GridValue::SamplingPercent(p) => config.pipeline.schedule_percent = p,
            GridValue::SynthPercent(p) => config.pipeline.synth_percent = p,
            GridValue::DataMix(m) => config.pipeline.data_mix = m,
            GridValue::Generator(g) => config.pipeline.generator = g,
            GridValue::EmbeddingNoise(n) => config.data.embedding_noise = n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub name: AblationName,
    pub values: Vec<GridValue>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn standard(name: AblationName, seeds: Vec<u64>) -> Self {
        AblationSpec { name, values: name.default_grid(), seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(GilError::Config(format!("{}: empty grid", self.name.as_str())));
        }
        if self.seeds.len() < 2 {
            return Err(GilError::Config(format!("{}: at least 2 seeds are needed", self.name.as_str())));
        }
        if let Some(v) = self.values.iter().find(|v| v.ablation() != self.name) {
            return Err(GilError::Config(format!("{}: grid value {v:?} belongs to another ablation", self.name.as_str())));
        }
        Ok(())
    }
}

/// One run of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub row: usize,
    pub label: String,
    pub seed: u64,
    pub config: RunConfig,
}

/// Every (grid value, seed) run, row-major. The same seeds are used in every
/// row so the rows differ only in the treatment.
pub fn ablation_cells(spec: &AblationSpec, base: &RunConfig) -> Result<Vec<AblationCell>> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (row, v) in spec.values.iter().enumerate() {
        let mut config = base.clone();
        v.apply(&mut config);
        config.seeds = spec.seeds.clone();
        config.validate()?;
        for &seed in &spec.seeds {
            cells.push(AblationCell { row, label: v.label(), seed, config: config.clone() });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub value: GridValue,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub name: AblationName,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Reduce cell results (in [`ablation_cells`] order) to one row per grid
/// value.
pub fn assemble_report(spec: &AblationSpec, results: &[RunResult]) -> Result<AblationReport> {
    spec.validate()?;
    let n = spec.seeds.len();
    if results.len() != spec.values.len() * n {
        return Err(GilError::Input(format!(
            "{} results for a grid of {} cells",
            results.len(),
            spec.values.len() * n
        )));
    }
    let rows = spec
        .values
        .iter()
        .zip(results.chunks(n))
        .map(|(&value, chunk)| {
            Ok(AblationRow { label: value.label(), value, aggregate: aggregate_runs(chunk)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { name: spec.name, seeds: spec.seeds.clone(), rows })
}

/// Run the whole grid in this thread.
pub fn run_ablation(spec: &AblationSpec, base: &RunConfig, bench: &Benchmark) -> Result<AblationReport> {
    let mut cache = FoundationCache::new();
    let mut results = Vec::new();
    for cell in ablation_cells(spec, base)? {
        results.push(run_experiment(bench, &cell.config, RunMode::Gil, cell.seed, &mut cache)?.1);
    }
    assemble_report(spec, &results)
}
