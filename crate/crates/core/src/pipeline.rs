//! The iterative pipeline: initialization, incremental and update stages,
//! adaptation to target classes from their embeddings alone, 1-NN
//! prediction, and the non-continual baseline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset};
use crate::error::{at_step, GilError, Result};
use crate::gan::{train_gan, Conditioning, FrozenClassifier, GanConfig, GanModels};
use crate::nn::{widths, Activation, AdamConfig, AdamState, Graph, Mlp, NnError, NodeId, Parameters};
use crate::replay::{compute_prototype, cvae_loss, train_cvae, ClassRecord, CvaeConfig, CvaeModel, ReplayBuffer};
use crate::rng::{self, GilRng};
use crate::semantic::EmbeddingTable;
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryVariant {
    /// Nothing is kept; stages train on new classes only.
    NoMemory,
    /// A few real instances per class are stored and replayed directly.
    RandomInstances,
    /// Prototype plus offsets of stored instances drive the generator.
    PrototypeRandom,
    /// Prototype plus noise shaped by the stored spread.
    PrototypeNoise,
}

impl MemoryVariant {
    pub const ALL: [MemoryVariant; 4] = [
        MemoryVariant::NoMemory,
        MemoryVariant::RandomInstances,
        MemoryVariant::PrototypeRandom,
        MemoryVariant::PrototypeNoise,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MemoryVariant::NoMemory => "No Mem",
            MemoryVariant::RandomInstances => "Rand",
            MemoryVariant::PrototypeRandom => "Proto + Rand",
            MemoryVariant::PrototypeNoise => "Proto + Noise",
        }
    }
}

/// Source of the replayed samples of pretraining classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMix {
    RealOnly,
    Half,
    SyntheticOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    Frozen,
    /// Adversarial training continues on each new batch of classes.
    FineTuned,
}

/// Neighbour set used by 1-NN prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// The class embeddings.
    Embedding,
    /// Encoder-predicted prototypes passed through the head.
    Prototype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub head_hidden: usize,
    /// Multiplier of the cosine logits.
    pub classifier_scale: f64,
    /// Attach newly seen classes with random, trained class weights instead
    /// of fixed embedding weights (incremental stages and the baseline
    /// fine-tune). Pretraining and adaptation always use the embeddings.
    pub learn_class_weights: bool,
    pub head_adam: AdamConfig,
    /// Epochs of the head on the pretraining classes before anything else.
    pub pretrain_epochs: usize,
    /// Epochs of each incremental step (and of the baseline's single
    /// fine-tune).
    pub epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    /// Classes per stage as a percentage of the seen classes.
    pub schedule_percent: f64,
    /// Synthetic samples per buffered class as a percentage of the mean
    /// real samples per new class.
    pub synth_percent: f64,
    /// Synthetic samples per class at adaptation; defaults to the mean class
    /// size of the fine-tuning data.
    pub test_synth_count: Option<usize>,
    pub memory: MemoryVariant,
    /// Instances kept per class by the instance-based memories.
    pub random_instances: usize,
    pub data_mix: DataMix,
    pub generator: GeneratorMode,
    /// Generator steps per stage when the generator is fine-tuned.
    pub generator_finetune_steps: usize,
    pub anchors: AnchorMode,
    /// Evaluate unseen accuracy after every stage.
    pub stage_curve: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            head_hidden: 256,
            classifier_scale: 10.0,
            learn_class_weights: false,
            head_adam: AdamConfig::standard(),
            pretrain_epochs: 100,
            epochs: 200,
            adapt_epochs: 100,
            batch_size: 128,
            schedule_percent: 10.0,
            synth_percent: 100.0,
            test_synth_count: None,
            memory: MemoryVariant::PrototypeNoise,
            random_instances: 5,
            data_mix: DataMix::SyntheticOnly,
            generator: GeneratorMode::Frozen,
            generator_finetune_steps: 200,
            anchors: AnchorMode::Embedding,
            stage_curve: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GilError::Config(format!("pipeline: {what}")));
        if !(self.schedule_percent > 0.0 && self.schedule_percent <= 100.0) {
            return bad("schedule_percent must be in (0, 100]");
        }
        if !(self.synth_percent > 0.0) {
            return bad("synth_percent must be positive");
        }
        if self.head_hidden == 0 || self.batch_size == 0 {
            return bad("head_hidden and batch_size must be positive");
        }
        if !(self.classifier_scale > 0.0) {
            return bad("classifier_scale must be positive");
        }
        if self.random_instances == 0 {
            return bad("random_instances must be positive");
        }
        if self.test_synth_count == Some(0) {
            return bad("test_synth_count must be positive");
        }
        Ok(())
    }
}

/// Borrowed view of every model setting a run needs.
#[derive(Clone, Copy, Debug)]
pub struct Settings<'a> {
    pub gan: &'a GanConfig,
    pub cvae: &'a CvaeConfig,
    pub pipeline: &'a PipelineConfig,
}

/// The two added layers mapping a feature into the embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub network: Mlp,
}

impl HeadModel {
    pub fn new(feature_dim: usize, hidden: usize, semantic_dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "head-init");
        HeadModel {
            network: Mlp::init(
                &widths(feature_dim, hidden, 1, semantic_dim),
                Activation::LeakyRelu(0.2),
                Activation::Linear,
                &mut r,
            ),
        }
    }

    pub fn apply(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.network.apply(features)?)
    }

    pub fn semantic_dim(&self) -> usize {
        self.network.output_dim()
    }
}

/// Cosine-compatibility classifier: the logit of class `k` is
/// `scale * cos(head(x), w_k) + bias_k`, with `w_k` starting at the class
/// embedding. Unless the weights are learned only the biases move. Classes are
/// kept in registration order, so logits of earlier classes keep their
/// parameters when new ones are added.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    classes: Vec<ClassId>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    scale: f64,
    learned: bool,
}

struct ClassParams {
    /// `s x K`.
    weights_t: Tensor,
    bias: Tensor,
}

impl Parameters for ClassParams {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weights_t, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights_t, &mut self.bias]
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

impl ClassifierHead {
    pub fn new(scale: f64, learned: bool) -> Self {
        ClassifierHead { classes: Vec::new(), weights: Vec::new(), bias: Vec::new(), scale, learned }
    }

    pub fn register(&mut self, class_id: ClassId, anchor: &[f64]) -> Result<()> {
        if self.classes.contains(&class_id) {
            return Err(GilError::Consistency(format!("class {class_id} is already registered")));
        }
        if let Some(first) = self.weights.first() {
            if first.len() != anchor.len() {
                return Err(GilError::Input(format!("anchor of class {class_id} has the wrong dimension")));
            }
        }
        self.classes.push(class_id);
        self.weights.push(unit(anchor));
        self.bias.push(0.0);
        Ok(())
    }

    pub fn with_classes(scale: f64, learned: bool, classes: &[ClassId], embeddings: &EmbeddingTable) -> Result<Self> {
        let mut c = ClassifierHead::new(scale, learned);
        for &k in classes {
            c.register(k, embeddings.vector(k)?)?;
        }
        Ok(c)
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, class_id: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn learned(&self) -> bool {
        self.learned
    }

    pub fn set_learned(&mut self, learned: bool) {
        self.learned = learned;
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Rebuild from stored parts (checkpoint loading).
    pub fn from_parts(
        classes: Vec<ClassId>,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        scale: f64,
        learned: bool,
    ) -> Result<Self> {
        if classes.len() != weights.len() || classes.len() != bias.len() {
            return Err(GilError::Input("classifier parts have different lengths".into()));
        }
        if weights.iter().any(|w| w.len() != weights[0].len()) {
            return Err(GilError::Input("classifier weights have different lengths".into()));
        }
        Ok(ClassifierHead { classes, weights, bias, scale, learned })
    }

    fn weights_t(&self) -> Tensor {
        let s = self.weights[0].len();
        let k = self.weights.len();
        let mut t = vec![0.0; s * k];
        for (j, a) in self.weights.iter().enumerate() {
            for (i, &v) in a.iter().enumerate() {
                t[i * k + j] = v;
            }
        }
        Tensor::matrix(s, k, t)
    }

    fn check(&self) -> Result<(), NnError> {
        if self.classes.is_empty() {
            return Err(NnError::shape("classifier", "no classes registered".into()));
        }
        Ok(())
    }

    /// Logits for head outputs `h` with the transposed weights and the bias
    /// held in graph nodes.
    fn logits_with(&self, g: &mut Graph, h: NodeId, weights_t: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let unit = g.normalize_rows(h)?;
        let cos = g.matmul(unit, weights_t)?;
        let scaled = g.scale(cos, self.scale)?;
        g.add_row_bias(scaled, bias)
    }

    /// Logits with the classifier's parameters as constants.
    pub fn logits(&self, g: &mut Graph, h: NodeId) -> Result<NodeId, NnError> {
        self.check()?;
        let w = g.constant(self.weights_t());
        let b = g.constant(Tensor::row(&self.bias));
        self.logits_with(g, h, w, b)
    }
}

/// A head and its classifier scored as one frozen network.
pub struct HeadClassifier<'a> {
    pub head: &'a HeadModel,
    pub classifier: &'a ClassifierHead,
}

impl FrozenClassifier for HeadClassifier<'_> {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, NnError> {
        let h = self.head.network.forward_frozen(g, x)?;
        self.classifier.logits(g, h)
    }

    fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classifier.index_of(class)
    }
}

fn gather(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(t.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, out)
}

/// Minibatch cross-entropy training of the head and the classifier.
/// Returns the mean loss of every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_head(
    head: &mut HeadModel,
    classifier: &mut ClassifierHead,
    features: &Tensor,
    labels: &[ClassId],
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = features.rows();
    if n == 0 || labels.len() != n {
        return Err(GilError::Input(format!("{n} features with {} labels", labels.len())));
    }
    let idx = labels
        .iter()
        .map(|&c| {
            classifier
                .index_of(c)
                .ok_or_else(|| GilError::Input(format!("class {c} is not registered with the classifier")))
        })
        .collect::<Result<Vec<usize>>>()?;
    classifier.check()?;
    let mut head_opt = AdamState::new(adam, &head.network);
    let mut params = ClassParams { weights_t: classifier.weights_t(), bias: Tensor::row(&classifier.bias) };
    let mut class_opt = AdamState::new(adam, &params);
    let learned = classifier.learned;
    let mut r = rng::stream(seed, "head-train");
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let xb = gather(features, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| idx[i]).collect();
            let net = &head.network;
            let p = &params;
            let step = || -> Result<(f64, Vec<Tensor>, Vec<Tensor>), NnError> {
                let mut g = Graph::new();
                let x = g.constant(xb);
                let trace = net.forward(&mut g, x)?;
                let w = if learned { g.leaf(p.weights_t.clone()) } else { g.constant(p.weights_t.clone()) };
                let b = g.leaf(p.bias.clone());
                let logits = classifier.logits_with(&mut g, trace.output, w, b)?;
                let loss = g.softmax_cross_entropy(logits, &yb)?;
                let mut grads = g.backward(loss)?;
                let gw = if learned { grads.take(w) } else { Tensor::zeros(p.weights_t.rows(), p.weights_t.cols()) };
                Ok((g.value(loss).item(), net.gradients(&grads, &trace), vec![gw, grads.take(b)]))
            };
            let (loss, head_grads, class_grads) = at_step(step(), "head", epoch)?;
            at_step(head_opt.step(&mut head.network, &head_grads), "head", epoch)?;
            at_step(class_opt.step(&mut params, &class_grads), "classifier", epoch)?;
            total += loss * chunk.len() as f64;
        }
        losses.push(total / n as f64);
    }
    let k = classifier.len();
    let w = params.weights_t;
    classifier.weights = (0..k).map(|j| (0..w.rows()).map(|i| w.get(i, j)).collect()).collect();
    classifier.bias = params.bias.into_data();
    Ok(losses)
}

/// Ordered batches of classes, one per incremental stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub percent: f64,
    pub batches: Vec<Vec<ClassId>>,
}

impl ScheduleSpec {
    pub fn class_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Shuffle `classes` and cut them into batches of
/// `max(1, floor(percent / 100 * C + 0.5))`; the last batch may be smaller.
pub fn class_schedule(classes: &[ClassId], percent: f64, seed: u64) -> Result<ScheduleSpec> {
    if classes.is_empty() {
        return Err(GilError::Input("cannot schedule an empty class list".into()));
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(GilError::Input(format!("schedule percent {percent} outside (0, 100]")));
    }
    let size = (libm::floor(percent / 100.0 * classes.len() as f64 + 0.5) as usize).max(1);
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "schedule"));
    Ok(ScheduleSpec { percent, batches: shuffled.chunks(size).map(<[ClassId]>::to_vec).collect() })
}

/// Candidate classes for 1-NN prediction, in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    ids: Vec<ClassId>,
    vectors: Vec<Vec<f64>>,
}

impl Anchors {
    pub fn new(entries: impl IntoIterator<Item = (ClassId, Vec<f64>)>) -> Result<Self> {
        let mut entries: Vec<(ClassId, Vec<f64>)> = entries.into_iter().collect();
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(GilError::Input("duplicate anchor class".into()));
        }
        if entries.is_empty() {
            return Err(GilError::Input("no anchors".into()));
        }
        let dim = entries[0].1.len();
        if entries.iter().any(|e| e.1.len() != dim) {
            return Err(GilError::Input("anchors of different dimensions".into()));
        }
        let (ids, vectors) = entries.into_iter().map(|(c, v)| (c, unit(&v))).unzip();
        Ok(Anchors { ids, vectors })
    }

    pub fn from_embeddings(table: &EmbeddingTable, classes: &[ClassId]) -> Result<Self> {
        Anchors::new(classes.iter().map(|&c| table.vector(c).map(|v| (c, v.to_vec()))).collect::<Result<Vec<_>>>()?)
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }
}

/// Cosine similarity of each projected feature to each anchor (`n x K`).
/// A zero projection has similarity 0 to everything.
pub fn cosine_scores(head: &HeadModel, features: &Tensor, anchors: &Anchors) -> Result<Tensor> {
    let h = head.apply(features)?;
    if h.cols() != anchors.vectors[0].len() {
        return Err(GilError::Input("anchor dimension does not match the head output".into()));
    }
    let k = anchors.len();
    let mut out = Vec::with_capacity(h.rows() * k);
    for r in 0..h.rows() {
        let row = h.row_slice(r);
        let n = norm(row);
        for a in &anchors.vectors {
            out.push(if n > 0.0 { dot(row, a) / n } else { 0.0 });
        }
    }
    Ok(Tensor::matrix(h.rows(), k, out))
}

/// Position of the largest score; the first one wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// 1-NN class of one feature; ties go to the lowest class id.
pub fn predict(head: &HeadModel, feature: &[f64], anchors: &Anchors) -> Result<ClassId> {
    Ok(predict_batch(head, &Tensor::row(feature), anchors)?[0])
}

pub fn predict_batch(head: &HeadModel, features: &Tensor, anchors: &Anchors) -> Result<Vec<ClassId>> {
    let s = cosine_scores(head, features, anchors)?;
    Ok((0..s.rows()).map(|r| anchors.ids[argmax_first(s.row_slice(r))]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Gil,
    Baseline,
}

/// What happened at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: usize,
    /// Fraction of the seen classes incorporated so far.
    pub completion: f64,
    pub classes: Vec<ClassId>,
    pub buffer_size: usize,
    pub replay_samples: usize,
    pub real_samples: usize,
    pub head_loss: Option<f64>,
    /// Encoder loss on the stage's new records before and after the
    /// fine-tune.
    pub new_record_loss: Option<(f64, f64)>,
    pub generator_checksum: u64,
    pub unseen_accuracy: Option<f64>,
}

/// Everything a run owns; the unit of checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentState {
    pub mode: RunMode,
    pub buffer: ReplayBuffer,
    pub cvae: Option<CvaeModel>,
    pub gan: GanModels,
    pub head: HeadModel,
    pub classifier: ClassifierHead,
    pub stage: usize,
    pub schedule: ScheduleSpec,
    pub log: Vec<StageLog>,
    pub seed: u64,
    /// Generator checksum at the end of initialization.
    pub generator_checksum: u64,
    /// Synthetic samples per class at adaptation.
    pub test_synth_count: usize,
}

/// Head, classifier and generator trained on the pretraining classes. Shared
/// by every arm of a paired comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Foundation {
    pub head: HeadModel,
    pub classifier: ClassifierHead,
    pub gan: GanModels,
    pub records: Vec<ClassRecord>,
}

fn embedding_record(class_id: ClassId, embeddings: &EmbeddingTable) -> Result<ClassRecord> {
    ClassRecord::new(class_id, Vec::new(), Vec::new(), embeddings.vector(class_id)?.to_vec(), 0)
}

fn full_records(data: &Dataset, embeddings: &EmbeddingTable, stage: usize) -> Result<Vec<ClassRecord>> {
    data.classes()
        .into_iter()
        .map(|c| {
            let (mu, sigma) = compute_prototype(&data.class_features(c))?;
            ClassRecord::new(c, mu, sigma, embeddings.vector(c)?.to_vec(), stage)
        })
        .collect()
}

pub fn build_foundation(pretrain: &Dataset, embeddings: &EmbeddingTable, settings: Settings, seed: u64) -> Result<Foundation> {
    settings.pipeline.validate()?;
    settings.gan.validate()?;
    let classes = pretrain.classes();
    if classes.len() < 2 {
        return Err(GilError::Input(format!("pretraining needs at least 2 classes, got {}", classes.len())));
    }
    let p = settings.pipeline;
    let mut head = HeadModel::new(pretrain.dim(), p.head_hidden, embeddings.dim(), rng::derive(seed, "head"));
    let mut classifier = ClassifierHead::with_classes(p.classifier_scale, false, &classes, embeddings)?;
    let all: Vec<usize> = (0..pretrain.len()).collect();
    let labels: Vec<ClassId> = all.iter().map(|&i| pretrain.class_of(i)).collect();
    train_head(
        &mut head,
        &mut classifier,
        &pretrain.tensor(&all),
        &labels,
        p.pretrain_epochs,
        p.batch_size,
        p.head_adam,
        rng::derive(seed, "foundation-head"),
    )?;
    let records = full_records(pretrain, embeddings, 0)?;
    let mut gan = GanModels::new(settings.gan.conditioning, pretrain.dim(), embeddings.dim(), settings.gan, rng::derive(seed, "gan"));
    let clf = HeadClassifier { head: &head, classifier: &classifier };
    train_gan(&mut gan, pretrain, &records, Some(&clf), settings.gan, rng::derive(seed, "gan-train"))?;
    Ok(Foundation { head, classifier, gan, records })
}

/// The data a run trains on, plus what the per-stage curve is measured on.
#[derive(Clone, Copy, Debug)]
pub struct RunInputs<'a> {
    /// Training part of the pretraining classes.
    pub pretrain: &'a Dataset,
    /// Training part of the seen fine-tuning classes.
    pub seen: &'a Dataset,
    pub embeddings: &'a EmbeddingTable,
    pub stage_eval: Option<StageEval<'a>>,
}

#[derive(Clone, Copy, Debug)]
pub struct StageEval<'a> {
    pub unseen: &'a [ClassId],
    pub test: &'a Dataset,
}

fn pick(n: usize, k: usize, r: &mut GilRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    idx.truncate(k.min(n));
    idx.sort_unstable();
    idx
}

/// Buffer entry for one class under the configured memory variant.
fn memory_record(
    class_id: ClassId,
    features: Vec<Vec<f64>>,
    embeddings: &EmbeddingTable,
    stage: usize,
    config: &PipelineConfig,
    r: &mut GilRng,
) -> Result<ClassRecord> {
    let embedding = embeddings.vector(class_id)?.to_vec();
    let mut chosen = || -> Vec<Vec<f64>> {
        pick(features.len(), config.random_instances, &mut *r).into_iter().map(|i| features[i].clone()).collect()
    };
    let record = match config.memory {
        MemoryVariant::RandomInstances => {
            let kept = chosen();
            let (mu, sigma) = compute_prototype(&kept)?;
            ClassRecord::new(class_id, mu, sigma, embedding, stage)?.with_instances(kept)
        }
        _ => {
            let (mu, sigma) = compute_prototype(&features)?;
            let rec = ClassRecord::new(class_id, mu, sigma, embedding, stage)?;
            if config.memory == MemoryVariant::PrototypeRandom {
                rec.with_instances(chosen())
            } else {
                rec
            }
        }
    };
    Ok(record)
}

/// Boot the replay memory on the pretraining classes.
pub fn initialize(inputs: &RunInputs, foundation: &Foundation, settings: Settings, seed: u64) -> Result<ExperimentState> {
    let p = settings.pipeline;
    p.validate()?;
    let mut buffer = ReplayBuffer::new();
    let mut cvae = None;
    if p.memory != MemoryVariant::NoMemory {
        let mut r = rng::stream(seed, "memory-init");
        for c in inputs.pretrain.classes() {
            buffer.insert(memory_record(c, inputs.pretrain.class_features(c), inputs.embeddings, 0, p, &mut r)?)?;
        }
        let mut e = CvaeModel::new(inputs.embeddings.dim(), inputs.pretrain.dim(), settings.cvae, rng::derive(seed, "cvae"));
        train_cvae(&mut e, &buffer, settings.cvae.epochs, settings.cvae, rng::derive(seed, "cvae-init"))?;
        cvae = Some(e);
    }
    let test_synth_count = p
        .test_synth_count
        .unwrap_or_else(|| (libm::round(inputs.seen.mean_class_size()) as usize).max(1));
    Ok(ExperimentState {
        mode: RunMode::Gil,
        buffer,
        cvae,
        gan: foundation.gan.clone(),
        head: foundation.head.clone(),
        classifier: {
            let mut c = foundation.classifier.clone();
            c.set_learned(p.learn_class_weights);
            c
        },
        stage: 0,
        schedule: ScheduleSpec { percent: p.schedule_percent, batches: Vec::new() },
        log: Vec::new(),
        seed,
        generator_checksum: foundation.gan.generator.checksum(),
        test_synth_count,
    })
}

/// Synthetic replay for every buffered class: rows of `x` and their labels.
fn replay_set(
    state: &ExperimentState,
    inputs: &RunInputs,
    per_class: usize,
    config: &PipelineConfig,
    r: &mut GilRng,
) -> Result<(Vec<f64>, Vec<ClassId>)> {
    let d = state.gan.feature_dim();
    let mut real = Vec::new();
    let mut real_labels = Vec::new();
    let mut cond = Vec::new();
    let mut cond_labels = Vec::new();
    for rec in state.buffer.records() {
        let n_real = match (config.memory, config.data_mix) {
            (MemoryVariant::RandomInstances, _) => per_class,
            (_, _) if rec.stage != 0 => 0,
            (_, DataMix::SyntheticOnly) => 0,
            (_, DataMix::Half) => per_class / 2,
            (_, DataMix::RealOnly) => per_class,
        };
        if n_real > 0 {
            let pool: Vec<Vec<f64>> = if config.memory == MemoryVariant::RandomInstances {
                rec.instances.clone()
            } else {
                inputs.pretrain.class_features(rec.class_id)
            };
            if pool.is_empty() {
                return Err(GilError::Consistency(format!("no stored features for class {}", rec.class_id)));
            }
            for _ in 0..n_real {
                real.extend_from_slice(&pool[r.random_range(0..pool.len())]);
                real_labels.push(rec.class_id);
            }
        }
        let n_syn = per_class - n_real;
        if n_syn == 0 {
            continue;
        }
        if config.memory == MemoryVariant::PrototypeRandom {
            if state.gan.conditioning != Conditioning::Prototype {
                return Err(GilError::Config(
                    "the prototype + random memory needs the prototype conditioning".into(),
                ));
            }
            for _ in 0..n_syn {
                let inst = &rec.instances[r.random_range(0..rec.instances.len())];
                cond.extend_from_slice(&rec.prototype);
                cond.extend(inst.iter().zip(&rec.prototype).map(|(x, m)| x - m));
            }
        } else {
            state.gan.push_conditions(rec, n_syn, r, &mut cond);
        }
        cond_labels.extend(core::iter::repeat_n(rec.class_id, n_syn));
    }
    if !cond_labels.is_empty() {
        let x = state.gan.generate(&Tensor::matrix(cond_labels.len(), state.gan.condition_width(), cond))?;
        real.extend_from_slice(x.data());
        real_labels.extend(cond_labels);
    }
    debug_assert_eq!(real.len(), real_labels.len() * d);
    Ok((real, real_labels))
}

/// Starting class weight of a newly attached class: its embedding, or a
/// random unit vector when the weights are learned.
fn initial_weight(config: &PipelineConfig, class_id: ClassId, embeddings: &EmbeddingTable, seed: u64) -> Result<Vec<f64>> {
    let a = embeddings.vector(class_id)?;
    if !config.learn_class_weights {
        return Ok(a.to_vec());
    }
    let mut r = rng::seeded(rng::derive_indexed(seed, "class-weight", class_id as u64));
    Ok(unit(&(0..a.len()).map(|_| rng::normal(&mut r)).collect::<Vec<_>>()))
}

/// Counts of one incremental step's training set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub replay_samples: usize,
    pub real_samples: usize,
    pub per_class: usize,
    pub head_loss: f64,
}

/// Synthetic samples per buffered class for new classes averaging
/// `mean_real` samples.
pub fn synth_count(mean_real: f64, synth_percent: f64) -> usize {
    (libm::round(mean_real * synth_percent / 100.0) as usize).max(1)
}

/// Fine-tune head and classifier on replayed buffered classes plus the real
/// features of `batch`.
pub fn incremental_step(
    state: &mut ExperimentState,
    inputs: &RunInputs,
    batch: &[ClassId],
    settings: Settings,
    seed: u64,
) -> Result<StepStats> {
    let p = settings.pipeline;
    if let Some(&c) = batch.iter().find(|&&c| state.buffer.contains(c)) {
        return Err(GilError::Consistency(format!("class {c} is already in the replay buffer")));
    }
    let new = inputs.seen.subset(batch);
    if new.class_count() != batch.len() {
        return Err(GilError::Input("every class of a stage needs real features".into()));
    }
    let per_class = synth_count(new.mean_class_size(), p.synth_percent);
    let mut r = rng::stream(seed, "replay");
    let (mut x, mut labels) = replay_set(state, inputs, per_class, p, &mut r)?;
    let replay_samples = labels.len();
    for i in 0..new.len() {
        x.extend(new.feature(i).iter().map(|&v| v as f64));
        labels.push(new.class_of(i));
    }
    for &c in batch {
        if state.classifier.index_of(c).is_none() {
            state.classifier.register(c, &initial_weight(p, c, inputs.embeddings, state.seed)?)?;
        }
    }
    let x = Tensor::matrix(labels.len(), new.dim(), x);
    let losses = train_head(
        &mut state.head,
        &mut state.classifier,
        &x,
        &labels,
        p.epochs,
        p.batch_size,
        p.head_adam,
        rng::derive(seed, "stage-head"),
    )?;
    Ok(StepStats {
        replay_samples,
        real_samples: new.len(),
        per_class,
        head_loss: losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Archive `batch` into the buffer and fine-tune the encoder. Returns the
/// encoder loss on the new records before and after.
pub fn update_stage(
    state: &mut ExperimentState,
    inputs: &RunInputs,
    batch: &[ClassId],
    settings: Settings,
    seed: u64,
) -> Result<Option<(f64, f64)>> {
    let p = settings.pipeline;
    let new = inputs.seen.subset(batch);
    let mut losses = None;
    if p.memory != MemoryVariant::NoMemory {
        let mut r = rng::stream(seed, "memory-update");
        let mut fresh = Vec::with_capacity(batch.len());
        for &c in batch {
            let rec = memory_record(c, new.class_features(c), inputs.embeddings, state.stage, p, &mut r)?;
            state.buffer.insert(rec.clone())?;
            fresh.push(rec);
        }
        let e = state.cvae.as_mut().ok_or_else(|| GilError::Consistency("memory without an encoder".into()))?;
        let before = cvae_loss(e, &fresh)?;
        train_cvae(e, &state.buffer, settings.cvae.finetune_epochs, settings.cvae, rng::derive(seed, "cvae-update"))?;
        losses = Some((before, cvae_loss(e, &fresh)?));
    }
    match p.generator {
        GeneratorMode::Frozen => {
            if state.gan.generator.checksum() != state.generator_checksum {
                return Err(GilError::Consistency("generator parameters changed after initialization".into()));
            }
        }
        GeneratorMode::FineTuned => {
            let records = full_records(&new, inputs.embeddings, state.stage)?;
            let cfg = GanConfig { steps: p.generator_finetune_steps, ..settings.gan.clone() };
            let clf = HeadClassifier { head: &state.head, classifier: &state.classifier };
            let mut gan = state.gan.clone();
            train_gan(&mut gan, &new, &records, Some(&clf), &cfg, rng::derive(seed, "gan-update"))?;
            state.gan = gan;
        }
    }
    Ok(losses)
}

/// Head and classifier adapted to a target class set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub head: HeadModel,
    pub classifier: ClassifierHead,
    /// Number of synthetic features the adaptation trained on.
    pub synthesized: usize,
}

/// Generator conditions for classes known only by their embedding.
pub fn target_record(state: &ExperimentState, class_id: ClassId, embeddings: &EmbeddingTable) -> Result<Option<ClassRecord>> {
    if state.gan.conditioning == Conditioning::Semantic {
        return embedding_record(class_id, embeddings).map(Some);
    }
    let Some(e) = &state.cvae else { return Ok(None) };
    let a = embeddings.vector(class_id)?;
    let (mu, sigma) = e.encode(a)?;
    ClassRecord::new(class_id, mu, sigma, a.to_vec(), state.stage).map(Some)
}

/// Fine-tune a copy of the head on features synthesized for `targets` from
/// their embeddings alone. The classifier is rebuilt over the targets. A
/// state with neither an encoder nor an embedding-conditioned generator has
/// nothing to synthesize from and returns the head unchanged.
pub fn zsl_adapt(
    state: &ExperimentState,
    targets: &[ClassId],
    embeddings: &EmbeddingTable,
    settings: Settings,
    seed: u64,
) -> Result<Adapted> {
    let p = settings.pipeline;
    let mut head = state.head.clone();
    let mut classifier = ClassifierHead::with_classes(p.classifier_scale, false, targets, embeddings)?;
    let mut r = rng::stream(seed, "adapt");
    let mut cond = Vec::new();
    let mut labels = Vec::new();
    for &c in targets {
        let Some(rec) = target_record(state, c, embeddings)? else {
            return Ok(Adapted { head, classifier, synthesized: 0 });
        };
        state.gan.push_conditions(&rec, state.test_synth_count, &mut r, &mut cond);
        labels.extend(core::iter::repeat_n(c, state.test_synth_count));
    }
    let x = state.gan.generate(&Tensor::matrix(labels.len(), state.gan.condition_width(), cond))?;
    train_head(
        &mut head,
        &mut classifier,
        &x,
        &labels,
        p.adapt_epochs,
        p.batch_size,
        p.head_adam,
        rng::derive(seed, "adapt-head"),
    )?;
    Ok(Adapted { head, classifier, synthesized: labels.len() })
}

/// Anchors for `classes` as seen through `head`.
pub fn anchors_for(
    state: &ExperimentState,
    head: &HeadModel,
    classes: &[ClassId],
    embeddings: &EmbeddingTable,
    mode: AnchorMode,
) -> Result<Anchors> {
    match mode {
        AnchorMode::Embedding => Anchors::from_embeddings(embeddings, classes),
        AnchorMode::Prototype => {
            let e = state
                .cvae
                .as_ref()
                .ok_or_else(|| GilError::Config("prototype anchors need a trained encoder".into()))?;
            let a = Tensor::from_rows(&classes.iter().map(|&c| embeddings.vector(c)).collect::<Result<Vec<_>>>()?);
            let out = e.encode_batch(&a)?;
            let d = e.feature_dim();
            let mu = Tensor::from_rows(&(0..out.rows()).map(|i| &out.row_slice(i)[..d]).collect::<Vec<_>>());
            let h = head.apply(&mu)?;
            Anchors::new(classes.iter().enumerate().map(|(i, &c)| (c, h.row_slice(i).to_vec())))
        }
    }
}

/// Top-1 accuracy of 1-NN prediction over `test` restricted to `classes`.
pub fn accuracy_on(
    state: &ExperimentState,
    head: &HeadModel,
    test: &Dataset,
    classes: &[ClassId],
    embeddings: &EmbeddingTable,
    mode: AnchorMode,
) -> Result<f64> {
    if test.is_empty() {
        return Err(GilError::Input("empty test set".into()));
    }
    let anchors = anchors_for(state, head, classes, embeddings, mode)?;
    let all: Vec<usize> = (0..test.len()).collect();
    let pred = predict_batch(head, &test.tensor(&all), &anchors)?;
    let hits = pred.iter().enumerate().filter(|&(i, &c)| c == test.class_of(i)).count();
    Ok(hits as f64 / test.len() as f64)
}

fn stage_accuracy(state: &ExperimentState, inputs: &RunInputs, settings: Settings, seed: u64) -> Result<Option<f64>> {
    let Some(ev) = inputs.stage_eval.filter(|_| settings.pipeline.stage_curve) else {
        return Ok(None);
    };
    let test = ev.test.subset(ev.unseen);
    let adapted = zsl_adapt(state, ev.unseen, inputs.embeddings, settings, rng::derive_indexed(seed, "curve", state.stage as u64))?;
    accuracy_on(state, &adapted.head, &test, ev.unseen, inputs.embeddings, settings.pipeline.anchors).map(Some)
}

/// Initialize, then alternate incremental and update stages over the
/// schedule of seen classes.
pub fn run_gil(inputs: &RunInputs, foundation: &Foundation, settings: Settings, seed: u64) -> Result<ExperimentState> {
    let mut state = initialize(inputs, foundation, settings, seed)?;
    let seen = inputs.seen.classes();
    state.schedule = class_schedule(&seen, settings.pipeline.schedule_percent, rng::derive(seed, "schedule"))?;
    let total = seen.len() as f64;
    state.log.push(StageLog {
        stage: 0,
        completion: 0.0,
        classes: inputs.pretrain.classes(),
        buffer_size: state.buffer.len(),
        replay_samples: 0,
        real_samples: inputs.pretrain.len(),
        head_loss: None,
        new_record_loss: None,
        generator_checksum: state.gan.generator.checksum(),
        unseen_accuracy: stage_accuracy(&state, inputs, settings, seed)?,
    });
    let mut done = 0;
    for (t, batch) in state.schedule.batches.clone().iter().enumerate() {
        state.stage = t + 1;
        let stage_seed = rng::derive_indexed(seed, "stage", state.stage as u64);
        let stats = incremental_step(&mut state, inputs, batch, settings, stage_seed)?;
        let losses = update_stage(&mut state, inputs, batch, settings, stage_seed)?;
        done += batch.len();
        let unseen_accuracy = stage_accuracy(&state, inputs, settings, seed)?;
        state.log.push(StageLog {
            stage: state.stage,
            completion: done as f64 / total,
            classes: batch.clone(),
            buffer_size: state.buffer.len(),
            replay_samples: stats.replay_samples,
            real_samples: stats.real_samples,
            head_loss: Some(stats.head_loss),
            new_record_loss: losses,
            generator_checksum: state.gan.generator.checksum(),
            unseen_accuracy,
        });
    }
    Ok(state)
}

/// The non-continual comparison: one fine-tune of the head on all seen
/// classes, no memory and no stages, and a generator conditioned on
/// embeddings trained once on the seen data.
pub fn run_baseline(inputs: &RunInputs, foundation: &Foundation, settings: Settings, seed: u64) -> Result<ExperimentState> {
    let p = settings.pipeline;
    p.validate()?;
    let seen = inputs.seen.classes();
    let mut head = foundation.head.clone();
    let mut classifier = ClassifierHead::new(p.classifier_scale, p.learn_class_weights);
    for &c in &seen {
        classifier.register(c, &initial_weight(p, c, inputs.embeddings, seed)?)?;
    }
    let all: Vec<usize> = (0..inputs.seen.len()).collect();
    let labels: Vec<ClassId> = all.iter().map(|&i| inputs.seen.class_of(i)).collect();
    train_head(
        &mut head,
        &mut classifier,
        &inputs.seen.tensor(&all),
        &labels,
        p.epochs,
        p.batch_size,
        p.head_adam,
        rng::derive(seed, "baseline-head"),
    )?;
    let gan_config = GanConfig { conditioning: Conditioning::Semantic, ..settings.gan.clone() };
    let mut gan = GanModels::new(Conditioning::Semantic, inputs.seen.dim(), inputs.embeddings.dim(), &gan_config, rng::derive(seed, "baseline-gan"));
    let records = seen.iter().map(|&c| embedding_record(c, inputs.embeddings)).collect::<Result<Vec<_>>>()?;
    let clf = HeadClassifier { head: &head, classifier: &classifier };
    train_gan(&mut gan, inputs.seen, &records, Some(&clf), &gan_config, rng::derive(seed, "baseline-gan-train"))?;
    let checksum = gan.generator.checksum();
    Ok(ExperimentState {
        mode: RunMode::Baseline,
        buffer: ReplayBuffer::new(),
        cvae: None,
        gan,
        head,
        classifier,
        stage: 0,
        schedule: ScheduleSpec { percent: 100.0, batches: Vec::new() },
        log: Vec::new(),
        seed,
        generator_checksum: checksum,
        test_synth_count: p
            .test_synth_count
            .unwrap_or_else(|| (libm::round(inputs.seen.mean_class_size()) as usize).max(1)),
    })
}
