//! Feature-generating adversarial networks: generator `F`, critic `G`,
//! projection `H` and the statistics network `T` of the mutual-information
//! bound, their losses, training loop and synthesis.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, Dataset};
use crate::error::{at_step, GilError, Result};
use crate::nn::{widths, Activation, AdamConfig, AdamState, BoundParams, Graph, Mlp, NnError, NodeId};
use crate::replay::ClassRecord;
use crate::rng::{self, GilRng};
use crate::tensor::Tensor;

/// What the generator is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `a ++ z`, the embedding plus Gaussian noise.
    Semantic,
    /// `mu ++ (sigma * eps)`: the prototype with noise shaped by the stored
    /// spread.
    Prototype,
    /// `mu ++ sigma ++ z`: the raw statistics concatenated with noise.
    PrototypeConcat,
}

/// Which part of the critic's input gradient the penalty constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    /// Only the feature half.
    Feature,
    /// Feature and embedding halves together. Real features are paired with
    /// `H(x)` and generated ones with the exact `a`, so a critic that is
    /// unconstrained along the embedding can separate the two on the pairing
    /// alone.
    Joint,
}

/// Where the gradient penalty is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyPoint {
    Generated,
    /// Random convex combinations of real and generated features.
    Interpolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub hidden: usize,
    /// Width of `z` for the conditioning modes that append noise.
    pub noise_dim: usize,
    /// Generator steps.
    pub steps: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    /// Gradient-penalty coefficient.
    pub gp_weight: f64,
    /// Weight of the frozen-classifier loss.
    pub cls_weight: f64,
    /// Weight of the mutual-information loss.
    pub mi_weight: f64,
    pub penalty_point: PenaltyPoint,
    pub penalty_scope: PenaltyScope,
    pub conditioning: Conditioning,
    pub generator_adam: AdamConfig,
    pub critic_adam: AdamConfig,
    /// Optimizer for `H` and `T`.
    pub auxiliary_adam: AdamConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            hidden: 256,
            noise_dim: 64,
            steps: 2000,
            batch_size: 64,
            n_critic: 5,
            gp_weight: 10.0,
            cls_weight: 0.01,
            mi_weight: 0.001,
            penalty_point: PenaltyPoint::Generated,
            penalty_scope: PenaltyScope::Joint,
            conditioning: Conditioning::Prototype,
            generator_adam: AdamConfig::adversarial(),
            critic_adam: AdamConfig::adversarial(),
            auxiliary_adam: AdamConfig::standard(),
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(GilError::Config(format!("gan: {what}")));
        if !(self.gp_weight >= 0.0 && self.cls_weight >= 0.0 && self.mi_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if self.batch_size == 0 || self.hidden == 0 || self.noise_dim == 0 {
            return bad("batch_size, hidden and noise_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanModels {
    pub conditioning: Conditioning,
    pub noise_dim: usize,
    /// `F`: condition -> feature.
    pub generator: Mlp,
    /// `G`: feature ++ embedding -> score. Piecewise-linear only.
    pub critic: Mlp,
    /// `H`: feature -> embedding.
    pub projection: Mlp,
    /// `T`: feature ++ embedding -> score.
    pub statistics: Mlp,
}

pub fn condition_width(conditioning: Conditioning, feature_dim: usize, semantic_dim: usize, noise_dim: usize) -> usize {
    match conditioning {
        Conditioning::Semantic => semantic_dim + noise_dim,
        Conditioning::Prototype => 2 * feature_dim,
        Conditioning::PrototypeConcat => 2 * feature_dim + noise_dim,
    }
}

impl GanModels {
    pub fn new(conditioning: Conditioning, feature_dim: usize, semantic_dim: usize, config: &GanConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "gan-init");
        let act = Activation::LeakyRelu(0.2);
        let h = config.hidden;
        let cond = condition_width(conditioning, feature_dim, semantic_dim, config.noise_dim);
        let pair = feature_dim + semantic_dim;
        GanModels {
            conditioning,
            noise_dim: config.noise_dim,
            generator: Mlp::init(&widths(cond, h, 1, feature_dim), act, Activation::Linear, &mut r),
            critic: Mlp::init(&widths(pair, h, 1, 1), act, Activation::Linear, &mut r),
            projection: Mlp::init(&widths(feature_dim, h, 1, semantic_dim), act, Activation::Linear, &mut r),
            statistics: Mlp::init(&widths(pair, h, 1, 1), act, Activation::Linear, &mut r),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn semantic_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn condition_width(&self) -> usize {
        self.generator.input_dim()
    }

    fn check_record(&self, record: &ClassRecord) -> Result<()> {
        let d = self.feature_dim();
        let ok = match self.conditioning {
            Conditioning::Semantic => record.embedding.len() == self.semantic_dim(),
            _ => record.dim() == d,
        };
        if ok {
            Ok(())
        } else {
            Err(GilError::Input(format!(
                "class {} does not match the generator dimensions (d = {d}, s = {})",
                record.class_id,
                self.semantic_dim()
            )))
        }
    }

    /// Append `count` condition rows for `record` to `out`.
    pub fn push_conditions(&self, record: &ClassRecord, count: usize, r: &mut GilRng, out: &mut Vec<f64>) {
        for _ in 0..count {
            match self.conditioning {
                Conditioning::Semantic => {
                    out.extend_from_slice(&record.embedding);
                    out.extend((0..self.noise_dim).map(|_| rng::normal(r)));
                }
                Conditioning::Prototype => {
                    out.extend_from_slice(&record.prototype);
                    out.extend(record.noise.iter().map(|s| s * rng::normal(r)));
                }
                Conditioning::PrototypeConcat => {
                    out.extend_from_slice(&record.prototype);
                    out.extend_from_slice(&record.noise);
                    out.extend((0..self.noise_dim).map(|_| rng::normal(r)));
                }
            }
        }
    }

    /// Generator output for prepared condition rows.
    pub fn generate(&self, conditions: &Tensor) -> Result<Tensor> {
        if conditions.cols() != self.condition_width() {
            return Err(GilError::Input(format!(
                "condition width {} does not match generator input {}",
                conditions.cols(),
                self.condition_width()
            )));
        }
        Ok(self.generator.apply(conditions)?)
    }
}

/// `count` features for one class; deterministic per seed.
pub fn synthesize(models: &GanModels, record: &ClassRecord, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(GilError::Input("synthesis count must be at least 1".into()));
    }
    models.check_record(record)?;
    let mut r = rng::seeded(rng::derive_indexed(seed, "synthesize", record.class_id as u64));
    let mut cond = Vec::with_capacity(count * models.condition_width());
    models.push_conditions(record, count, &mut r, &mut cond);
    let out = models.generate(&Tensor::matrix(count, models.condition_width(), cond))?;
    Ok((0..count).map(|i| out.row_slice(i).to_vec()).collect())
}

/// A classifier whose parameters stay fixed while it scores generated
/// features.
pub trait FrozenClassifier {
    /// Logits (`n x classes`) for the feature rows in `x`.
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, NnError>;
    /// Column of `class` in the logits.
    fn class_index(&self, class: ClassId) -> Option<usize>;
}

/// Plain softmax classifier over a fixed class list.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxClassifier {
    pub network: Mlp,
    pub classes: Vec<ClassId>,
}

impl FrozenClassifier for SoftmaxClassifier {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, NnError> {
        self.network.forward_frozen(g, x)
    }

    fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Mean negative log-likelihood of `labels` under the classifier.
pub fn cls_regularizer(
    g: &mut Graph,
    classifier: &dyn FrozenClassifier,
    x: NodeId,
    labels: &[ClassId],
) -> Result<NodeId> {
    let idx = labels
        .iter()
        .map(|&c| {
            classifier
                .class_index(c)
                .ok_or_else(|| GilError::Input(format!("class {c} is not known to the classifier")))
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = classifier.logits(g, x)?;
    Ok(g.softmax_cross_entropy(logits, &idx)?)
}

/// Mean squared error between `H(x)` and `a`.
pub fn projection_loss(g: &mut Graph, projection: &Mlp, params: &BoundParams, x: NodeId, a: NodeId) -> Result<NodeId, NnError> {
    let out = projection.forward_with(g, x, params)?;
    let diff = g.sub(out.output, a)?;
    let sq = g.square(diff)?;
    g.mean(sq)
}

/// `mean T(x, a) - log mean exp T(x, a_shuffled)`.
pub fn mi_lower_bound(
    g: &mut Graph,
    statistics: &Mlp,
    params: &BoundParams,
    x: NodeId,
    a: NodeId,
    a_shuffled: NodeId,
) -> Result<NodeId, NnError> {
    let joint = g.concat_cols(x, a)?;
    let joint = statistics.forward_with(g, joint, params)?;
    let marginal = g.concat_cols(x, a_shuffled)?;
    let marginal = statistics.forward_with(g, marginal, params)?;
    let first = g.mean(joint.output)?;
    let second = g.log_mean_exp(marginal.output)?;
    g.sub(first, second)
}

/// Gradient-penalty settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalty {
    pub weight: f64,
    pub point: PenaltyPoint,
    pub scope: PenaltyScope,
}

impl Penalty {
    pub fn of(config: &GanConfig) -> Self {
        Penalty { weight: config.gp_weight, point: config.penalty_point, scope: config.penalty_scope }
    }
}

/// Inputs of one critic evaluation, all held constant.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    /// Real features `x`.
    pub real: Tensor,
    /// What real features are paired with: `H(x)`.
    pub real_pair: Tensor,
    pub fake: Tensor,
    /// Embeddings `a` of the generated features' classes.
    pub fake_pair: Tensor,
    /// Per-row mixing weights for the interpolated penalty point.
    pub mix: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct CriticTerms {
    /// The maximized objective: `real - fake - penalty`.
    pub objective: NodeId,
    pub real: NodeId,
    pub fake: NodeId,
    /// `alpha * mean (||grad_x G|| - 1)^2`.
    pub penalty: NodeId,
}

/// The critic objective
/// `E[G(x, H(x))] - E[G(x_hat, a)] - alpha E[(||grad G(x_hat, a)|| - 1)^2]`
/// with the critic parameters in `params`; the gradient is taken over the
/// parts of the input selected by the penalty scope.
pub fn critic_loss(
    g: &mut Graph,
    critic: &Mlp,
    params: &BoundParams,
    batch: &CriticBatch,
    penalty: Penalty,
) -> Result<CriticTerms, NnError> {
    let Penalty { weight: gp_weight, point, scope } = penalty;
    let d = batch.fake.cols();
    let real_in = g.constant(hcat(&batch.real, &batch.real_pair)?);
    let fake_in = g.constant(hcat(&batch.fake, &batch.fake_pair)?);
    let real = critic.forward_with(g, real_in, params)?;
    let fake = critic.forward_with(g, fake_in, params)?;
    let real = g.mean(real.output)?;
    let fake_mean = g.mean(fake.output)?;

    let penalty_in = match point {
        PenaltyPoint::Generated => fake_in,
        PenaltyPoint::Interpolated => {
            let mix = batch
                .mix
                .as_ref()
                .ok_or_else(|| NnError::shape("critic_loss", "interpolated penalty needs mixing weights".into()))?;
            let (n, _) = batch.fake.dims();
            if mix.len() != n || batch.real.dims() != batch.fake.dims() {
                return Err(NnError::shape("critic_loss", format!("{} mixing weights for {n} rows", mix.len())));
            }
            let mut x = Vec::with_capacity(n * d);
            for (i, &e) in mix.iter().enumerate() {
                let (xr, xf) = (batch.real.row_slice(i), batch.fake.row_slice(i));
                x.extend(xr.iter().zip(xf).map(|(r, f)| e * r + (1.0 - e) * f));
            }
            g.constant(hcat(&Tensor::matrix(n, d, x), &batch.fake_pair)?)
        }
    };
    let trace = critic.forward_with(g, penalty_in, params)?;
    let grad = critic.input_gradient(g, &trace)?;
    let grad_x = match scope {
        PenaltyScope::Feature => g.slice_cols(grad, 0, d)?,
        PenaltyScope::Joint => grad,
    };
    let norm = g.row_norm(grad_x)?;
    let gap = g.add_scalar(norm, -1.0)?;
    let sq = g.square(gap)?;
    let gp = g.mean(sq)?;
    let penalty = g.scale(gp, gp_weight)?;

    let diff = g.sub(real, fake_mean)?;
    let objective = g.sub(diff, penalty)?;
    Ok(CriticTerms { objective, real, fake: fake_mean, penalty })
}

fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (n, p) = a.dims();
    let (n2, q) = b.dims();
    if n != n2 {
        return Err(NnError::shape("concat", format!("{n} rows vs {n2} rows")));
    }
    let mut out = Vec::with_capacity(n * (p + q));
    for r in 0..n {
        out.extend_from_slice(a.row_slice(r));
        out.extend_from_slice(b.row_slice(r));
    }
    Ok(Tensor::matrix(n, p + q, out))
}

/// Loss components recorded once per generator step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanStep {
    /// Critic objective at the last critic iteration.
    pub critic: f64,
    pub penalty: f64,
    /// Total generator loss.
    pub generator: f64,
    pub cls: f64,
    /// Mutual-information estimate (the generator minimizes its negation).
    pub mi: f64,
    pub projection: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanHistory {
    pub steps: Vec<GanStep>,
}

struct Batch {
    positions: Vec<usize>,
    labels: Vec<ClassId>,
}

struct Sampler<'a> {
    data: &'a Dataset,
    records: BTreeMap<ClassId, &'a ClassRecord>,
}

impl Sampler<'_> {
    fn batch(&self, size: usize, r: &mut GilRng) -> Batch {
        let positions: Vec<usize> = (0..size).map(|_| r.random_range(0..self.data.len())).collect();
        let labels = positions.iter().map(|&i| self.data.class_of(i)).collect();
        Batch { positions, labels }
    }

    fn embeddings(&self, labels: &[ClassId]) -> Tensor {
        Tensor::from_rows(&labels.iter().map(|c| self.records[c].embedding.as_slice()).collect::<Vec<_>>())
    }

    fn conditions(&self, models: &GanModels, labels: &[ClassId], r: &mut GilRng) -> Tensor {
        let mut cond = Vec::with_capacity(labels.len() * models.condition_width());
        for c in labels {
            models.push_conditions(self.records[c], 1, r, &mut cond);
        }
        Tensor::matrix(labels.len(), models.condition_width(), cond)
    }
}

/// Adversarial training of `models` on `data`.
///
/// `conditions` supplies the embedding (and, for the prototype modes, the
/// statistics) of every class in `data`. Each generator step follows
/// `n_critic` critic steps; `H` and `T` take one step each per generator step.
pub fn train_gan(
    models: &mut GanModels,
    data: &Dataset,
    conditions: &[ClassRecord],
    classifier: Option<&dyn FrozenClassifier>,
    config: &GanConfig,
    seed: u64,
) -> Result<GanHistory> {
    config.validate()?;
    if data.is_empty() {
        return Err(GilError::Input("cannot train the generator on an empty dataset".into()));
    }
    if data.dim() != models.feature_dim() {
        return Err(GilError::Input(format!(
            "feature dimension {} does not match the generator output {}",
            data.dim(),
            models.feature_dim()
        )));
    }
    let records: BTreeMap<ClassId, &ClassRecord> = conditions.iter().map(|r| (r.class_id, r)).collect();
    for c in data.classes() {
        let rec = records
            .get(&c)
            .ok_or_else(|| GilError::Input(format!("no generator condition for class {c}")))?;
        models.check_record(rec)?;
        if rec.embedding.len() != models.semantic_dim() {
            return Err(GilError::Input(format!("embedding of class {c} has the wrong dimension")));
        }
    }
    let sampler = Sampler { data, records };
    let use_cls = classifier.is_some() && config.cls_weight > 0.0;
    let use_mi = config.mi_weight > 0.0;

    let mut f_opt = AdamState::new(config.generator_adam, &models.generator);
    let mut g_opt = AdamState::new(config.critic_adam, &models.critic);
    let mut h_opt = AdamState::new(config.auxiliary_adam, &models.projection);
    let mut t_opt = AdamState::new(config.auxiliary_adam, &models.statistics);
    let mut r = rng::stream(seed, "gan-train");
    let mut history = GanHistory { steps: Vec::with_capacity(config.steps) };

    for step in 0..config.steps {
        // Critic.
        let mut critic_value = 0.0;
        let mut penalty_value = 0.0;
        let mut last_real = None;
        for _ in 0..config.n_critic {
            let batch = sampler.batch(config.batch_size, &mut r);
            let real = data.tensor(&batch.positions);
            let real_pair = at_step(models.projection.apply(&real), "projection", step)?;
            let cond = sampler.conditions(models, &batch.labels, &mut r);
            let fake = at_step(models.generator.apply(&cond), "generator", step)?;
            let fake_pair = sampler.embeddings(&batch.labels);
            let mix = match config.penalty_point {
                PenaltyPoint::Generated => None,
                PenaltyPoint::Interpolated => Some((0..batch.positions.len()).map(|_| r.random::<f64>()).collect()),
            };
            let cb = CriticBatch { real, real_pair, fake, fake_pair, mix };
            let critic = &models.critic;
            let grads = at_step(
                (|| -> Result<Vec<Tensor>, NnError> {
                    let mut g = Graph::new();
                    let params = critic.bind(&mut g);
                    let terms = critic_loss(&mut g, critic, &params, &cb, Penalty::of(config))?;
                    let loss = g.scale(terms.objective, -1.0)?;
                    let grads = g.backward(loss)?;
                    critic_value = g.value(terms.objective).item();
                    penalty_value = g.value(terms.penalty).item();
                    Ok(critic.bound_gradients(&grads, &params))
                })(),
                "critic",
                step,
            )?;
            at_step(g_opt.step(&mut models.critic, &grads), "critic", step)?;
            last_real = Some((cb.real, batch.labels));
        }

        // Generator.
        let batch = sampler.batch(config.batch_size, &mut r);
        let cond = sampler.conditions(models, &batch.labels, &mut r);
        let a = sampler.embeddings(&batch.labels);
        let mut a_rows: Vec<usize> = (0..batch.labels.len()).collect();
        a_rows.shuffle(&mut r);
        let a_shuffled = Tensor::from_rows(&a_rows.iter().map(|&i| a.row_slice(i)).collect::<Vec<_>>());

        let mut g = Graph::new();
        let f_params = models.generator.bind(&mut g);
        let cond_node = g.constant(cond);
        let fake = at_step(models.generator.forward_with(&mut g, cond_node, &f_params), "generator", step)?;
        let x_hat = fake.output;
        let a_node = g.constant(a.clone());
        let pair = at_step(g.concat_cols(x_hat, a_node), "generator", step)?;
        let score = at_step(models.critic.forward_frozen(&mut g, pair), "generator", step)?;
        let score = at_step(g.mean(score), "generator", step)?;
        let mut total = at_step(g.scale(score, -1.0), "generator", step)?;
        let mut cls_value = 0.0;
        if use_cls {
            let cls = at_step(
                cls_regularizer(&mut g, classifier.unwrap(), x_hat, &batch.labels),
                "classification loss",
                step,
            )?;
            cls_value = g.value(cls).item();
            let weighted = at_step(g.scale(cls, config.cls_weight), "classification loss", step)?;
            total = at_step(g.add(total, weighted), "classification loss", step)?;
        }
        let shuffled_node = g.constant(a_shuffled.clone());
        let mut mi_value = 0.0;
        if use_mi {
            let t_params = models.statistics.bind_frozen(&mut g);
            let mi = at_step(
                mi_lower_bound(&mut g, &models.statistics, &t_params, x_hat, a_node, shuffled_node),
                "mutual information",
                step,
            )?;
            mi_value = g.value(mi).item();
            let weighted = at_step(g.scale(mi, -config.mi_weight), "mutual information", step)?;
            total = at_step(g.add(total, weighted), "mutual information", step)?;
        }
        let grads = at_step(g.backward(total), "generator", step)?;
        let generator_value = g.value(total).item();
        let f_grads = models.generator.gradients(&grads, &fake);
        let x_hat_value = g.value(x_hat).clone();
        at_step(f_opt.step(&mut models.generator, &f_grads), "generator", step)?;

        // Statistics network: maximize the bound on the generated batch.
        if use_mi {
            let statistics = &models.statistics;
            let t_grads = at_step(
                (|| -> Result<Vec<Tensor>, NnError> {
                    let mut g = Graph::new();
                    let params = statistics.bind(&mut g);
                    let x = g.constant(x_hat_value);
                    let a = g.constant(a);
                    let s = g.constant(a_shuffled);
                    let est = mi_lower_bound(&mut g, statistics, &params, x, a, s)?;
                    let loss = g.scale(est, -1.0)?;
                    let grads = g.backward(loss)?;
                    Ok(statistics.bound_gradients(&grads, &params))
                })(),
                "mutual information",
                step,
            )?;
            at_step(t_opt.step(&mut models.statistics, &t_grads), "mutual information", step)?;
        }

        // Projection: regress the embedding from the last real critic batch.
        let (real, labels) = last_real.expect("n_critic >= 1");
        let target = sampler.embeddings(&labels);
        let projection = &models.projection;
        let mut projection_value = 0.0;
        let h_grads = at_step(
            (|| -> Result<Vec<Tensor>, NnError> {
                let mut g = Graph::new();
                let params = projection.bind(&mut g);
                let x = g.constant(real);
                let a = g.constant(target);
                let loss = projection_loss(&mut g, projection, &params, x, a)?;
                let grads = g.backward(loss)?;
                projection_value = g.value(loss).item();
                Ok(projection.bound_gradients(&grads, &params))
            })(),
            "projection",
            step,
        )?;
        at_step(h_opt.step(&mut models.projection, &h_grads), "projection", step)?;

        history.steps.push(GanStep {
            critic: critic_value,
            penalty: penalty_value,
            generator: generator_value,
            cls: cls_value,
            mi: mi_value,
            projection: projection_value,
        });
    }
    Ok(history)
}
