//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

pub mod oracles;

use gil_core::gan::{critic_loss, CriticBatch, Penalty, PenaltyPoint, PenaltyScope};
use gil_core::nn::{widths, Activation, Graph, Mlp, NodeId, Parameters};
use gil_core::rng::{self, GilRng};
use gil_core::Tensor;

pub const STEP: f64 = 1e-5;

pub fn random_tensor(r: &mut GilRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng::normal(r)).collect())
}

/// Like [`random_tensor`] but every entry has magnitude at least `gap`, so
/// kinks at zero are never straddled by a finite-difference step.
pub fn away_from_zero(r: &mut GilRng, rows: usize, cols: usize, gap: f64) -> Tensor {
    random_tensor(r, rows, cols).map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

/// Relative error with an absolute floor for gradients that are nearly zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every entry of every input.
pub fn check_gradients(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leaves);
    let grads = g.backward(loss).expect("backward");
    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[k]);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// `sum(out * weights)`: turns any node into a scalar with a non-trivial
/// gradient.
pub fn weighted_sum(g: &mut Graph, out: NodeId, weights: &Tensor) -> NodeId {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Worst relative error over the finite-difference checks of every op kind.
pub fn all_op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng::stream(seed, "fd-ops");
    let mut out = Vec::new();
    let a = away_from_zero(&mut r, 3, 4, 0.05);
    let b = away_from_zero(&mut r, 3, 4, 0.05);
    let w34 = random_tensor(&mut r, 3, 4);
    let m45 = random_tensor(&mut r, 4, 5);
    let w35 = random_tensor(&mut r, 3, 5);
    let bias = random_tensor(&mut r, 1, 4);
    let small = random_tensor(&mut r, 3, 4).map(|x| 0.5 * x);

    let unary = |name: &'static str, x: &Tensor, op: fn(&mut Graph, NodeId) -> NodeId, out: &mut Vec<(&'static str, f64)>, w: &Tensor| {
        let w = w.clone();
        out.push((name, check_gradients(&[x.clone()], &move |g, ids| {
            let y = op(g, ids[0]);
            weighted_sum(g, y, &w)
        })));
    };
    {
        let w = w35.clone();
        out.push(("matmul", check_gradients(&[a.clone(), m45.clone()], &move |g, ids| {
            let y = g.matmul(ids[0], ids[1]).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    {
        let w = random_tensor(&mut r, 4, 3);
        out.push(("transpose", check_gradients(&[a.clone()], &move |g, ids| {
            let y = g.transpose(ids[0]).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    {
        let w = w34.clone();
        out.push(("add_row_bias", check_gradients(&[a.clone(), bias.clone()], &move |g, ids| {
            let y = g.add_row_bias(ids[0], ids[1]).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    for (name, op) in [
        ("add", Graph::add as fn(&mut Graph, NodeId, NodeId) -> _),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
    ] {
        let w = w34.clone();
        out.push((name, check_gradients(&[a.clone(), b.clone()], &move |g, ids| {
            let y = op(g, ids[0], ids[1]).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    unary("scale", &a, |g, x| g.scale(x, -2.5).unwrap(), &mut out, &w34);
    unary("add_scalar", &a, |g, x| g.add_scalar(x, 0.7).unwrap(), &mut out, &w34);
    unary("relu", &a, |g, x| g.activation(x, Activation::Relu).unwrap(), &mut out, &w34);
    unary("leaky_relu", &a, |g, x| g.activation(x, Activation::LeakyRelu(0.2)).unwrap(), &mut out, &w34);
    unary("tanh", &a, |g, x| g.activation(x, Activation::Tanh).unwrap(), &mut out, &w34);
    unary("abs", &a, |g, x| g.abs(x).unwrap(), &mut out, &w34);
    unary("exp", &small, |g, x| g.exp(x).unwrap(), &mut out, &w34);
    unary("square", &a, |g, x| g.square(x).unwrap(), &mut out, &w34);
    unary("sum", &a, |g, x| g.sum(x).unwrap(), &mut out, &Tensor::scalar(1.3));
    unary("mean", &a, |g, x| g.mean(x).unwrap(), &mut out, &Tensor::scalar(-0.4));
    unary("row_norm", &a, |g, x| g.row_norm(x).unwrap(), &mut out, &random_tensor(&mut r, 3, 1));
    unary("normalize_rows", &a, |g, x| g.normalize_rows(x).unwrap(), &mut out, &w34);
    unary("log_mean_exp", &a, |g, x| g.log_mean_exp(x).unwrap(), &mut out, &Tensor::scalar(0.9));
    unary("softmax_cross_entropy", &a, |g, x| g.softmax_cross_entropy(x, &[2, 0, 3]).unwrap(), &mut out, &Tensor::scalar(1.0));
    {
        let w = random_tensor(&mut r, 3, 9);
        out.push(("concat_cols", check_gradients(&[a.clone(), w35.clone()], &move |g, ids| {
            let y = g.concat_cols(ids[0], ids[1]).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    {
        let w = random_tensor(&mut r, 3, 2);
        out.push(("slice_cols", check_gradients(&[a.clone()], &move |g, ids| {
            let y = g.slice_cols(ids[0], 1, 3).unwrap();
            weighted_sum(g, y, &w)
        })));
    }
    out
}

/// Shapes used for the network-level check.
pub const MLP_SHAPES: [(&[usize], Activation); 3] = [
    (&[3, 5, 2], Activation::Relu),
    (&[4, 8, 6, 3], Activation::LeakyRelu(0.2)),
    (&[6, 7, 1], Activation::Tanh),
];

/// Worst relative error of parameter and input gradients of a squared-error
/// loss through a random MLP of the given shape.
pub fn mlp_error(shape: &[usize], act: Activation, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "fd-mlp");
    let net = Mlp::init(shape, act, Activation::Linear, &mut r);
    let n = 4;
    let input = random_tensor(&mut r, n, shape[0]);
    let target = random_tensor(&mut r, n, *shape.last().unwrap());
    let mut inputs: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
    inputs.push(input);
    let layers = net.layers().to_vec();
    check_gradients(&inputs, &move |g, ids| {
        let mut h = ids[ids.len() - 1];
        for (l, layer) in layers.iter().enumerate() {
            let z = g.matmul(h, ids[2 * l]).unwrap();
            let z = g.add_row_bias(z, ids[2 * l + 1]).unwrap();
            h = g.activation(z, layer.activation).unwrap();
        }
        let t = g.constant(target.clone());
        let d = g.sub(h, t).unwrap();
        let s = g.square(d).unwrap();
        g.mean(s).unwrap()
    })
}

/// Random small piecewise-linear critic over `d + s` inputs.
pub fn random_critic(seed: u64, d: usize, s: usize) -> Mlp {
    let mut r = rng::stream(seed, "fd-critic");
    let depth = 1 + (seed % 2) as usize;
    Mlp::init(&widths(d + s, 6, depth, 1), Activation::LeakyRelu(0.2), Activation::Linear, &mut r)
}

fn penalty_value(critic: &Mlp, batch: &CriticBatch, penalty: Penalty) -> f64 {
    let mut g = Graph::new();
    let p = critic.bind_frozen(&mut g);
    let t = critic_loss(&mut g, critic, &p, batch, penalty).unwrap();
    g.value(t.penalty).item()
}

/// Worst relative error between the analytic second-order gradient of the
/// penalty term with respect to the critic parameters and central
/// differences of the penalty value.
pub fn penalty_error(seed: u64, scope: PenaltyScope) -> f64 {
    let (d, s, n) = (3, 2, 4);
    let penalty = Penalty { weight: 10.0, point: PenaltyPoint::Generated, scope };
    let critic = random_critic(seed, d, s);
    let mut r = rng::stream(seed, "fd-penalty-batch");
    let batch = CriticBatch {
        real: random_tensor(&mut r, n, d),
        real_pair: random_tensor(&mut r, n, s),
        fake: random_tensor(&mut r, n, d),
        fake_pair: random_tensor(&mut r, n, s),
        mix: None,
    };
    let mut g = Graph::new();
    let params = critic.bind(&mut g);
    let terms = critic_loss(&mut g, &critic, &params, &batch, penalty).unwrap();
    let grads = g.backward(terms.penalty).unwrap();
    let analytic = critic.bound_gradients(&grads, &params);
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let mut plus = critic.clone();
            plus.parameters_mut()[k].data_mut()[i] += STEP;
            let mut minus = critic.clone();
            minus.parameters_mut()[k].data_mut()[i] -= STEP;
            let numeric = (penalty_value(&plus, &batch, penalty) - penalty_value(&minus, &batch, penalty)) / (2.0 * STEP);
            worst = worst.max(rel_err(grad.data()[i], numeric));
        }
    }
    worst
}

/// Class means of the 2-D toy benchmark; every pair is at least 4 apart.
pub const TOY_MEANS: [[f64; 2]; 3] = [[-4.0, 0.0], [4.0, 0.0], [0.0, 4.0]];

/// 300 samples per class around [`TOY_MEANS`] with per-class std `stds`,
/// plus one-hot embeddings and the measured prototypes.
pub fn toy_data(seed: u64, stds: [f64; 3]) -> (gil_core::data::Dataset, Vec<gil_core::replay::ClassRecord>) {
    use gil_core::replay::{compute_prototype, ClassRecord};
    let mut r = rng::stream(seed, "toy");
    let mut ds = gil_core::data::Dataset::new(2);
    let mut id = 0;
    for (c, m) in TOY_MEANS.iter().enumerate() {
        for _ in 0..300 {
            let f = [(m[0] + stds[c] * rng::normal(&mut r)) as f32, (m[1] + stds[c] * rng::normal(&mut r)) as f32];
            ds.push(id, c as u32, &f).unwrap();
            id += 1;
        }
    }
    let records = (0..3u32)
        .map(|c| {
            let (mu, sd) = compute_prototype(&ds.class_features(c)).unwrap();
            let mut e = vec![0.0; 3];
            e[c as usize] = 1.0;
            ClassRecord::new(c, mu, sd, e, 0).unwrap()
        })
        .collect();
    (ds, records)
}

/// The toy-benchmark GAN: no classification or MI terms, two time-scale
/// learning rates.
pub fn toy_config(steps: usize) -> gil_core::gan::GanConfig {
    use gil_core::gan::{Conditioning, GanConfig};
    use gil_core::nn::AdamConfig;
    GanConfig {
        hidden: 32,
        noise_dim: 2,
        steps,
        batch_size: 64,
        cls_weight: 0.0,
        mi_weight: 0.0,
        conditioning: Conditioning::Semantic,
        generator_adam: AdamConfig::adversarial().with_lr(1e-4),
        critic_adam: AdamConfig::adversarial().with_lr(4e-4),
        ..GanConfig::default()
    }
}

/// Distance between each class's synthesized mean (500 samples) and its
/// real mean.
pub fn toy_mean_errors(models: &gil_core::gan::GanModels, records: &[gil_core::replay::ClassRecord], seed: u64) -> Vec<f64> {
    records
        .iter()
        .map(|rec| {
            let out = gil_core::gan::synthesize(models, rec, 500, seed).unwrap();
            let m = TOY_MEANS[rec.class_id as usize];
            let mx = out.iter().map(|f| f[0]).sum::<f64>() / 500.0;
            let my = out.iter().map(|f| f[1]).sum::<f64>() / 500.0;
            ((mx - m[0]).powi(2) + (my - m[1]).powi(2)).sqrt()
        })
        .collect()
}
