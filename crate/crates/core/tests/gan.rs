mod support;

use gil_core::data::Dataset;
use gil_core::gan::*;
use gil_core::nn::{Activation, Graph, Layer, Mlp};
use gil_core::replay::ClassRecord;
use gil_core::{GilError, Tensor};
use support::*;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

// 3 inputs (d = 2, s = 1) -> 2 hidden (leaky 0.2) -> 1.
const W1: [[f64; 2]; 3] = [[0.5, -1.0], [0.25, 0.75], [-0.5, 0.3]];
const B1: [f64; 2] = [0.1, -0.2];
const W2: [f64; 2] = [1.5, -0.8];
const B2: f64 = 0.05;

fn tiny_critic() -> Mlp {
    Mlp::new(vec![
        Layer {
            weight: Tensor::matrix(3, 2, W1.iter().flatten().copied().collect()),
            bias: Tensor::row(&B1),
            activation: Activation::LeakyRelu(0.2),
        },
        Layer { weight: Tensor::matrix(2, 1, W2.to_vec()), bias: Tensor::scalar(B2), activation: Activation::Linear },
    ])
    .unwrap()
}

fn pre(v: [f64; 3]) -> [f64; 2] {
    let mut z = B1;
    for (j, zj) in z.iter_mut().enumerate() {
        for i in 0..3 {
            *zj += v[i] * W1[i][j];
        }
    }
    z
}

fn oracle_score(v: [f64; 3]) -> f64 {
    let z = pre(v);
    B2 + W2[0] * leaky(z[0]) + W2[1] * leaky(z[1])
}

fn oracle_grad_norm(v: [f64; 3], feature_only: bool) -> f64 {
    let z = pre(v);
    let slope = |x: f64| if x > 0.0 { 1.0 } else { 0.2 };
    let dims = if feature_only { 2 } else { 3 };
    (0..dims)
        .map(|i| {
            let g = W2[0] * slope(z[0]) * W1[i][0] + W2[1] * slope(z[1]) * W1[i][1];
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

fn two_sample_batch() -> CriticBatch {
    CriticBatch {
        real: Tensor::matrix(2, 2, vec![1.0, 2.0, -0.5, 0.3]),
        real_pair: Tensor::matrix(2, 1, vec![0.7, -1.2]),
        fake: Tensor::matrix(2, 2, vec![0.2, -0.4, 1.1, 0.9]),
        fake_pair: Tensor::matrix(2, 1, vec![1.0, 0.0]),
        mix: None,
    }
}

#[test]
fn critic_objective_matches_term_by_term_oracle() {
    let batch = two_sample_batch();
    let critic = tiny_critic();
    let rows = |x: &Tensor, a: &Tensor| -> Vec<[f64; 3]> {
        (0..2).map(|i| [x.get(i, 0), x.get(i, 1), a.get(i, 0)]).collect()
    };
    let real = rows(&batch.real, &batch.real_pair);
    let fake = rows(&batch.fake, &batch.fake_pair);
    for (scope, feature_only) in [(PenaltyScope::Joint, false), (PenaltyScope::Feature, true)] {
        let alpha = 10.0;
        let e_real = real.iter().map(|&v| oracle_score(v)).sum::<f64>() / 2.0;
        let e_fake = fake.iter().map(|&v| oracle_score(v)).sum::<f64>() / 2.0;
        let gp = alpha * fake.iter().map(|&v| (oracle_grad_norm(v, feature_only) - 1.0).powi(2)).sum::<f64>() / 2.0;

        let mut g = Graph::new();
        let params = critic.bind_frozen(&mut g);
        let penalty = Penalty { weight: alpha, point: PenaltyPoint::Generated, scope };
        let t = critic_loss(&mut g, &critic, &params, &batch, penalty).unwrap();
        let v = |n| g.value(n).item();
        assert!((v(t.real) - e_real).abs() < 1e-12);
        assert!((v(t.fake) - e_fake).abs() < 1e-12);
        assert!((v(t.penalty) - gp).abs() < 1e-12, "{scope:?}: {} vs {gp}", v(t.penalty));
        assert!((v(t.objective) - (e_real - e_fake - gp)).abs() < 1e-10);
        assert!((v(t.objective) - (v(t.real) - v(t.fake) - v(t.penalty))).abs() < 1e-10);
    }
}

fn linear_critic(w: [f64; 3]) -> Mlp {
    Mlp::new(vec![Layer { weight: Tensor::matrix(3, 1, w.to_vec()), bias: Tensor::scalar(0.0), activation: Activation::Linear }])
        .unwrap()
}

fn penalty_of(critic: &Mlp, weight: f64) -> f64 {
    let mut g = Graph::new();
    let p = critic.bind_frozen(&mut g);
    let penalty = Penalty { weight, point: PenaltyPoint::Generated, scope: PenaltyScope::Joint };
    let t = critic_loss(&mut g, critic, &p, &two_sample_batch(), penalty).unwrap();
    g.value(t.penalty).item()
}

#[test]
fn linear_critic_penalties() {
    assert_eq!(penalty_of(&linear_critic([0.6, 0.8, 0.0]), 10.0), 0.0);
    // ||w|| = 5.
    let p = penalty_of(&linear_critic([3.0, 0.0, 4.0]), 10.0);
    assert!((p - 160.0).abs() < 1e-9, "{p}");
}

#[test]
fn interpolated_point_needs_mixing_weights() {
    let critic = tiny_critic();
    let mut g = Graph::new();
    let p = critic.bind_frozen(&mut g);
    let penalty = Penalty { weight: 1.0, point: PenaltyPoint::Interpolated, scope: PenaltyScope::Joint };
    assert!(critic_loss(&mut g, &critic, &p, &two_sample_batch(), penalty).is_err());
    let batch = CriticBatch { mix: Some(vec![1.0, 1.0]), ..two_sample_batch() };
    // All weight on the real rows: the penalty is taken at (x, a).
    let t = critic_loss(&mut g, &critic, &p, &batch, penalty).unwrap();
    let want = (0..2)
        .map(|i| (oracle_grad_norm([batch.real.get(i, 0), batch.real.get(i, 1), batch.fake_pair.get(i, 0)], false) - 1.0).powi(2))
        .sum::<f64>()
        / 2.0;
    assert!((g.value(t.penalty).item() - want).abs() < 1e-12);
}

fn linear_classifier(classes: usize) -> SoftmaxClassifier {
    // Identity map: the input rows are the logits.
    let eye = (0..classes * classes).map(|i| if i / classes == i % classes { 1.0 } else { 0.0 }).collect();
    SoftmaxClassifier {
        network: Mlp::new(vec![Layer {
            weight: Tensor::matrix(classes, classes, eye),
            bias: Tensor::zeros(1, classes),
            activation: Activation::Linear,
        }])
        .unwrap(),
        classes: (10..10 + classes as u32).collect(),
    }
}

fn cls_value(classifier: &SoftmaxClassifier, logits: Tensor, labels: &[u32]) -> gil_core::Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(logits);
    let l = cls_regularizer(&mut g, classifier, x, labels)?;
    Ok(g.value(l).item())
}

#[test]
fn classification_loss_by_hand() {
    let c = linear_classifier(3);
    let uniform = cls_value(&c, Tensor::filled(4, 3, 0.3), &[10, 11, 12, 10]).unwrap();
    assert!((uniform - 3f64.ln()).abs() < 1e-12);
    let sure = cls_value(&c, Tensor::matrix(1, 3, vec![0.0, 1000.0, 0.0]), &[11]).unwrap();
    assert!(sure.abs() < 1e-12);

    let rows: [[f64; 3]; 2] = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
    let labels = [12u32, 10];
    let want = rows
        .iter()
        .zip(labels)
        .map(|(r, l)| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[(l - 10) as usize].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let got = cls_value(&c, Tensor::from_rows(&rows), &labels).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    assert!(matches!(cls_value(&c, Tensor::from_rows(&rows), &[12, 99]), Err(GilError::Input(_))));
}

fn mi_value(t: &Mlp, x: Tensor, a: Tensor, shuffled: Tensor) -> f64 {
    let mut g = Graph::new();
    let p = t.bind_frozen(&mut g);
    let (x, a, s) = (g.constant(x), g.constant(a), g.constant(shuffled));
    let est = mi_lower_bound(&mut g, t, &p, x, a, s).unwrap();
    g.value(est).item()
}

#[test]
fn mutual_information_bound_by_hand() {
    // T(x, a) = x0 + 2 x1 - a0 + 0.5.
    let t = Mlp::new(vec![Layer {
        weight: Tensor::matrix(3, 1, vec![1.0, 2.0, -1.0]),
        bias: Tensor::scalar(0.5),
        activation: Activation::Linear,
    }])
    .unwrap();
    let x = Tensor::matrix(2, 2, vec![0.3, -0.1, 1.0, 0.4]);
    let a = Tensor::matrix(2, 1, vec![0.2, 0.9]);
    let s = Tensor::matrix(2, 1, vec![0.9, 0.2]);
    let tv = |x0: f64, x1: f64, a0: f64| x0 + 2.0 * x1 - a0 + 0.5;
    let joint = (tv(0.3, -0.1, 0.2) + tv(1.0, 0.4, 0.9)) / 2.0;
    let marginal = ((tv(0.3, -0.1, 0.9).exp() + tv(1.0, 0.4, 0.2).exp()) / 2.0).ln();
    let got = mi_value(&t, x.clone(), a.clone(), s);
    assert!((got - (joint - marginal)).abs() < 1e-12);

    // One sample: the shuffle is the identity.
    let one = mi_value(&t, Tensor::row(&[0.3, -0.1]), Tensor::scalar(0.2), Tensor::scalar(0.2));
    assert!(one.abs() < 1e-12);

    let constant = Mlp::new(vec![Layer { weight: Tensor::zeros(3, 1), bias: Tensor::scalar(2.5), activation: Activation::Linear }]).unwrap();
    assert!(mi_value(&constant, x, a.clone(), a).abs() < 1e-12);
}

#[test]
fn projection_loss_examples() {
    let h = Mlp::new(vec![Layer { weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]), bias: Tensor::zeros(1, 2), activation: Activation::Linear }])
        .unwrap();
    let eval = |x: Tensor, a: Tensor| {
        let mut g = Graph::new();
        let p = h.bind_frozen(&mut g);
        let (x, a) = (g.constant(x), g.constant(a));
        let l = projection_loss(&mut g, &h, &p, x, a).unwrap();
        g.value(l).item()
    };
    let x = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]);
    assert_eq!(eval(x.clone(), x.clone()), 0.0);
    assert!((eval(x.clone(), x.map(|v| v - 1.0)) - 1.0).abs() < 1e-12);
}

fn tiny_run(steps: usize, seed: u64) -> (GanModels, GanHistory) {
    let (ds, recs) = toy_data(5, [1.0; 3]);
    let mut config = toy_config(steps);
    config.mi_weight = 0.01;
    let mut m = GanModels::new(Conditioning::Semantic, 2, 3, &config, seed);
    let h = train_gan(&mut m, &ds, &recs, None, &config, seed).unwrap();
    (m, h)
}

#[test]
fn training_is_deterministic_and_zero_steps_is_a_no_op() {
    let (m1, h1) = tiny_run(30, 3);
    let (m2, h2) = tiny_run(30, 3);
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.steps.len(), 30);
    assert!(h1.steps.iter().all(|s| s.mi != 0.0 && s.projection > 0.0));
    let (m3, _) = tiny_run(30, 4);
    assert_ne!(m1.generator.checksum(), m3.generator.checksum());

    let (ds, recs) = toy_data(5, [1.0; 3]);
    let config = toy_config(0);
    let mut m = GanModels::new(Conditioning::Semantic, 2, 3, &config, 1);
    let before = m.clone();
    let h = train_gan(&mut m, &ds, &recs, None, &config, 1).unwrap();
    assert!(h.steps.is_empty());
    assert_eq!(m, before);
}

#[test]
fn training_rejects_missing_conditions_and_bad_dims() {
    let (ds, recs) = toy_data(0, [1.0; 3]);
    let config = toy_config(1);
    let mut m = GanModels::new(Conditioning::Semantic, 2, 3, &config, 0);
    assert!(matches!(train_gan(&mut m, &ds, &recs[..2], None, &config, 0), Err(GilError::Input(_))));
    assert!(matches!(train_gan(&mut m, &Dataset::new(2), &recs, None, &config, 0), Err(GilError::Input(_))));
    let mut wide = GanModels::new(Conditioning::Semantic, 3, 3, &config, 0);
    assert!(train_gan(&mut wide, &ds, &recs, None, &config, 0).is_err());
}

#[test]
fn huge_penalty_keeps_critic_gradients_near_one() {
    let (ds, recs) = toy_data(1, [1.0; 3]);
    let mut config = toy_config(200);
    config.gp_weight = 1e6;
    let mut m = GanModels::new(Conditioning::Semantic, 2, 3, &config, 1);
    train_gan(&mut m, &ds, &recs, None, &config, 1).unwrap();
    for rec in &recs {
        let x = synthesize(&m, rec, 50, 9).unwrap();
        let input: Vec<[f64; 5]> = x.iter().map(|f| [f[0], f[1], rec.embedding[0], rec.embedding[1], rec.embedding[2]]).collect();
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_rows(&input));
        let trace = m.critic.forward(&mut g, v).unwrap();
        let grad = m.critic.input_gradient(&mut g, &trace).unwrap();
        let norms = g.value(grad).clone();
        for i in 0..norms.rows() {
            let n = norms.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((0.5..=1.5).contains(&n), "class {}: gradient norm {n}", rec.class_id);
        }
    }
}

#[test]
fn synthesize_shapes_and_zero_noise() {
    let config = toy_config(0);
    let m = GanModels::new(Conditioning::Prototype, 2, 3, &config, 0);
    let rec = ClassRecord::new(0, vec![1.0, -1.0], vec![0.0, 0.0], vec![1.0, 0.0, 0.0], 0).unwrap();
    let out = synthesize(&m, &rec, 5, 11).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|f| f.len() == 2 && *f == out[0]));
    // With zero noise the seed does not matter.
    assert_eq!(synthesize(&m, &rec, 1, 12).unwrap()[0], out[0]);
    let noisy = ClassRecord::new(0, vec![1.0, -1.0], vec![0.5, 0.5], vec![1.0, 0.0, 0.0], 0).unwrap();
    let a = synthesize(&m, &noisy, 3, 11).unwrap();
    assert_eq!(a, synthesize(&m, &noisy, 3, 11).unwrap());
    assert_ne!(a[0], a[1]);
    let short = ClassRecord::new(0, vec![1.0], vec![0.0], vec![1.0, 0.0, 0.0], 0).unwrap();
    assert!(matches!(synthesize(&m, &short, 1, 0), Err(GilError::Input(_))));
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn synthesized_spread_follows_stored_noise() {
    let stds = [0.3, 1.5, 0.8];
    let (ds, recs) = toy_data(2, stds);
    let mut config = toy_config(3000);
    config.conditioning = Conditioning::Prototype;
    let mut m = GanModels::new(Conditioning::Prototype, 2, 3, &config, 2);
    train_gan(&mut m, &ds, &recs, None, &config, 2).unwrap();
    let variances: Vec<f64> = recs
        .iter()
        .map(|rec| {
            let out = synthesize(&m, rec, 1000, 4).unwrap();
            (0..2)
                .map(|k| {
                    let mean = out.iter().map(|f| f[k]).sum::<f64>() / out.len() as f64;
                    out.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / out.len() as f64
                })
                .sum()
        })
        .collect();
    let sigma2: Vec<f64> = recs.iter().map(|r| r.noise.iter().map(|s| s * s).sum()).collect();
    let rho = spearman(&variances, &sigma2);
    assert!(rho >= 0.99, "synthesized variances {variances:?} vs sigma^2 {sigma2:?}");
}
