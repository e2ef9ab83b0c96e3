//! Brute-force reimplementations used as oracles. Each one takes the slow,
//! obvious route: two passes, full sorts, scalar loops.

use gil_core::data::ClassId;
use gil_core::eval::RunResult;
use gil_core::nn::{Activation, Mlp};
use gil_core::pipeline::HeadModel;
use gil_core::rng::{self, GilRng};
use rand::Rng;

/// Two-pass mean and population std per dimension.
pub fn prototype(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let d = features[0].len();
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| (features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Sort every candidate by (score desc, id asc) and look for the label in
/// the first `k`.
pub fn top_k(scores: &[Vec<f64>], candidates: &[ClassId], labels: &[ClassId], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &label) in scores.iter().zip(labels) {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(candidates[a].cmp(&candidates[b])));
        if order[..k].iter().any(|&j| candidates[j] == label) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Activation::Tanh => x.tanh(),
    }
}

/// Scalar-loop forward pass.
pub fn mlp_forward(net: &Mlp, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for layer in net.layers() {
        let (k, m) = (layer.weight.rows(), layer.weight.cols());
        h = (0..m)
            .map(|j| {
                let z = layer.bias.data()[j] + (0..k).map(|i| h[i] * layer.weight.get(i, j)).sum::<f64>();
                act(layer.activation, z)
            })
            .collect();
    }
    h
}

/// Nearest anchor by cosine over every candidate; strict improvement is
/// needed to replace an earlier (lower-id) one. Anchors must be sorted by id.
pub fn predict(head: &HeadModel, feature: &[f64], anchors: &[(ClassId, Vec<f64>)]) -> ClassId {
    let h = mlp_forward(&head.network, feature);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = |a: &[f64]| {
        let (na, nh) = (norm(a), norm(&h));
        if nh == 0.0 || na == 0.0 {
            0.0
        } else {
            h.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() / (na * nh)
        }
    };
    let mut best = anchors[0].0;
    let mut best_score = cos(&anchors[0].1);
    for (id, a) in &anchors[1..] {
        let s = cos(a);
        if s > best_score {
            best = *id;
            best_score = s;
        }
    }
    best
}

/// Two-pass mean and population std of each named metric.
pub fn aggregate(results: &[RunResult]) -> Vec<(String, f64, f64)> {
    let names: Vec<&str> = results[0].metrics().iter().map(|m| m.0).collect();
    names
        .iter()
        .map(|&name| {
            let v: Vec<f64> =
                results.iter().map(|r| r.metrics().into_iter().find(|m| m.0 == name).unwrap().1).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (name.to_string(), mean, var.sqrt())
        })
        .collect()
}

/// Random run result with accuracies on a coarse grid, so ties and repeated
/// values occur.
pub fn random_result(r: &mut GilRng, seed: u64, gzsl: bool) -> RunResult {
    use gil_core::eval::Gzsl;
    use gil_core::pipeline::RunMode;
    let mut acc = || r.random_range(0..=40) as f64 / 40.0;
    let (top1, extra, retention) = (acc(), acc(), acc());
    let gzsl = gzsl.then(|| {
        let (u, s) = (acc(), acc());
        Gzsl { u, s, h: gil_core::eval::harmonic_mean(u, s).unwrap() }
    });
    RunResult {
        seed,
        mode: RunMode::Gil,
        zsl_top1: top1,
        zsl_top5: (top1 + extra).min(1.0),
        gzsl,
        pretrain_retention: retention,
        stage_curve: Vec::new(),
        config_digest: "fixed".into(),
    }
}

/// Counts of exact agreement with each oracle over `instances` randomized
/// cases, in the order prototype, top-k, predict, aggregate.
pub fn agreement(instances: usize, seed: u64) -> [(&'static str, usize); 4] {
    use gil_core::eval::{aggregate_runs, top_k_accuracy};
    use gil_core::pipeline::{predict, Anchors};
    use gil_core::replay::compute_prototype;
    use gil_core::Tensor;

    let mut r = rng::stream(seed, "oracle-agreement");
    let mut counts = [("compute_prototype", 0), ("top_k_accuracy", 0), ("predict", 0), ("aggregate_runs", 0)];
    for i in 0..instances {
        // Prototype.
        let (n, d) = (r.random_range(1..30), r.random_range(1..8));
        let offset = r.random_range(-5.0..5.0);
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| offset + 2.0 * rng::normal(&mut r)).collect()).collect();
        let (mu, sd) = compute_prototype(&feats).unwrap();
        let (mu_o, sd_o) = prototype(&feats);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
        if close(&mu, &mu_o) && close(&sd, &sd_o) {
            counts[0].1 += 1;
        }

        // Top-k, on coarse scores so ties are common.
        let (rows, k_cands) = (r.random_range(1..20), r.random_range(1..9));
        let mut candidates: Vec<ClassId> = (0..k_cands as u32).map(|c| c * 3 + r.random_range(0..3)).collect();
        candidates.reverse();
        let scores: Vec<Vec<f64>> = (0..rows).map(|_| (0..k_cands).map(|_| r.random_range(0..4) as f64).collect()).collect();
        let labels: Vec<ClassId> = (0..rows).map(|_| candidates[r.random_range(0..k_cands)]).collect();
        let k = r.random_range(1..=k_cands);
        let got = top_k_accuracy(&Tensor::from_rows(&scores), &candidates, &labels, k).unwrap();
        if got == top_k(&scores, &candidates, &labels, k) {
            counts[1].1 += 1;
        }

        // 1-NN prediction over 5 candidates.
        let (fd, sd_dim) = (r.random_range(2..6), r.random_range(2..5));
        let head = HeadModel::new(fd, 4, sd_dim, seed.wrapping_mul(1000) + i as u64);
        let mut ids: Vec<ClassId> = Vec::new();
        while ids.len() < 5 {
            let c = r.random_range(0..50);
            if !ids.contains(&c) {
                ids.push(c);
            }
        }
        let mut entries: Vec<(ClassId, Vec<f64>)> =
            ids.iter().map(|&c| (c, (0..sd_dim).map(|_| rng::normal(&mut r)).collect())).collect();
        let anchors = Anchors::new(entries.clone()).unwrap();
        entries.sort_by_key(|e| e.0);
        let feature: Vec<f64> = (0..fd).map(|_| rng::normal(&mut r)).collect();
        if predict(&head, &feature, &anchors).unwrap() == self::predict(&head, &feature, &entries) {
            counts[2].1 += 1;
        }

        // Aggregation.
        let runs = r.random_range(2..8);
        let gzsl = r.random_bool(0.5);
        let results: Vec<RunResult> = (0..runs).map(|s| random_result(&mut r, s as u64, gzsl)).collect();
        let agg = aggregate_runs(&results).unwrap();
        let oracle = aggregate(&results);
        let ok = agg.metrics.len() == oracle.len()
            && agg.metrics.iter().zip(&oracle).all(|(m, (name, mean, std))| {
                m.name == *name && (m.mean - mean).abs() <= 1e-12 && (m.std - std).abs() <= 1e-12
            });
        if ok {
            counts[3].1 += 1;
        }
    }
    counts
}
