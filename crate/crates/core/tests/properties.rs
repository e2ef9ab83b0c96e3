mod support;

use gil_core::data::{split, ClassId};
use gil_core::eval::{aggregate_runs, harmonic_mean, top_k_accuracy};
use gil_core::gan::{synthesize, Conditioning, GanConfig, GanModels};
use gil_core::nn::{AdamConfig, AdamState, Parameters};
use gil_core::pipeline::{class_schedule, predict_batch, Anchors, HeadModel};
use gil_core::replay::{compute_prototype, ClassRecord, CvaeConfig, CvaeModel};
use gil_core::rng;
use gil_core::Tensor;
use proptest::prelude::*;
use support::oracles;

fn features(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| proptest::collection::vec(proptest::collection::vec(-20.0..20.0f64, d), n))
}

fn distinct_classes(max: usize) -> impl Strategy<Value = Vec<ClassId>> {
    proptest::collection::btree_set(0u32..1000, 2..=max).prop_map(|s| s.into_iter().collect())
}

struct Flat(Vec<Tensor>);

impl Parameters for Flat {
    fn parameters(&self) -> Vec<&Tensor> {
        self.0.iter().collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.iter_mut().collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_the_classes(classes in distinct_classes(60), frac in 0.05..0.95f64, seed in any::<u64>()) {
        let s = split(&classes, frac, seed).unwrap();
        let mut all: Vec<ClassId> = s.seen.iter().chain(&s.unseen).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(&all, &classes);
        prop_assert!(!s.seen.is_empty() && !s.unseen.is_empty());
        prop_assert!(s.seen.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(split(&classes, frac, seed).unwrap(), s);
    }

    #[test]
    fn prototype_matches_two_pass(feats in features(40, 6)) {
        let (mu, sd) = compute_prototype(&feats).unwrap();
        let (mu_o, sd_o) = oracles::prototype(&feats);
        for j in 0..mu.len() {
            prop_assert!((mu[j] - mu_o[j]).abs() <= 1e-12, "mean {} vs {}", mu[j], mu_o[j]);
            prop_assert!((sd[j] - sd_o[j]).abs() <= 1e-12, "std {} vs {}", sd[j], sd_o[j]);
            prop_assert!(sd[j] >= 0.0);
        }
    }

    #[test]
    fn encoder_noise_is_never_negative(seed in any::<u64>(), emb in proptest::collection::vec(-3.0..3.0f64, 4)) {
        let config = CvaeConfig { hidden: 8, latent: 3, ..CvaeConfig::default() };
        let mut model = CvaeModel::new(4, 5, &config, seed);
        // The output layer starts at zero; give it random weights.
        let mut r = rng::stream(seed, "perturb");
        for p in model.decoder.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = rng::normal(&mut r));
        }
        let (_, sigma) = model.encode(&emb).unwrap();
        prop_assert_eq!(sigma.len(), 5);
        prop_assert!(sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn schedule_partitions_seen_classes(classes in distinct_classes(120), seed in any::<u64>()) {
        for pct in [1.0, 5.0, 10.0, 20.0, 50.0, 100.0] {
            let s = class_schedule(&classes, pct, seed).unwrap();
            let size = ((pct / 100.0 * classes.len() as f64 + 0.5).floor() as usize).max(1);
            let mut all: Vec<ClassId> = s.batches.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(&all, &classes);
            prop_assert!(s.batches.iter().all(|b| !b.is_empty() && b.len() <= size));
            prop_assert!(s.batches[..s.batches.len() - 1].iter().all(|b| b.len() == size));
        }
    }

    #[test]
    fn harmonic_mean_properties(u in 0.0..100.0f64, s in 0.0..100.0f64) {
        let h = harmonic_mean(u, s).unwrap();
        prop_assert!(h <= (u + s) / 2.0);
        prop_assert!(h >= 0.0 && h <= u.max(s));
        prop_assert_eq!(h, harmonic_mean(s, u).unwrap());
        prop_assert_eq!(harmonic_mean(u, u).unwrap(), u);
    }

    #[test]
    fn top_k_is_monotone_and_matches_sorting(
        seed in any::<u64>(),
        rows in 1usize..15,
        k_cands in 1usize..8,
    ) {
        let mut r = rng::stream(seed, "topk");
        use rand::Rng;
        let candidates: Vec<ClassId> = (0..k_cands as u32).rev().map(|c| 2 * c).collect();
        let scores: Vec<Vec<f64>> = (0..rows).map(|_| (0..k_cands).map(|_| r.random_range(0..3) as f64).collect()).collect();
        let labels: Vec<ClassId> = (0..rows).map(|_| candidates[r.random_range(0..k_cands)]).collect();
        let t = Tensor::from_rows(&scores);
        let mut last = 0.0;
        for k in 1..=k_cands {
            let acc = top_k_accuracy(&t, &candidates, &labels, k).unwrap();
            prop_assert_eq!(acc, oracles::top_k(&scores, &candidates, &labels, k));
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn aggregation_matches_two_pass(seed in any::<u64>(), runs in 2usize..10, gzsl in any::<bool>()) {
        let mut r = rng::stream(seed, "agg");
        let results: Vec<_> = (0..runs).map(|s| oracles::random_result(&mut r, s as u64, gzsl)).collect();
        let agg = aggregate_runs(&results).unwrap();
        let oracle = oracles::aggregate(&results);
        prop_assert_eq!(agg.metrics.len(), oracle.len());
        for (m, (name, mean, std)) in agg.metrics.iter().zip(&oracle) {
            prop_assert_eq!(&m.name, name);
            prop_assert!((m.mean - mean).abs() <= 1e-12);
            prop_assert!((m.std - std).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_steps_are_bounded_by_the_learning_rate(
        lr in 1e-5..1e-1f64,
        magnitude in 1e-3..1e3f64,
        signs in proptest::collection::vec(any::<bool>(), 1..40),
        beta1 in 0.0..0.95f64,
    ) {
        // Constant-magnitude gradients: |m_hat| <= sqrt(v_hat) holds exactly.
        let config = AdamConfig { lr, beta1, beta2: 0.999, eps: 1e-8 };
        let mut p = Flat(vec![Tensor::scalar(0.0)]);
        let mut state = AdamState::new(config, &p);
        for &positive in &signs {
            let before = p.0[0].item();
            let g = if positive { magnitude } else { -magnitude };
            state.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = (p.0[0].item() - before).abs();
            prop_assert!(delta <= lr * (1.0 + 1e-9), "step {delta} > lr {lr}");
        }
    }

    #[test]
    fn adam_steps_stay_near_the_learning_rate(
        lr in 1e-5..1e-1f64,
        grads in proptest::collection::vec(-100.0..100.0f64, 1..40),
    ) {
        // Arbitrary gradients: the bias-corrected ratio is at most
        // (1 - beta1) / sqrt(1 - beta2) in the worst case.
        let config = AdamConfig::standard().with_lr(lr);
        let bound = lr * (1.0 - config.beta1) / (1.0 - config.beta2).sqrt();
        let mut p = Flat(vec![Tensor::scalar(0.0)]);
        let mut state = AdamState::new(config, &p);
        for &g in &grads {
            let before = p.0[0].item();
            state.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            prop_assert!((p.0[0].item() - before).abs() <= bound * (1.0 + 1e-9));
        }
    }

    #[test]
    fn predict_matches_brute_force(
        seed in any::<u64>(),
        ids in proptest::collection::btree_set(0u32..100, 1..8),
        n in 1usize..6,
    ) {
        let head = HeadModel::new(3, 5, 4, seed);
        let mut r = rng::stream(seed, "anchors");
        let entries: Vec<(ClassId, Vec<f64>)> =
            ids.iter().map(|&c| (c, (0..4).map(|_| rng::normal(&mut r)).collect())).collect();
        let anchors = Anchors::new(entries.iter().rev().cloned()).unwrap();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng::normal(&mut r)).collect()).collect();
        let got = predict_batch(&head, &Tensor::from_rows(&feats), &anchors).unwrap();
        for (f, p) in feats.iter().zip(got) {
            prop_assert_eq!(p, oracles::predict(&head, f, &entries));
        }
    }

    #[test]
    fn replay_is_bit_identical_per_seed(seed in any::<u64>(), count in 1usize..20, sigma in 0.0..2.0f64) {
        let config = GanConfig { hidden: 8, noise_dim: 3, ..GanConfig::default() };
        let models = GanModels::new(Conditioning::Prototype, 4, 3, &config, seed);
        let rec = ClassRecord::new(7, vec![0.5, -1.0, 2.0, 0.0], vec![sigma; 4], vec![1.0, 0.0, 0.0], 0).unwrap();
        let a = synthesize(&models, &rec, count, seed).unwrap();
        let b = synthesize(&models, &rec, count, seed).unwrap();
        prop_assert_eq!(a.len(), count);
        prop_assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn oracles_agree_on_randomized_instances() {
    for (name, hits) in oracles::agreement(100, 7) {
        assert_eq!(hits, 100, "{name}");
    }
}
