use proptest::prelude::*;
use vecmerge_core::toy_bench::*;
use vecmerge_core::tv_algebra::{extract_task_vector, tv_merge, MismatchPolicy};

/// Reference splitmix64 written against the published constants, kept
/// separate from the crate's generator.
struct RefSplitMix(u64);

impl RefSplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.0 as u128;
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & u64::MAX as u128;
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & u64::MAX as u128;
        (z ^ (z >> 31)) as u64
    }

    fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / 9007199254740992.0
    }

    fn gauss(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn spec(d: usize, h: usize, c: usize) -> ModelSpec {
    ModelSpec {
        input_dim: d,
        hidden_dim: h,
        class_count: c,
    }
}

#[test]
fn first_gaussian_seed_42() {
    let expected = RefSplitMix(42).gauss();
    assert_eq!(Prng::new(42).gaussian().to_bits(), expected.to_bits());
    // first L1 sample, first coordinate: class 0 mean 2.0 on axis 0
    let ds = gen_dataset(DataKind::L1, 3, &spec(4, 2, 3), 42).unwrap();
    assert_eq!(ds.x[0], 2.0 + 0.5 * expected);
    assert_eq!(ds.y, vec![0, 1, 2]);
}

#[test]
fn first_weight_seed_7() {
    let ck = init_model(&spec(16, 32, 3), 7).unwrap();
    let w = ck.get(LAYER0_WEIGHT).unwrap().to_f64_vec();
    assert_eq!(w[0], 0.1 * RefSplitMix(7).gauss());
    // layer1.weight continues the same stream after all of layer0.weight
    let mut r = RefSplitMix(7);
    for _ in 0..16 * 32 {
        r.gauss();
    }
    assert_eq!(
        ck.get(LAYER1_WEIGHT).unwrap().to_f64_vec()[0],
        0.1 * r.gauss()
    );
}

#[test]
fn mixed_samples_follow_draw_order() {
    let s = spec(2, 2, 2);
    let ds = gen_dataset(DataKind::Mixed, 2, &s, 5).unwrap();
    let mut r = RefSplitMix(5);
    let a = 0.3 + 0.4 * r.unit();
    let x1: Vec<f64> = [2.0, 0.0].iter().map(|m| m + 0.5 * r.gauss()).collect();
    let x2: Vec<f64> = [-2.0, 0.0].iter().map(|m| m + 0.5 * r.gauss()).collect();
    assert_eq!(ds.x[0], a * x1[0] + (1.0 - a) * x2[0]);
    assert_eq!(ds.x[1], a * x1[1] + (1.0 - a) * x2[1]);
}

/// Central differences, skipping coordinates whose step flips a ReLU.
fn grad_check(m: &Mlp, data: &Dataset, per_tensor: usize, pick: &mut Prng) -> f64 {
    let (_, grad) = m.loss_and_grad(data);
    let h = 1e-5;
    let mask = m.activation_mask(&data.x);
    let mut worst = 0.0f64;
    for t in 0..4 {
        let len = m.params()[t].1.len();
        for _ in 0..per_tensor {
            let i = (pick.next_u64() % len as u64) as usize;
            let mut plus = m.clone();
            plus.params_mut()[t].1[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[t].1[i] -= h;
            if plus.activation_mask(&data.x) != mask || minus.activation_mask(&data.x) != mask {
                continue;
            }
            let numeric = (plus.loss(data) - minus.loss(data)) / (2.0 * h);
            let analytic = grad.params()[t].1[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let s = spec(
            3 + seed as usize,
            4 + seed as usize,
            2 + (seed as usize % 3),
        );
        let m = Mlp::from_checkpoint(&init_model(&s, seed).unwrap()).unwrap();
        let data = gen_dataset(DataKind::Mixed, 12, &s, seed + 100).unwrap();
        let err = grad_check(&m, &data, 10, &mut Prng::new(seed));
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn loss_decreases_over_first_epochs() {
    let cfg = BenchConfig::default();
    for seed in [0u64, 1, 2, 3, 4] {
        let data = gen_dataset(DataKind::Mixed, cfg.n_target, &cfg.spec, seed).unwrap();
        let mut model = init_model(&cfg.spec, seed).unwrap();
        let step = TrainConfig {
            learning_rate: 0.05,
            epochs: 1,
            seed,
        };
        let mut last = Mlp::from_checkpoint(&model).unwrap().loss(&data);
        for epoch in 0..5 {
            model = train(&model, &data, &step).unwrap();
            let now = Mlp::from_checkpoint(&model).unwrap().loss(&data);
            assert!(now < last, "seed {seed} epoch {epoch}: {now} >= {last}");
            last = now;
        }
    }
}

#[test]
fn zero_lambda_merge_is_full_ft() {
    let cfg = BenchConfig::default();
    for seed in [0u64, 3] {
        assert_eq!(
            tv_merge_ft_at(&cfg, seed, 0.0).unwrap(),
            full_ft(&cfg, seed).unwrap()
        );
    }
}

#[test]
fn scaling_output_layer_keeps_predictions() {
    let s = spec(5, 6, 3);
    let model = init_model(&s, 11).unwrap();
    let mut base = model.clone();
    for name in [LAYER1_WEIGHT, LAYER1_BIAS] {
        let t = base.get(name).unwrap();
        let zeros = vecmerge_core::Tensor::zeros(t.dtype(), t.shape().to_vec());
        base.insert(name, zeros).unwrap();
    }
    let (tau, _) = extract_task_vector(&base, &model, MismatchPolicy::Error).unwrap();
    let x = gen_dataset(DataKind::Mixed, 30, &s, 2).unwrap().x;
    let before = Mlp::from_checkpoint(&model).unwrap().predict(&x);
    for factor in [0.25, 3.0, 40.0] {
        let scaled = tv_merge(&base, &[(&tau, factor)]).unwrap();
        assert_eq!(Mlp::from_checkpoint(&scaled).unwrap().predict(&x), before);
    }
}

#[test]
fn bench_is_reproducible() {
    let cfg = BenchConfig {
        n_aux: 200,
        ..BenchConfig::default()
    };
    let names = ScenarioName::ALL;
    let a = run_bench(&names, &[9, 10], &cfg).unwrap();
    let b = run_bench(&names, &[9, 10], &cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.scenarios.len(), 5);
    let single = run_scenario(ScenarioName::SeqFt, &[9, 10], &cfg).unwrap();
    assert_eq!(single.seeds, a.scenarios[1].seeds);
}

#[test]
fn scenario_names_parse() {
    assert_eq!(ScenarioName::parse_list("all").unwrap().len(), 5);
    assert_eq!(
        ScenarioName::parse_list("full_ft,ties_merge_ft").unwrap(),
        vec![ScenarioName::FullFt, ScenarioName::TiesMergeFt]
    );
    assert!(ScenarioName::parse_list("fullft").is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-500.0f64..500.0, 1..12)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_label_permutation(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let pp: Vec<usize> = preds.iter().map(|&l| perm[l]).collect();
        let tp: Vec<usize> = truth.iter().map(|&l| perm[l]).collect();
        let a = macro_f1(&preds, &truth, 4).unwrap();
        let b = macro_f1(&pp, &tp, 4).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn gradient_check_random_models(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, c in 2usize..4) {
        let s = spec(d, h, c);
        let m = Mlp::from_checkpoint(&init_model(&s, seed).unwrap()).unwrap();
        let data = gen_dataset(DataKind::L2, 2 * c + 1, &s, seed ^ 1).unwrap();
        prop_assert!(grad_check(&m, &data, 10, &mut Prng::new(seed)) < 1e-4);
    }
}
