use concept_probe_core::lrp::{backward, init_target, Composite, InitMode, InitTarget, LrpRule};
use concept_probe_core::nn::zoo::{standard_detector, toy_net};
use concept_probe_core::nn::{canonize, BoxRect, Detection, Layer, ModelGraph};
use concept_probe_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(model: &ModelGraph, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&model.input_shape().dims(), |_| rng.random_range(-1.0f32..1.0))
}

fn detection(class_id: usize, cell: (usize, usize)) -> Detection {
    Detection { cell, class_id, score: 1.0, bbox: BoxRect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 } }
}

fn input_relevance(model: &ModelGraph, x: &Tensor, composite: &Composite, target: &InitTarget) -> Tensor {
    let (_, trace) = model.forward(x).unwrap();
    backward(model, &trace, composite, target, None).unwrap().input_attribution.unwrap()
}

fn assert_close_rel(a: &Tensor, b: &Tensor, rel: f32) {
    let scale = b.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
    let diff = a.max_abs_diff(b);
    assert!(diff <= rel * scale, "max diff {diff} vs scale {scale}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn epsilon_conserves_relevance_without_biases(net_seed in 0u64..1000, x_seed in 0u64..1000) {
        let model = toy_net(3, 6, 2, net_seed).unwrap();
        let x = random_input(&model, x_seed);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let total = target.tensor.sum();
        prop_assume!(total > 0.0);
        let state = backward(&model, &trace, &Composite::epsilon(1e-6), &target, None).unwrap();
        let input = state.input_attribution.unwrap().sum();
        prop_assert!(((input - total) / total).abs() <= 1e-3, "in {input} vs init {total}");
    }

    #[test]
    fn alpha_beta_relevance_is_non_negative(net_seed in 0u64..1000, x_seed in 0u64..1000) {
        let model = toy_net(3, 5, 2, net_seed).unwrap();
        let x = random_input(&model, x_seed).map(f32::abs);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let composite = Composite::new().with_rule("*", LrpRule::AlphaBeta);
        let state = backward(&model, &trace, &composite, &target, None).unwrap();
        for (name, r) in &state.layers {
            prop_assert!(r.data().iter().all(|&v| v >= 0.0), "negative relevance at {name}");
        }
        prop_assert!(state.input_attribution.unwrap().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn relevance_is_linear_in_the_target(seed in 0u64..1000, c in 0.1f32..10.0) {
        let model = toy_net(2, 5, 3, seed).unwrap();
        let x = random_input(&model, seed + 1);
        let (logits, _) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let scaled = InitTarget { mode: target.mode.clone(), tensor: target.tensor.scale(c) };
        let composite = Composite::epsilon(1e-6);
        let base = input_relevance(&model, &x, &composite, &target);
        let big = input_relevance(&model, &x, &composite, &scaled);
        assert_close_rel(&big, &base.scale(c), 1e-5);
    }

    #[test]
    fn single_detections_add_up(seed in 0u64..1000, r1 in 0usize..5, c1 in 0usize..5, r2 in 0usize..5, c2 in 0usize..5) {
        let model = toy_net(2, 5, 3, seed).unwrap();
        let x = random_input(&model, seed + 7);
        let (logits, _) = model.forward(&x).unwrap();
        let a = init_target(&logits, &InitMode::SingleDetection(detection(1, (r1, c1)))).unwrap();
        let b = init_target(&logits, &InitMode::SingleDetection(detection(2, (r2, c2)))).unwrap();
        let both = InitTarget { mode: InitMode::FullOutput, tensor: a.tensor.zip_map(&b.tensor, |p, q| p + q).unwrap() };
        let composite = Composite::epsilon(1e-6);
        let sum = input_relevance(&model, &x, &composite, &a)
            .zip_map(&input_relevance(&model, &x, &composite, &b), |p, q| p + q)
            .unwrap();
        assert_close_rel(&input_relevance(&model, &x, &composite, &both), &sum, 1e-5);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let model = standard_detector(3, seed).unwrap();
        let x = random_input(&model, seed);
        let (a, ta) = model.forward(&x).unwrap();
        let (b, tb) = model.forward(&x).unwrap();
        prop_assert_eq!(a, b);
        for i in 0..ta.len() {
            prop_assert_eq!(ta.at(i).unwrap(), tb.at(i).unwrap());
        }
    }

    #[test]
    fn canonize_preserves_outputs(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = standard_detector(3, seed).unwrap().into_layers();
        let layers = layers
            .into_iter()
            .map(|mut spec| {
                if let Layer::BatchNorm { gamma, beta, mean, var, .. } = &mut spec.layer {
                    for t in [gamma, beta, mean] {
                        *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0f32..1.0));
                    }
                    *var = Tensor::from_fn(var.shape(), |_| rng.random_range(0.2f32..2.0));
                }
                spec
            })
            .collect();
        let model = ModelGraph::new(layers, standard_detector(3, 0).unwrap().input_shape()).unwrap();
        let merged = canonize(&model).unwrap();
        let x = random_input(&model, seed + 3);
        let (a, _) = model.forward(&x).unwrap();
        let (b, _) = merged.forward(&x).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

#[test]
fn all_negative_logits_give_a_zero_target() {
    let logits = Tensor::full(&[1, 2, 3, 3], -0.5);
    let target = init_target(&logits, &InitMode::FullOutput).unwrap();
    assert!(target.tensor.data().iter().all(|&v| v == 0.0));
}
