use concept_probe_core::attribution::{channel_masked_lrp, explain_concept_traced, ExplainOptions, ProjectionMode};
use concept_probe_core::concepts::{ConceptMeta, ConceptMethod, ConceptVector};
use concept_probe_core::lrp::{heatmap, init_target, Composite, InitMode, InitTarget};
use concept_probe_core::nn::zoo::toy_net;
use concept_probe_core::nn::ModelGraph;
use concept_probe_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER: &str = "relu1";

fn setup(seed: u64) -> (ModelGraph, Tensor) {
    let model = toy_net(3, 6, 2, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Tensor::from_fn(&model.input_shape().dims(), |_| rng.random_range(-1.0f32..1.0));
    (model, x)
}

fn concept(v: Vec<f32>) -> ConceptVector {
    ConceptVector::new(LAYER, Tensor::vector(&v), ConceptMethod::Cav, 0.0, ConceptMeta::default()).unwrap()
}

fn random_vector(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    v[0] += 2.0;
    v
}

fn options(projection: ProjectionMode) -> ExplainOptions {
    ExplainOptions { composite: Composite::epsilon(1e-6), projection }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn one_hot_concepts_equal_channel_masked_lrp(seed in 0u64..1000, channel in 0usize..6) {
        let (model, x) = setup(seed);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let mut v = vec![0.0; 6];
        v[channel] = 1.0;
        let ours = explain_concept_traced(&model, &trace, &concept(v), &target, &ExplainOptions::default()).unwrap();
        let masked = channel_masked_lrp(&model, &trace, LAYER, &[channel], &target, &Composite::default()).unwrap();
        prop_assert!(ours.input_heatmap.max_abs_diff(&heatmap(&masked).unwrap()) <= 1e-6);
    }

    #[test]
    fn channel_scale_ignores_vector_magnitude(seed in 0u64..1000, c in 0.01f32..100.0) {
        let (model, x) = setup(seed);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let v = random_vector(seed);
        let opts = options(ProjectionMode::ChannelScale);
        let a = explain_concept_traced(&model, &trace, &concept(v.clone()), &target, &opts).unwrap();
        let b = explain_concept_traced(&model, &trace, &concept(v.iter().map(|x| x * c).collect()), &target, &opts).unwrap();
        prop_assert!(a.projected_latent.max_abs_diff(&b.projected_latent) <= 1e-6 * a.projected_latent.l1_norm().max(1.0) as f32);
    }

    #[test]
    fn orthogonal_l2_ratio_is_a_contraction(seed in 0u64..1000) {
        let (model, x) = setup(seed);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let a = explain_concept_traced(&model, &trace, &concept(random_vector(seed + 1)), &target, &options(ProjectionMode::OrthogonalProjection)).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&a.usage_ratio_l2));
        prop_assert!((0.0..=1.0).contains(&a.usage_ratio));
    }

    #[test]
    fn projected_latents_add_over_targets(seed in 0u64..1000, orth in any::<bool>()) {
        let (model, x) = setup(seed);
        let (logits, trace) = model.forward(&x).unwrap();
        let full = init_target(&logits, &InitMode::FullOutput).unwrap();
        let plane = 36;
        let split = |keep: bool| InitTarget {
            mode: InitMode::FullOutput,
            tensor: Tensor::from_fn(full.tensor.shape(), |i| if ((i % plane) < plane / 2) == keep { full.tensor.data()[i] } else { 0.0 }),
        };
        let mode = if orth { ProjectionMode::OrthogonalProjection } else { ProjectionMode::ChannelScale };
        let c = concept(random_vector(seed + 2));
        let run = |t: &InitTarget| explain_concept_traced(&model, &trace, &c, t, &options(mode)).unwrap().projected_latent;
        let sum = run(&split(true)).zip_map(&run(&split(false)), |a, b| a + b).unwrap();
        let whole = run(&full);
        let scale = whole.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-12);
        prop_assert!(whole.max_abs_diff(&sum) <= 1e-5 * scale);
    }
}
