use concept_probe_core::concepts::{
    cosine, train_cav, train_net2vec, train_patcav, CavConfig, ConceptSample, Net2VecConfig, Net2VecProblem,
};
use concept_probe_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two Gaussian-ish blobs in `channels` dimensions, spatial 2x2.
fn blobs(seed: u64, n: usize, channels: usize, shift: f32) -> Vec<ConceptSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f32> = (0..channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let activation = Tensor::from_fn(&[channels, 2, 2], |k| {
                rng.random_range(-1.0f32..1.0) + label as f32 * shift * direction[k / 4]
            });
            ConceptSample { activation, label, mask: None }
        })
        .collect()
}

fn class_mean_difference(samples: &[ConceptSample]) -> Vec<f32> {
    let channels = samples[0].activation.shape()[0];
    let mut sums = [vec![0.0f64; channels], vec![0.0f64; channels]];
    let mut counts = [0usize; 2];
    for s in samples {
        counts[s.label as usize] += 1;
        for (acc, v) in sums[s.label as usize].iter_mut().zip(s.averaged()) {
            *acc += v as f64;
        }
    }
    (0..channels).map(|c| (sums[1][c] / counts[1] as f64 - sums[0][c] / counts[0] as f64) as f32).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn spatcav_is_the_class_mean_difference(seed in 0u64..10_000, channels in 2usize..8) {
        let samples = blobs(seed, 40, channels, 1.0);
        let spat = train_patcav(&samples, "l", "c", true).unwrap();
        prop_assert!(cosine(spat.vector.data(), &class_mean_difference(&samples)) > 0.999);
    }

    #[test]
    fn patcav_matches_spatcav(seed in 0u64..10_000, channels in 2usize..8, n in 6usize..60) {
        let samples = blobs(seed, n, channels, 0.5);
        let pat = train_patcav(&samples, "l", "c", false).unwrap();
        let spat = train_patcav(&samples, "l", "c", true).unwrap();
        prop_assert!(cosine(pat.vector.data(), spat.vector.data()) > 0.999);
    }

    #[test]
    fn cav_decisions_ignore_positive_rescaling(seed in 0u64..10_000, c in 0.01f32..100.0) {
        let samples = blobs(seed, 40, 4, 2.0);
        let cav = train_cav(&samples, "l", "c", &CavConfig { epochs: 100, seed, ..Default::default() }).unwrap();
        for s in &samples {
            let a = s.averaged();
            let d = cav.decision(&a);
            let scaled: f64 = cav.vector.data().iter().zip(&a).map(|(&w, &x)| (c * w) as f64 * x as f64).sum::<f64>()
                + (c * cav.bias) as f64;
            prop_assert_eq!(d > 0.0, scaled > 0.0);
        }
    }

    #[test]
    fn net2vec_gradient_matches_central_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<ConceptSample> = (0..6)
            .map(|i| {
                let activation = Tensor::from_fn(&[3, 4, 4], |_| rng.random_range(0.0f32..2.0));
                let mut mask = Tensor::zeros(&[8, 8]);
                mask.data_mut()[..8 * (1 + i % 4)].fill(1.0);
                ConceptSample { activation, label: 1, mask: Some(mask) }
            })
            .collect();
        let problem = Net2VecProblem::prepare(&samples, 0.3, false).unwrap();
        let w: Vec<f64> = (0..problem.channels()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let subset = [rng.random_range(0..problem.len())];
        let grad = problem.gradient(&w, Some(&subset));
        let h = 1e-5;
        for k in 0..w.len() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[k] += h;
            down[k] -= h;
            let numeric = (problem.loss(&up, Some(&subset)) - problem.loss(&down, Some(&subset))) / (2.0 * h);
            let rel = (numeric - grad[k]).abs() / numeric.abs().max(grad[k].abs()).max(1e-8);
            prop_assert!(rel < 1e-4 || (numeric - grad[k]).abs() < 1e-9, "k {k}: {numeric} vs {}", grad[k]);
        }
    }
}

#[test]
fn trainers_are_deterministic() {
    let samples = blobs(9, 30, 3, 1.5);
    let config = CavConfig { epochs: 50, seed: 4, ..Default::default() };
    assert_eq!(train_cav(&samples, "l", "c", &config).unwrap(), train_cav(&samples, "l", "c", &config).unwrap());
    assert_eq!(train_patcav(&samples, "l", "c", false).unwrap(), train_patcav(&samples, "l", "c", false).unwrap());

    let masked: Vec<ConceptSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut mask = Tensor::zeros(&[4, 4]);
            let rows = 1 + i % 3;
            mask.data_mut()[..4 * rows].fill(1.0);
            ConceptSample { mask: Some(mask), ..s.clone() }
        })
        .collect();
    let config = Net2VecConfig { epochs: 30, seed: 2, tau_quantile: 0.2, ..Default::default() };
    assert_eq!(
        train_net2vec(&masked, "l", "c", &config).unwrap(),
        train_net2vec(&masked, "l", "c", &config).unwrap()
    );
}
