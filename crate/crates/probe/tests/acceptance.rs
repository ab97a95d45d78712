//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use concept_probe_core::attribution::{channel_masked_lrp, explain_concept, explain_concept_traced, ExplainOptions};
use concept_probe_core::concepts::{
    collect_activations, cosine, train_cav, train_net2vec, train_patcav, CavConfig, ConceptMeta, ConceptMethod,
    ConceptSample, ConceptVector, Net2VecConfig, Net2VecProblem,
};
use concept_probe_core::data::{Dataset, Sample};
use concept_probe_core::lrp::{backward, heatmap, init_target, Composite, InitMode};
use concept_probe_core::metrics::{auc, concept_share_curve, localization, perturb_and_score, Fill, PerturbationConfig, PixelOrder};
use concept_probe_core::nn::zoo::{
    calibrate_batch_norm, planted_detector, standard_detector, toy_net, ENTANGLED_LAYER, PLANTED_LAYER,
};
use concept_probe_core::nn::{
    balanced_class_weights, canonize, nms, train, Detection, GridGeometry, Layer, ModelGraph, NmsParams, TrainConfig,
};
use concept_probe_core::synth::{generate, Confound, SceneSpec};
use concept_probe_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_input(model: &ModelGraph, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&model.input_shape().dims(), |_| rng.random_range(-1.0f32..1.0))
}

fn nms_params() -> NmsParams {
    NmsParams {
        score_threshold: 0.5,
        iou_threshold: 0.5,
        background: Some(0),
        geometry: GridGeometry { image_h: 32, image_w: 32, grid_h: 4, grid_w: 4, margin: 4.0 },
    }
}

fn first_detection(model: &ModelGraph, x: &Tensor, class_id: usize) -> Option<Detection> {
    let (logits, _) = model.forward(x).unwrap();
    nms(&logits, &nms_params()).unwrap().into_iter().find(|d| d.class_id == class_id)
}

fn conservation() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..50u64 {
        let model = toy_net(3, 8, 3, i).unwrap();
        let x = random_input(&model, 1000 + i);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        let total = target.tensor.sum();
        let state = backward(&model, &trace, &Composite::epsilon(1e-6), &target, None).unwrap();
        let input = state.input_attribution.unwrap().sum();
        worst = worst.max(((input - total) / total).abs());
    }
    outcome(worst <= 1e-3, format!("max relative deficit {worst:.2e} over 50 inputs (limit 1e-3)"))
}

fn canonization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = standard_detector(3, 2).unwrap();
    let shape = base.input_shape();
    let layers = base
        .into_layers()
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
    let model = ModelGraph::new(layers, shape).unwrap();
    let merged = canonize(&model).unwrap();
    let worst = (0..100)
        .map(|i| {
            let x = random_input(&model, i);
            model.forward(&x).unwrap().0.max_abs_diff(&merged.forward(&x).unwrap().0)
        })
        .fold(0.0f32, f32::max);
    outcome(worst < 1e-5, format!("max output deviation {worst:.2e} over 100 inputs (limit 1e-5)"))
}

fn crp_special_case() -> Outcome {
    let model = canonize(&standard_detector(3, 4).unwrap()).unwrap();
    let layer = "feat.5";
    let mut worst = 0.0f32;
    for i in 0..20 {
        let x = random_input(&model, 500 + i).map(f32::abs);
        let (logits, trace) = model.forward(&x).unwrap();
        let target = init_target(&logits, &InitMode::FullOutput).unwrap();
        for channel in 0..4 {
            let mut v = vec![0.0; 16];
            v[channel] = 1.0;
            let concept = ConceptVector::new(layer, Tensor::vector(&v), ConceptMethod::Cav, 0.0, ConceptMeta::default()).unwrap();
            let ours = explain_concept_traced(&model, &trace, &concept, &target, &ExplainOptions::default()).unwrap();
            let masked = channel_masked_lrp(&model, &trace, layer, &[channel], &target, &Composite::default()).unwrap();
            worst = worst.max(ours.input_heatmap.max_abs_diff(&heatmap(&masked).unwrap()));
        }
    }
    outcome(worst <= 1e-6, format!("max heatmap difference {worst:.2e} over 20 inputs x 4 channels (limit 1e-6)"))
}

fn concept_samples(model: &ModelGraph, layer: &str, seed: u64, n: usize) -> Vec<ConceptSample> {
    collect_activations(model, layer, &generate(&SceneSpec::standard(seed), n).unwrap()).unwrap()
}

fn cav_precondition() -> Outcome {
    let model = planted_detector().unwrap();
    let samples = concept_samples(&model, PLANTED_LAYER, 11, 300);
    let cav = train_cav(&samples, PLANTED_LAYER, "disc", &CavConfig::default()).unwrap();
    let accuracy = cav.meta.held_out_score.unwrap();

    let mut labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let shuffled: Vec<ConceptSample> =
        samples.iter().zip(labels).map(|(s, label)| ConceptSample { label, ..s.clone() }).collect();
    let noise = train_cav(&shuffled, PLANTED_LAYER, "disc", &CavConfig::default()).unwrap();
    let noise_accuracy = noise.meta.held_out_score.unwrap();
    outcome(
        accuracy >= 0.85 && noise_accuracy <= 0.6 && noise.meta.precondition_warning && !cav.meta.precondition_warning,
        format!(
            "held-out accuracy {accuracy:.3} (need >= 0.85, target 0.95); shuffled {noise_accuracy:.3} (need <= 0.6), warning raised: {}",
            noise.meta.precondition_warning
        ),
    )
}

fn patcav_identity() -> Outcome {
    let mut worst = 1.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<ConceptSample> = (0..30)
            .map(|i| {
                let label = u8::from(rng.random_bool(0.4) || i == 0) * u8::from(i != 1);
                let activation = Tensor::from_fn(&[8, 3, 3], |_| rng.random_range(0.0f32..1.0) + label as f32 * 0.3);
                ConceptSample { activation, label, mask: None }
            })
            .collect();
        let pat = train_patcav(&samples, "l", "c", false).unwrap();
        let spat = train_patcav(&samples, "l", "c", true).unwrap();
        worst = worst.min(cosine(pat.vector.data(), spat.vector.data()));
    }
    let point = |v: [f32; 2], label| ConceptSample { activation: Tensor::vector(&v), label, mask: None };
    let fixture = train_patcav(&[point([3.0, 1.0], 1), point([1.0, 1.0], 0)], "l", "c", true).unwrap();
    let exact = fixture.vector.data() == [1.0, 0.0];
    outcome(
        worst > 0.999 && exact,
        format!("min cosine {worst:.6} over 10 datasets (need > 0.999); fixture vector {:?}", fixture.vector.data()),
    )
}

fn net2vec() -> Outcome {
    let model = planted_detector().unwrap();
    let samples = concept_samples(&model, PLANTED_LAYER, 11, 300);
    let config = Net2VecConfig::default();
    let problem = Net2VecProblem::prepare(&samples, config.tau_quantile, config.per_channel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let w: Vec<f64> = (0..problem.channels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let subset = [rng.random_range(0..problem.len())];
        let grad = problem.gradient(&w, Some(&subset));
        let k = rng.random_range(0..w.len());
        let h = 1e-5;
        let (mut up, mut down) = (w.clone(), w.clone());
        up[k] += h;
        down[k] -= h;
        let numeric = (problem.loss(&up, Some(&subset)) - problem.loss(&down, Some(&subset))) / (2.0 * h);
        worst = worst.max((numeric - grad[k]).abs() / numeric.abs().max(grad[k].abs()).max(1e-12));
    }
    let vector = train_net2vec(&samples, PLANTED_LAYER, "disc", &config).unwrap();
    let iou = vector.meta.held_out_score.unwrap();
    outcome(
        worst <= 1e-4 && iou >= 0.9,
        format!("gradient relative error {worst:.2e} over 5 probes (limit 1e-4); held-out IoU {iou:.3} (need >= 0.9)"),
    )
}

/// Planted detector, its concept vectors and the samples that carry the
/// concept and a class-1 detection.
struct Planted {
    model: ModelGraph,
    data: Dataset,
    picked: Vec<(usize, Detection)>,
}

fn planted_setup(wanted: usize) -> Planted {
    let model = planted_detector().unwrap();
    let data = generate(&SceneSpec::standard(13), 600).unwrap();
    let picked = data
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.concept_label == 1)
        .filter_map(|(i, s)| first_detection(&model, &s.image(), 1).map(|d| (i, d)))
        .take(wanted)
        .collect();
    Planted { model, data, picked }
}

fn planted_cav(model: &ModelGraph, layer: &str) -> ConceptVector {
    train_cav(&concept_samples(model, layer, 11, 300), layer, "disc", &CavConfig::default()).unwrap()
}

fn mean_mu_c(p: &Planted, concept: &ConceptVector) -> (f64, usize) {
    let scores: Vec<f32> = p
        .picked
        .iter()
        .filter_map(|&(i, det)| {
            let s: &Sample = &p.data.samples[i];
            let a = explain_concept(&p.model, &s.image(), concept, &InitMode::SingleDetection(det), &ExplainOptions::default()).unwrap();
            localization(&a.input_heatmap, &s.mask()).ok().map(|r| r.mu_c)
        })
        .collect();
    (scores.iter().map(|&v| v as f64).sum::<f64>() / scores.len().max(1) as f64, scores.len())
}

fn localization_ordering() -> Outcome {
    let p = planted_setup(100);
    let (planted, n1) = mean_mu_c(&p, &planted_cav(&p.model, PLANTED_LAYER));
    let (other, n2) = mean_mu_c(&p, &planted_cav(&p.model, ENTANGLED_LAYER));
    outcome(
        p.picked.len() == 100 && planted >= 0.8 && planted > other,
        format!(
            "mean mu_c {planted:.3} at {PLANTED_LAYER} ({n1} defined of {}) vs {other:.3} at {ENTANGLED_LAYER} ({n2} defined)",
            p.picked.len()
        ),
    )
}

fn faithfulness(p: &Planted, concept: &ConceptVector) -> (Outcome, Outcome) {
    let fill = Fill::Mean(p.data.channel_means().to_vec());
    let (mut ranked_auc, mut random_auc) = (0.0f64, 0.0f64);
    let (mut share_up, mut mu_down) = (0usize, 0usize);
    for &(i, det) in &p.picked {
        let s = &p.data.samples[i];
        let x = s.image();
        let a = explain_concept(&p.model, &x, concept, &InitMode::SingleDetection(det), &ExplainOptions::default()).unwrap();
        let run = |order| {
            let config = PerturbationConfig::new(fill.clone(), order);
            perturb_and_score(&p.model, &x, &a.input_heatmap, &s.mask(), concept, &det, &config).unwrap()
        };
        let ranked = run(PixelOrder::Ranked);
        ranked_auc += auc(&ranked.fractions, &ranked.class_scores).unwrap();
        for seed in 0..5u64 {
            let random = run(PixelOrder::Random(seed * 1000 + i as u64));
            random_auc += auc(&random.fractions, &random.class_scores).unwrap() / 5.0;
        }
        let share = concept_share_curve(&ranked);
        share_up += usize::from(share.last().unwrap() > share.first().unwrap());
        let mu = &ranked.localization_scores;
        if let (Some(Some(first)), Some(Some(last))) = (mu.first(), mu.last()) {
            mu_down += usize::from(last < first);
        }
    }
    let n = p.picked.len();
    let (ranked_auc, random_auc) = (ranked_auc / n as f64, random_auc / n as f64);
    let step1 = outcome(
        n == 50 && random_auc - ranked_auc >= 0.1 * random_auc,
        format!("class-score AUC ranked {ranked_auc:.4} vs random {random_auc:.4} over {n} samples x 5 seeds (gap needs >= 10% of random)"),
    );
    let step2 = outcome(
        share_up * 5 >= n * 4 && mu_down * 5 >= n * 4,
        format!("non-concept share rises on {share_up}/{n}, mu_c falls on {mu_down}/{n} (need >= 80% each)"),
    );
    (step1, step2)
}

fn trained_detector(probability: f32) -> ModelGraph {
    let mut spec = SceneSpec::standard(1);
    spec.confound = Some(Confound { class_id: 1, probability });
    let data = generate(&spec, 400).unwrap();
    let images = data.images();
    let labeled = data.labeled(&images);
    let model = calibrate_batch_norm(&standard_detector(3, 5).unwrap(), &images[..64]).unwrap();
    let config = TrainConfig { epochs: 10, lr: 0.05, class_weights: Some(balanced_class_weights(&labeled, 3)), ..Default::default() };
    canonize(&train(&model, &labeled, &config).unwrap().0).unwrap()
}

fn spurious_correlation() -> Outcome {
    let layer = "feat.8";
    let mut clean = SceneSpec::standard(777);
    for class in &mut clean.classes {
        class.count = (0, 0);
    }
    let concept_set = generate(&clean, 300).unwrap();
    let mut test_spec = SceneSpec::standard(999);
    test_spec.confound = Some(Confound { class_id: 1, probability: 0.9 });
    let test = generate(&test_spec, 200).unwrap();

    let usage = |model: &ModelGraph, concept: &ConceptVector| -> (f64, usize) {
        let ratios: Vec<f32> = test
            .samples
            .iter()
            .filter_map(|s| {
                let x = s.image();
                let det = first_detection(model, &x, 1)?;
                Some(explain_concept(model, &x, concept, &InitMode::SingleDetection(det), &ExplainOptions::default()).unwrap().usage_ratio)
            })
            .take(20)
            .collect();
        (ratios.iter().map(|&r| r as f64).sum::<f64>() / ratios.len().max(1) as f64, ratios.len())
    };
    let mut means = Vec::new();
    let mut cav_note = Vec::new();
    for probability in [0.9f32, 0.0] {
        let model = trained_detector(probability);
        let samples = collect_activations(&model, layer, &concept_set).unwrap();
        let pat = train_patcav(&samples, layer, "disc", false).unwrap();
        means.push(usage(&model, &pat));
        let cav = train_cav(&samples, layer, "disc", &CavConfig::default()).unwrap();
        cav_note.push(format!("{:.3}", usage(&model, &cav).0));
    }
    let ((confounded, n1), (clean_usage, n2)) = (means[0], means[1]);
    let ratio = confounded / clean_usage.max(1e-12);
    outcome(
        n1 == 20 && n2 == 20 && ratio >= 2.0,
        format!(
            "PatCAV usage at {layer}: {confounded:.3} (confound 0.9) vs {clean_usage:.3} (confound 0.0), factor {ratio:.2} (need >= 2); hinge CAV gives {} vs {}",
            cav_note[0], cav_note[1]
        ),
    )
}

fn cli(args: &[&str]) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_concept-probe")).args(args).output().expect("binary runs");
    if !status.status.success() {
        eprintln!("{} failed: {}", args[0], String::from_utf8_lossy(&status.stderr));
    }
    status.status.success()
}

fn smoke() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = |p: &str| tmp.path().join(p).to_string_lossy().into_owned();
    let (data, model, concept, explain, eval) = (d("data"), d("model"), d("concept"), d("explain"), d("eval"));
    let model_file = d("model/model.cpmd");
    let concept_file = d("concept/concept.cpcv");
    let ok = cli(&["generate", "--out", &data, "--n", "64", "--seed", "7", "--confound", "0.9"])
        && cli(&["train", "--dataset", &data, "--out", &model, "--epochs", "5"])
        && cli(&["concept", "--model", &model_file, "--dataset", &data, "--layer", "feat.8", "--method", "cav", "--out", &concept])
        && cli(&["explain", "--model", &model_file, "--dataset", &data, "--concept", &concept_file, "--init", "full", "--out", &explain])
        && cli(&["evaluate", "--model", &model_file, "--dataset", &data, "--concept", &concept_file, "--layers", "feat.5,feat.8", "--out", &eval]);
    let expected = [
        "data/dataset.cfg",
        "data/labels.csv",
        "data/images/00063.ppm",
        "data/masks/disc/00063.pgm",
        "model/model.cpmd",
        "model/train_log.csv",
        "concept/concept.cpcv",
        "explain/heatmap.ppm",
        "explain/attribution/heatmap.cptn",
        "explain/attribution/meta.txt",
        "explain/relevance/head",
        "eval/localization.csv",
        "eval/perturbation_ranked.csv",
        "eval/perturbation_random.csv",
        "eval/ranking.csv",
        "eval/layers.csv",
        "eval/summary.txt",
    ];
    let dirs = ["data", "model", "concept", "explain", "eval"].map(|dir| format!("{dir}/run.cfg"));
    let missing: Vec<&str> =
        expected.iter().copied().chain(dirs.iter().map(String::as_str)).filter(|p| !Path::new(&d(p)).exists()).collect();
    outcome(ok && missing.is_empty(), format!("all commands exit 0: {ok}; missing artifacts: {missing:?}"))
}

fn main() {
    let mut failures = 0;
    let mut report = |number: usize, name: &str, limit: Duration, outcome: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = outcome();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= limit;
        failures += usize::from(!pass);
        println!(
            "[{}] {number:>2}. {name}: {} ({:.1} s, limit {} s)",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    };
    let secs = Duration::from_secs;
    report(1, "LRP conservation", secs(10), &mut conservation);
    report(2, "canonization equivalence", secs(10), &mut canonization);
    report(3, "one-hot concept equals channel-masked LRP", secs(30), &mut crp_special_case);
    report(4, "CAV precondition", secs(60), &mut cav_precondition);
    report(5, "PatCAV / SPatCAV identity", secs(5), &mut patcav_identity);
    report(6, "Net2Vec gradient and IoU", secs(120), &mut net2vec);
    report(7, "localization at the planted layer", secs(300), &mut localization_ordering);
    let mut step2 = None;
    report(8, "ranked vs random perturbation", secs(600), &mut || {
        let p = planted_setup(50);
        let (one, two) = faithfulness(&p, &planted_cav(&p.model, PLANTED_LAYER));
        step2 = Some(two);
        one
    });
    report(9, "non-concept share and mu_c under perturbation", secs(600), &mut || step2.take().expect("computed with 8"));
    report(10, "spurious-correlation probe", secs(600), &mut spurious_correlation);
    report(11, "end-to-end CLI smoke run", secs(300), &mut smoke);
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 11 acceptance criteria passed");
}
