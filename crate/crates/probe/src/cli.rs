//! Subcommands. Every flag is also a key of the `--config` file (dashes
//! become underscores); flags override the file, the file overrides the
//! built-in defaults listed in each `DEFAULTS` table. The fully resolved
//! configuration is written as `run.cfg` next to the artifacts.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use concept_probe_core::attribution::{
    explain_concept_traced, rank_by_usage, ExplainOptions, InitPolicy, ProjectionMode,
};
use concept_probe_core::concepts::{
    collect_activations, train_cav, train_net2vec, train_patcav, CavConfig, ConceptMethod, ConceptVector, Net2VecConfig,
};
use concept_probe_core::data::Dataset;
use concept_probe_core::lrp::{backward, init_target, Composite, InitMode, InitTarget};
use concept_probe_core::metrics::{
    auc, localization, perturb_and_score, Fill, PerturbationConfig, PerturbationCurve, PixelOrder,
};
use concept_probe_core::nn::zoo::{calibrate_batch_norm, planted_detector, standard_detector};
use concept_probe_core::nn::{
    balanced_class_weights, canonize, cell_accuracy, nms, train, Detection, GridGeometry, ModelGraph, NmsParams,
    TrainConfig,
};
use concept_probe_core::synth::{confound_report, render_scene, Confound, SceneSpec};
use concept_probe_core::{Error as CoreError, Tensor};
use rayon::prelude::*;

use crate::config::{load_composite, KeyValues};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::export::{ensure_dir, export_attribution, export_relevance, mean_curve, write_curve_csv, CurveRow};
use crate::format::{load_concept, load_model, save_concept, save_model};
use crate::render::render_heatmap;

#[derive(Debug, Parser)]
#[command(name = "concept-probe", version, about = "Concept-conditioned relevance propagation for grid detectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train (or emit the hand-set) detector and save it canonized.
    Train(TrainArgs),
    /// Fit a concept vector at one layer.
    Concept(ConceptArgs),
    /// Explain one sample through a concept vector.
    Explain(ExplainArgs),
    /// Localization, perturbation and per-layer tables over a dataset.
    Evaluate(EvaluateArgs),
}

macro_rules! run_args {
    ($name:ident { $($(#[doc = $doc:literal])* $field:ident $([$($choice:literal),+])? = $default:literal,)* }) => {
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct $name {
            /// key=value file supplying any of the options below.
            #[arg(long)]
            pub config: Option<PathBuf>,
            $(
                $(#[doc = $doc])*
                #[arg(long $(, value_parser = [$($choice),+])?)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub const DEFAULTS: &'static [(&'static str, &'static str)] = &[$((stringify!($field), $default)),*];

            pub fn resolve(&self) -> Result<KeyValues> {
                let given = [$((stringify!($field), self.$field.as_deref())),*];
                resolve(Self::DEFAULTS, self.config.as_deref(), &given)
            }
        }
    };
}

fn resolve(defaults: &[(&str, &str)], file: Option<&Path>, given: &[(&str, Option<&str>)]) -> Result<KeyValues> {
    let mut kv = KeyValues::from_pairs(defaults.iter().copied());
    if let Some(path) = file {
        for (key, value) in KeyValues::read(path)?.iter() {
            if !defaults.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("{}: unknown key `{key}`", path.display())));
            }
            kv.set(key, value);
        }
    }
    for (key, value) in given {
        if let Some(v) = value {
            kv.set(*key, *v);
        }
    }
    Ok(kv)
}

run_args!(GenerateArgs {
    /// Output dataset directory.
    out = "",
    /// Number of scenes.
    n = "64",
    seed = "0",
    /// Probability that an object of the confounded class carries the concept.
    confound = "0",
    /// Class id (1-based) that the concept is attached to.
    confound_class = "1",
});

run_args!(TrainArgs {
    dataset = "",
    /// Output directory; the model is written as model.cpmd.
    out = "",
    /// `standard` is trained on the dataset; `planted` has fixed weights.
    arch ["standard", "planted"] = "standard",
    epochs = "10",
    lr = "0.05",
    momentum = "0.9",
    batch_size = "16",
    seed = "0",
    /// Inverse-frequency class weights in the loss.
    balanced = "true",
    /// Number of images used to set batch-norm statistics before training.
    calibrate = "64",
});

run_args!(ConceptArgs {
    model = "",
    dataset = "",
    layer = "",
    method ["cav", "patcav", "spatcav", "net2vec"] = "cav",
    /// Concept name stored in the vector file; defaults to the dataset's concept.
    concept = "",
    seed = "0",
    /// Output directory; the vector is written as concept.cpcv.
    out = "",
    /// L2 weight of the CAV objective.
    reg = "0.01",
    epochs = "500",
    /// Step size; empty selects 0.1 for CAV and 1.0 for Net2Vec.
    lr = "",
    holdout = "0.25",
    /// Held-out CAV accuracy below which a warning is raised.
    precondition = "0.85",
    /// Net2Vec activation quantile kept as foreground.
    tau = "0.005",
    /// Net2Vec thresholds per channel instead of over the whole sample.
    per_channel = "false",
});

run_args!(ExplainArgs {
    model = "",
    dataset = "",
    /// Concept vector file.
    concept = "",
    /// Sample id in the dataset.
    sample = "0",
    init ["full", "classmask", "single"] = "single",
    /// Comma-separated class ids for `--init classmask`.
    classes = "1",
    /// Index into the detections after NMS for `--init single`.
    detection = "0",
    project ["channel", "orth"] = "channel",
    /// Optional LRP composite file with `rule.<glob>=...` lines.
    composite = "",
    score_threshold = "0.5",
    iou_threshold = "0.5",
    /// Padding in pixels around a cell's box.
    margin = "4",
    /// Class id treated as background by NMS; empty keeps every class.
    background = "0",
    seed = "0",
    out = "",
});

run_args!(EvaluateArgs {
    model = "",
    dataset = "",
    concept = "",
    init ["full", "classmask", "single"] = "single",
    /// Class whose detections are explained and perturbed.
    class = "1",
    project ["channel", "orth"] = "channel",
    composite = "",
    fill ["mean", "zero"] = "mean",
    /// Removal fractions, comma-separated, starting at 0.
    fractions = "0,0.02,0.05,0.1,0.2,0.3,0.5,1",
    seed = "0",
    /// Number of random removal orders per sample.
    random_seeds = "5",
    /// Upper bound on perturbed samples.
    samples = "50",
    /// Comma-separated layers for the per-layer table; empty uses the concept's layer.
    layers = "",
    /// Method used to fit vectors at the extra layers; empty reuses the concept's.
    method = "",
    score_threshold = "0.5",
    iou_threshold = "0.5",
    margin = "4",
    background = "0",
    out = "",
});

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Concept(a) => cmd_concept(&a.resolve()?),
        Command::Explain(a) => cmd_explain(&a.resolve()?),
        Command::Evaluate(a) => cmd_evaluate(&a.resolve()?),
    }
}

fn out_dir(kv: &KeyValues) -> Result<PathBuf> {
    let out = PathBuf::from(kv.require("out")?);
    ensure_dir(&out)?;
    Ok(out)
}

fn flag(kv: &KeyValues, key: &str) -> Result<bool> {
    match kv.require(key)? {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("`{key}={other}` is not a boolean"))),
    }
}

fn list<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Vec<T>> {
    let raw = kv.get(key).unwrap_or("");
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse {s:?}"))))
        .collect()
}

fn path(kv: &KeyValues, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(kv.require(key)?))
}

fn save_run_config(dir: &Path, kv: &KeyValues) -> Result<()> {
    kv.write(&dir.join("run.cfg"))
}

pub fn cmd_generate(kv: &KeyValues) -> Result<()> {
    let n: usize = kv.parse("n")?;
    let mut spec = SceneSpec::standard(kv.parse("seed")?);
    spec.confound = Some(Confound { class_id: kv.parse("confound_class")?, probability: kv.parse("confound")? });
    spec.validate()?;
    if n == 0 {
        return Err(CoreError::Generation("at least one scene is required".into()).into());
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| render_scene(&spec, i).map(|s| s.sample))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let dataset = Dataset {
        concept: spec.concept_name.clone(),
        width: spec.width,
        height: spec.height,
        grid: spec.grid,
        classes: spec.classes.len() + 1,
        samples,
    };
    let out = out_dir(kv)?;
    write_dataset(&out, &dataset)?;
    save_run_config(&out, kv)?;
    let present = dataset.samples.iter().filter(|s| s.concept_label == 1).count();
    println!("wrote {n} scenes to {} ({present} with concept `{}`)", out.display(), dataset.concept);
    if let Ok(rate) = confound_report(&dataset, kv.parse("confound_class")?) {
        println!("P(concept | class {}) = {rate:.3}", kv.require("confound_class")?);
    }
    Ok(())
}

pub fn cmd_train(kv: &KeyValues) -> Result<()> {
    let dataset = read_dataset(&path(kv, "dataset")?)?;
    let images = dataset.images();
    let labeled = dataset.labeled(&images);
    let mut log = String::from("epoch,loss\n");
    let model = match kv.require("arch")? {
        "planted" => planted_detector()?,
        _ => {
            let base = standard_detector(dataset.classes, kv.parse("seed")?)?;
            let calibrate = kv.parse::<usize>("calibrate")?.clamp(1, images.len().max(1));
            let base = calibrate_batch_norm(&base, &images[..calibrate.min(images.len())])?;
            let config = TrainConfig {
                epochs: kv.parse("epochs")?,
                lr: kv.parse("lr")?,
                momentum: kv.parse("momentum")?,
                batch_size: kv.parse("batch_size")?,
                seed: kv.parse("seed")?,
                class_weights: flag(kv, "balanced")?.then(|| balanced_class_weights(&labeled, dataset.classes)),
            };
            let (trained, report) = train(&base, &labeled, &config)?;
            log.push_str(&format!("0,{}\n", report.initial_loss));
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                log.push_str(&format!("{},{loss}\n", i + 1));
            }
            canonize(&trained)?
        }
    };
    let accuracy = cell_accuracy(&model, &labeled)?;
    let out = out_dir(kv)?;
    save_model(&out.join("model.cpmd"), &model)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log).map_err(Error::io(&log_path))?;
    save_run_config(&out, kv)?;
    println!("cell accuracy on the training set: {accuracy:.4}");
    println!("model written to {}", out.join("model.cpmd").display());
    Ok(())
}

/// Fit a concept vector with the settings in `kv`; `lr` must be resolved.
fn fit_concept(model: &ModelGraph, dataset: &Dataset, layer: &str, method: ConceptMethod, kv: &KeyValues) -> Result<ConceptVector> {
    let name = match kv.get("concept").filter(|c| !c.is_empty()) {
        Some(c) => c.to_string(),
        None => dataset.concept.clone(),
    };
    let samples = collect_activations(model, layer, dataset)?;
    let seed: u64 = kv.parse("seed")?;
    Ok(match method {
        ConceptMethod::Cav => {
            let config = CavConfig {
                reg: kv.parse("reg")?,
                epochs: kv.parse("epochs")?,
                lr: kv.parse("lr")?,
                seed,
                holdout_fraction: kv.parse("holdout")?,
                precondition: kv.parse("precondition")?,
            };
            train_cav(&samples, layer, &name, &config)?
        }
        ConceptMethod::PatCav => train_patcav(&samples, layer, &name, false)?,
        ConceptMethod::SPatCav => train_patcav(&samples, layer, &name, true)?,
        ConceptMethod::Net2Vec => {
            let config = Net2VecConfig {
                tau_quantile: kv.parse("tau")?,
                per_channel: flag(kv, "per_channel")?,
                lr: kv.parse("lr")?,
                epochs: kv.parse("epochs")?,
                seed,
                holdout_fraction: kv.parse("holdout")?,
            };
            train_net2vec(&samples, layer, &name, &config)?
        }
    })
}

fn method_of(kv: &KeyValues, key: &str) -> Result<ConceptMethod> {
    let raw = kv.require(key)?;
    ConceptMethod::parse(raw).ok_or_else(|| Error::Config(format!("unknown concept method {raw:?}")))
}

fn default_lr(method: ConceptMethod) -> &'static str {
    match method {
        ConceptMethod::Net2Vec => "1.0",
        _ => "0.1",
    }
}

pub fn cmd_concept(kv: &KeyValues) -> Result<()> {
    let mut kv = kv.clone();
    let method = method_of(&kv, "method")?;
    if kv.get("lr").unwrap_or("").is_empty() {
        kv.set("lr", default_lr(method));
    }
    let model = load_model(&path(&kv, "model")?)?;
    let dataset = read_dataset(&path(&kv, "dataset")?)?;
    if kv.get("concept").unwrap_or("").is_empty() {
        kv.set("concept", dataset.concept.clone());
    }
    let concept = fit_concept(&model, &dataset, kv.require("layer")?, method, &kv)?;
    let out = out_dir(&kv)?;
    save_concept(&out.join("concept.cpcv"), &concept)?;
    save_run_config(&out, &kv)?;
    let score_name = if method == ConceptMethod::Net2Vec { "mask IoU" } else { "accuracy" };
    match concept.meta.held_out_score {
        Some(score) => println!("held-out {score_name}: {score:.4}"),
        None => println!("held-out score: n/a ({} has no held-out split)", method.as_str()),
    }
    if concept.meta.precondition_warning {
        println!("warning: held-out accuracy below the precondition; the concept may not be linearly encoded here");
    }
    println!("concept vector written to {}", out.join("concept.cpcv").display());
    Ok(())
}

fn nms_params(kv: &KeyValues, model: &ModelGraph) -> Result<NmsParams> {
    let (_, grid_h, grid_w) = model.head_dims()?;
    let input = model.input_shape();
    let background = match kv.get("background").unwrap_or("") {
        "" => None,
        _ => Some(kv.parse("background")?),
    };
    Ok(NmsParams {
        score_threshold: kv.parse("score_threshold")?,
        iou_threshold: kv.parse("iou_threshold")?,
        background,
        geometry: GridGeometry { image_h: input.height, image_w: input.width, grid_h, grid_w, margin: kv.parse("margin")? },
    })
}

fn explain_options(kv: &KeyValues, model: &ModelGraph) -> Result<ExplainOptions> {
    let composite = match kv.get("composite").unwrap_or("") {
        "" => Composite::default(),
        file => load_composite(Path::new(file))?,
    };
    composite.validate(model)?;
    let raw = kv.require("project")?;
    let projection = ProjectionMode::parse(raw).ok_or_else(|| Error::Config(format!("unknown projection {raw:?}")))?;
    Ok(ExplainOptions { composite, projection })
}

fn sample_index(dataset: &Dataset, id: usize) -> Result<usize> {
    dataset
        .samples
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| CoreError::Index(format!("no sample with id {id} among {}", dataset.len())).into())
}

pub fn cmd_explain(kv: &KeyValues) -> Result<()> {
    let model = load_model(&path(kv, "model")?)?;
    let dataset = read_dataset(&path(kv, "dataset")?)?;
    let concept = load_concept(&path(kv, "concept")?)?;
    let options = explain_options(kv, &model)?;
    let sample = &dataset.samples[sample_index(&dataset, kv.parse("sample")?)?];
    let x = sample.image();
    let (logits, trace) = model.forward(&x)?;

    let mut detection_note = String::new();
    let mode = match kv.require("init")? {
        "full" => InitMode::FullOutput,
        "classmask" => InitMode::ClassMask(list(kv, "classes")?),
        _ => {
            let detections = nms(&logits, &nms_params(kv, &model)?)?;
            let index: usize = kv.parse("detection")?;
            let det = *detections.get(index).ok_or_else(|| {
                CoreError::Index(format!("detection {index} requested, sample {} has {}", sample.id, detections.len()))
            })?;
            detection_note = format!("class {} at cell {:?} score {:.4}", det.class_id, det.cell, det.score);
            InitMode::SingleDetection(det)
        }
    };
    let target = init_target(&logits, &mode)?;
    let attribution = explain_concept_traced(&model, &trace, &concept, &target, &options)?;
    let plain = backward(&model, &trace, &options.composite, &target, None)?;

    let out = out_dir(kv)?;
    render_heatmap(&attribution.input_heatmap, &out.join("heatmap.ppm"))?;
    let rgb = image::RgbImage::from_raw(sample.width as u32, sample.height as u32, sample.rgb.clone()).expect("validated sample");
    crate::pnm::write_ppm(&out.join("input.ppm"), &rgb)?;
    export_attribution(&out.join("attribution"), &attribution)?;
    export_relevance(&out.join("relevance"), &plain)?;
    save_run_config(&out, kv)?;
    if !detection_note.is_empty() {
        println!("explaining detection: {detection_note}");
    }
    println!("usage ratio of `{}` at {}: {:.4}", attribution.concept, attribution.layer, attribution.usage_ratio);
    match localization(&attribution.input_heatmap, &sample.mask()) {
        Ok(r) => println!("mu_c: {:.4}", r.mu_c),
        Err(CoreError::UndefinedMetric(_)) => println!("mu_c: undefined (no positive relevance)"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

/// Per-sample outcome of the localization pass.
struct Located {
    id: usize,
    detection: Option<Detection>,
    usage: f32,
    mu_c: Option<f32>,
    heatmap: Tensor,
}

fn first_of_class(logits: &Tensor, params: &NmsParams, class: usize) -> Result<Option<Detection>> {
    Ok(nms(logits, params)?.into_iter().find(|d| d.class_id == class))
}

fn locate(
    model: &ModelGraph,
    dataset: &Dataset,
    concept: &ConceptVector,
    kv: &KeyValues,
    options: &ExplainOptions,
) -> Result<Vec<Located>> {
    let params = nms_params(kv, model)?;
    let class: usize = kv.parse("class")?;
    let init = kv.require("init")?.to_string();
    let positives: Vec<_> = dataset.samples.iter().filter(|s| s.concept_label == 1).collect();
    let results = positives
        .par_iter()
        .map(|s| -> Result<Option<Located>> {
            let (logits, trace) = model.forward(&s.image())?;
            let detection = first_of_class(&logits, &params, class)?;
            let target: InitTarget = match init.as_str() {
                "full" => init_target(&logits, &InitMode::FullOutput)?,
                "classmask" => init_target(&logits, &InitMode::ClassMask(vec![class]))?,
                _ => match detection {
                    Some(det) => init_target(&logits, &InitMode::SingleDetection(det))?,
                    None => return Ok(None),
                },
            };
            let a = explain_concept_traced(model, &trace, concept, &target, options)?;
            let mu_c = match localization(&a.input_heatmap, &s.mask()) {
                Ok(r) => Some(r.mu_c),
                Err(CoreError::UndefinedMetric(_)) => None,
                Err(e) => return Err(e.into()),
            };
            Ok(Some(Located { id: s.id, detection, usage: a.usage_ratio, mu_c, heatmap: a.input_heatmap }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().flatten().collect())
}

fn mean(values: impl Iterator<Item = f32>) -> Option<f32> {
    let (sum, n) = values.fold((0.0f64, 0usize), |(s, n), v| (s + v as f64, n + 1));
    (n > 0).then(|| (sum / n as f64) as f32)
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(Error::io(path))
}

/// Random removal orders differ per sample and per repeat.
fn random_seed(seed: u64, id: usize, repeat: usize) -> u64 {
    seed ^ ((id as u64) << 20) ^ ((repeat as u64) << 48)
}

pub fn cmd_evaluate(kv: &KeyValues) -> Result<()> {
    let model = load_model(&path(kv, "model")?)?;
    let dataset = read_dataset(&path(kv, "dataset")?)?;
    let concept = load_concept(&path(kv, "concept")?)?;
    let options = explain_options(kv, &model)?;
    let out = out_dir(kv)?;

    // localization on every concept-positive sample with a target
    let located = locate(&model, &dataset, &concept, kv, &options)?;
    let mut text = String::from("id,usage_ratio,mu_c\n");
    for l in &located {
        text.push_str(&format!("{},{},{}\n", l.id, l.usage, fmt_opt(l.mu_c)));
    }
    write_text(&out.join("localization.csv"), text)?;

    // perturbation of the tracked class's detections
    let fill = match kv.require("fill")? {
        "zero" => Fill::Zero,
        _ => Fill::Mean(dataset.channel_means().to_vec()),
    };
    let fractions: Vec<f32> = list(kv, "fractions")?;
    let repeats: usize = kv.parse("random_seeds")?;
    let seed: u64 = kv.parse("seed")?;
    let chosen: Vec<&Located> = located.iter().filter(|l| l.detection.is_some()).take(kv.parse("samples")?).collect();
    let curves = chosen
        .par_iter()
        .map(|l| -> Result<Vec<PerturbationCurve>> {
            let s = &dataset.samples[sample_index(&dataset, l.id)?];
            let x = s.image();
            let det = l.detection.expect("filtered above");
            let heatmap = if kv.require("init")? == "single" {
                l.heatmap.clone()
            } else {
                let (logits, trace) = model.forward(&x)?;
                let target = init_target(&logits, &InitMode::SingleDetection(det))?;
                explain_concept_traced(&model, &trace, &concept, &target, &options)?.input_heatmap
            };
            let orders = std::iter::once(PixelOrder::Ranked).chain((0..repeats).map(|r| PixelOrder::Random(random_seed(seed, l.id, r))));
            orders
                .map(|order| {
                    let config = PerturbationConfig { fractions: fractions.clone(), fill: fill.clone(), order, explain: options.clone() };
                    Ok(perturb_and_score(&model, &x, &heatmap, &s.mask(), &concept, &det, &config)?)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_sample = String::from("id,order,repeat,fraction,class_score,usage_ratio,mu_c\n");
    let (mut ranked, mut random) = (Vec::new(), Vec::new());
    for (l, sample_curves) in chosen.iter().zip(&curves) {
        for (repeat, c) in sample_curves.iter().enumerate() {
            for i in 0..c.fractions.len() {
                per_sample.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    l.id,
                    c.order.label(),
                    repeat.saturating_sub(1),
                    c.fractions[i],
                    c.class_scores[i],
                    c.usage_ratios[i],
                    fmt_opt(c.localization_scores[i])
                ));
            }
            if repeat == 0 { ranked.push(c.clone()) } else { random.push(c.clone()) }
        }
    }
    write_text(&out.join("perturbation_samples.csv"), per_sample)?;
    let settings = |order: &str| {
        KeyValues::from_pairs([
            ("order", order.to_string()),
            ("fill", kv.require("fill").unwrap_or_default().to_string()),
            ("fractions", kv.get("fractions").unwrap_or_default().replace(',', ";")),
            ("samples", chosen.len().to_string()),
            ("random_seeds", repeats.to_string()),
        ])
    };
    let ranked_rows = mean_curve(&ranked);
    let random_rows = mean_curve(&random);
    write_curve_csv(&out.join("perturbation_ranked.csv"), &ranked_rows, &settings("ranked"))?;
    write_curve_csv(&out.join("perturbation_random.csv"), &random_rows, &settings("random"))?;

    // per-sample ranking of the whole dataset
    let policy = match kv.require("init")? {
        "full" => InitPolicy::Full,
        "classmask" => InitPolicy::ClassMask(vec![kv.parse("class")?]),
        _ => InitPolicy::TopDetection(nms_params(kv, &model)?),
    };
    let ranking = rank_by_usage(&model, &dataset, &concept, &policy, &options)?;
    let mut text = String::from("rank,id,usage_ratio\n");
    for (rank, (id, usage)) in ranking.iter().enumerate() {
        text.push_str(&format!("{},{id},{usage}\n", rank + 1));
    }
    write_text(&out.join("ranking.csv"), text)?;

    // per-layer comparison
    let mut layers: Vec<String> = list(kv, "layers")?;
    if layers.is_empty() {
        layers.push(concept.layer.clone());
    }
    let method = match kv.get("method").unwrap_or("") {
        "" => concept.method,
        _ => method_of(kv, "method")?,
    };
    let mut fit_kv = KeyValues::from_pairs(ConceptArgs::DEFAULTS.iter().copied());
    fit_kv.set("seed", seed.to_string());
    fit_kv.set("lr", default_lr(method));
    fit_kv.set("concept", concept.meta.concept.clone());
    let mut table = String::from("layer,method,held_out_score,mean_mu_c,mu_c_defined,samples,mean_usage_ratio\n");
    for layer in &layers {
        let vector = if *layer == concept.layer && method == concept.method {
            concept.clone()
        } else {
            fit_concept(&model, &dataset, layer, method, &fit_kv)?
        };
        let rows = if *layer == concept.layer && method == concept.method {
            located.iter().map(|l| (l.mu_c, l.usage)).collect::<Vec<_>>()
        } else {
            locate(&model, &dataset, &vector, kv, &options)?.iter().map(|l| (l.mu_c, l.usage)).collect()
        };
        table.push_str(&format!(
            "{layer},{},{},{},{},{},{}\n",
            method.as_str(),
            fmt_opt(vector.meta.held_out_score),
            fmt_opt(mean(rows.iter().filter_map(|r| r.0))),
            rows.iter().filter(|r| r.0.is_some()).count(),
            rows.len(),
            fmt_opt(mean(rows.iter().map(|r| r.1)))
        ));
    }
    write_text(&out.join("layers.csv"), table)?;

    let ranked_auc = curve_auc(&ranked_rows)?;
    let random_auc = curve_auc(&random_rows)?;
    let summary = KeyValues::from_pairs([
        ("samples_localized", located.len().to_string()),
        ("mean_mu_c", fmt_opt(mean(located.iter().filter_map(|l| l.mu_c)))),
        ("mean_usage_ratio", fmt_opt(mean(located.iter().map(|l| l.usage)))),
        ("samples_perturbed", chosen.len().to_string()),
        ("ranked_class_score_auc", fmt_opt(ranked_auc)),
        ("random_class_score_auc", fmt_opt(random_auc)),
    ]);
    summary.write(&out.join("summary.txt"))?;
    save_run_config(&out, kv)?;
    print!("{summary}");
    Ok(())
}

fn curve_auc(rows: &[CurveRow]) -> Result<Option<f32>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let xs: Vec<f32> = rows.iter().map(|r| r.fraction).collect();
    let ys: Vec<f32> = rows.iter().map(|r| r.class_score).collect();
    Ok(Some(auc(&xs, &ys)? as f32))
}
