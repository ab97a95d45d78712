//! Linear concept encodings in one latent layer.
//!
//! * CAV: soft-margin linear classifier on spatially averaged activations,
//!   trained by full-batch subgradient descent on hinge loss + L2.
//! * PatCAV / SPatCAV: covariance between averaged activations and labels,
//!   divided by the label variance (PatCAV) or left as the raw sum (SPatCAV).
//! * Net2Vec: weights over thresholded channel maps whose sigmoid reproduces
//!   the downsampled concept mask under binary cross-entropy.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConceptMethod {
    Cav,
    PatCav,
    SPatCav,
    Net2Vec,
}

impl ConceptMethod {
    pub fn tag(self) -> u8 {
        match self {
            ConceptMethod::Cav => 0,
            ConceptMethod::PatCav => 1,
            ConceptMethod::SPatCav => 2,
            ConceptMethod::Net2Vec => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ConceptMethod::Cav,
            1 => ConceptMethod::PatCav,
            2 => ConceptMethod::SPatCav,
            3 => ConceptMethod::Net2Vec,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptMethod::Cav => "cav",
            ConceptMethod::PatCav => "patcav",
            ConceptMethod::SPatCav => "spatcav",
            ConceptMethod::Net2Vec => "net2vec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "cav" => ConceptMethod::Cav,
            "patcav" => ConceptMethod::PatCav,
            "spatcav" => ConceptMethod::SPatCav,
            "net2vec" => ConceptMethod::Net2Vec,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptMeta {
    pub concept: String,
    pub positives: usize,
    pub negatives: usize,
    /// Held-out accuracy (CAV) or mask IoU (Net2Vec); `None` when not measured.
    pub held_out_score: Option<f32>,
    /// Set when the held-out score missed the configured precondition.
    pub precondition_warning: bool,
}

/// A channel-space concept direction anchored at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub layer: String,
    pub vector: Tensor,
    pub method: ConceptMethod,
    /// Classifier offset; zero for everything but CAV.
    pub bias: f32,
    pub meta: ConceptMeta,
}

impl ConceptVector {
    /// Validates finiteness and a non-zero norm.
    pub fn new(layer: impl Into<String>, vector: Tensor, method: ConceptMethod, bias: f32, meta: ConceptMeta) -> Result<Self> {
        if vector.rank() != 1 {
            return Err(shape_err!("concept vector must be rank 1, got {:?}", vector.shape()));
        }
        if !vector.is_finite() || !bias.is_finite() {
            return Err(Error::Vector("non-finite concept vector".into()));
        }
        if vector.l2_norm() == 0.0 {
            return Err(Error::Vector("concept vector has zero norm".into()));
        }
        Ok(Self { layer: layer.into(), vector, method, bias, meta })
    }

    pub fn channels(&self) -> usize {
        self.vector.len()
    }

    /// Decision value `v·a + b` on a channel vector.
    pub fn decision(&self, features: &[f32]) -> f64 {
        dot(self.vector.data(), features) + self.bias as f64
    }

    pub fn unit(&self) -> Vec<f64> {
        let norm = self.vector.l2_norm();
        self.vector.data().iter().map(|&v| v as f64 / norm).collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Activation at the concept layer for one image, with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSample {
    /// `[C, h, w]`, or `[C]` for layers without spatial extent.
    pub activation: Tensor,
    /// 1 when the concept is present.
    pub label: u8,
    /// Image-resolution binary mask `[H, W]`.
    pub mask: Option<Tensor>,
}

impl ConceptSample {
    /// Spatial mean per channel.
    pub fn averaged(&self) -> Vec<f32> {
        let c = self.activation.shape()[0];
        let inner = self.activation.len() / c;
        self.activation
            .data()
            .chunks(inner)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect()
    }
}

/// Forward every dataset image and read the activation at `layer`.
pub fn collect_activations(model: &ModelGraph, layer: &str, dataset: &Dataset) -> Result<Vec<ConceptSample>> {
    model.layer_index(layer)?;
    dataset
        .samples
        .iter()
        .map(|s| {
            let (_, trace) = model.forward(&s.image())?;
            let out = trace.output(layer)?;
            let activation = out.reshape(&out.shape()[1..])?;
            Ok(ConceptSample { activation, label: s.concept_label, mask: Some(s.mask()) })
        })
        .collect()
}

fn averaged_matrix(samples: &[ConceptSample]) -> Result<(Vec<Vec<f32>>, usize)> {
    let first = samples.first().ok_or_else(|| Error::Data("no concept samples".into()))?;
    let channels = first.activation.shape()[0];
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.activation.shape() != first.activation.shape() {
            return Err(shape_err!("activation {:?} vs {:?}", s.activation.shape(), first.activation.shape()));
        }
        if s.label > 1 {
            return Err(Error::Data(format!("label {} is not binary", s.label)));
        }
        rows.push(s.averaged());
    }
    Ok((rows, channels))
}

fn count_labels(samples: &[ConceptSample]) -> Result<(usize, usize)> {
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!("need both labels, got {pos} positive and {neg} negative samples")));
    }
    Ok((pos, neg))
}

/// Stratified split into (train, held-out) index lists.
fn split(labels: &[u8], fraction: f32, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n_held = if idx.len() >= 2 { (libm::roundf(idx.len() as f32 * fraction) as usize).clamp(1, idx.len() - 1) } else { 0 };
        held.extend_from_slice(&idx[..n_held]);
        train.extend_from_slice(&idx[n_held..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CavConfig {
    /// L2 regularization strength.
    pub reg: f32,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
    pub holdout_fraction: f32,
    /// Minimum held-out accuracy before a warning is attached.
    pub precondition: f32,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self { reg: 0.01, epochs: 500, lr: 0.1, seed: 0, holdout_fraction: 0.25, precondition: 0.85 }
    }
}

pub fn train_cav(samples: &[ConceptSample], layer: &str, concept: &str, config: &CavConfig) -> Result<ConceptVector> {
    let (rows, channels) = averaged_matrix(samples)?;
    let (positives, negatives) = count_labels(samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, held_idx) = split(&labels, config.holdout_fraction, &mut rng);

    // per-channel standardization on the training split; mapped back below
    let n_train = train_idx.len() as f64;
    let mut mean = vec![0.0f64; channels];
    let mut std = vec![0.0f64; channels];
    for &i in &train_idx {
        for (m, &v) in mean.iter_mut().zip(&rows[i]) {
            *m += v as f64 / n_train;
        }
    }
    for &i in &train_idx {
        for ((s, &v), m) in std.iter_mut().zip(&rows[i]).zip(&mean) {
            *s += (v as f64 - m) * (v as f64 - m) / n_train;
        }
    }
    // constant channels keep unit scale so their weight stays defined
    let std: Vec<f64> = std.into_iter().map(|v| if v > 0.0 { libm::sqrt(v) } else { 1.0 }).collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&std).map(|((&v, m), s)| (v as f64 - m) / s).collect())
        .collect();
    let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    let mut w: Vec<f64> = (0..channels).map(|_| rng.random_range(-1e-3..1e-3)).collect();
    let mut b = 0.0f64;
    let (lr, reg) = (config.lr as f64, config.reg as f64);
    let n = train_idx.len() as f64;
    for _ in 0..config.epochs {
        let mut gw = vec![0.0f64; channels];
        let mut gb = 0.0;
        for &i in &train_idx {
            let margin = t[i] * (x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            if margin < 1.0 {
                for (g, a) in gw.iter_mut().zip(&x[i]) {
                    *g -= t[i] * a;
                }
                gb -= t[i];
            }
        }
        for (wk, gk) in w.iter_mut().zip(&gw) {
            *wk -= lr * (reg * *wk + gk / n);
        }
        b -= lr * gb / n;
    }

    let vector: Vec<f32> = w.iter().zip(&std).map(|(&v, s)| (v / s) as f32).collect();
    let b = b - w.iter().zip(&mean).zip(&std).map(|((v, m), s)| v * m / s).sum::<f64>();
    let predict = |i: usize| dot(&vector, &rows[i]) + b > 0.0;
    let eval_idx = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let correct = eval_idx.iter().filter(|&&i| predict(i) == (labels[i] == 1)).count();
    let accuracy = correct as f32 / eval_idx.len() as f32;
    let warning = accuracy < config.precondition;
    if warning {
        log::warn!("CAV for {concept} at {layer}: held-out accuracy {accuracy:.3} below {}", config.precondition);
    }
    ConceptVector::new(
        layer,
        Tensor::vector(&vector),
        ConceptMethod::Cav,
        b as f32,
        ConceptMeta {
            concept: concept.into(),
            positives,
            negatives,
            held_out_score: Some(accuracy),
            precondition_warning: warning,
        },
    )
}

/// Pattern direction from averaged activations. `simplified` returns the raw
/// sum `Σ (a - â)(t - t̂)`; otherwise the covariance is divided by the label
/// variance.
pub fn train_patcav(samples: &[ConceptSample], layer: &str, concept: &str, simplified: bool) -> Result<ConceptVector> {
    let (rows, channels) = averaged_matrix(samples)?;
    let n = rows.len() as f64;
    let t: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
    let t_mean = t.iter().sum::<f64>() / n;
    let t_var = t.iter().map(|v| (v - t_mean) * (v - t_mean)).sum::<f64>() / n;
    if t_var == 0.0 {
        return Err(Error::Data("concept labels have zero variance".into()));
    }
    let (positives, negatives) = count_labels(samples)?;
    let mut a_mean = vec![0.0f64; channels];
    for r in &rows {
        for (m, &v) in a_mean.iter_mut().zip(r) {
            *m += v as f64 / n;
        }
    }
    let mut sum = vec![0.0f64; channels];
    for (r, &ti) in rows.iter().zip(&t) {
        for ((s, &v), m) in sum.iter_mut().zip(r).zip(&a_mean) {
            *s += (v as f64 - m) * (ti - t_mean);
        }
    }
    let vector: Vec<f32> = if simplified {
        sum.iter().map(|&s| s as f32).collect()
    } else {
        sum.iter().map(|&s| (s / n / t_var) as f32).collect()
    };
    let method = if simplified { ConceptMethod::SPatCav } else { ConceptMethod::PatCav };
    ConceptVector::new(
        layer,
        Tensor::vector(&vector),
        method,
        0.0,
        ConceptMeta { concept: concept.into(), positives, negatives, held_out_score: None, precondition_warning: false },
    )
}

/// Area-average a binary `[H, W]` mask down to `[h, w]`, then binarize at 0.5.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Result<Vec<f32>> {
    let &[mh, mw] = mask.shape() else {
        return Err(shape_err!("mask must be [H,W], got {:?}", mask.shape()));
    };
    if mh % h != 0 || mw % w != 0 {
        return Err(shape_err!("{}x{} mask does not tile onto {}x{}", mh, mw, h, w));
    }
    let (bh, bw) = (mh / h, mw / w);
    let area = (bh * bw) as f32;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for dy in 0..bh {
                let row = (y * bh + dy) * mw + x * bw;
                sum += mask.data()[row..row + bw].iter().sum::<f32>();
            }
            out.push(if sum / area >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

/// Keep activations at or above the `(1 - tau)` quantile, zero the rest.
/// `per_channel` computes one threshold per channel instead of one per map.
pub fn threshold_top(activation: &Tensor, tau: f32, per_channel: bool) -> Tensor {
    let c = activation.shape()[0];
    let groups = if per_channel { c } else { 1 };
    let group_len = activation.len() / groups;
    let keep = (libm::ceilf(group_len as f32 * tau) as usize).clamp(1, group_len);
    let mut out = activation.clone();
    for chunk in out.data_mut().chunks_mut(group_len) {
        let mut sorted = chunk.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[keep - 1];
        chunk.iter_mut().for_each(|v| {
            if *v < cut {
                *v = 0.0;
            }
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net2VecConfig {
    pub tau_quantile: f32,
    pub per_channel: bool,
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
    pub holdout_fraction: f32,
}

impl Default for Net2VecConfig {
    fn default() -> Self {
        Self { tau_quantile: 0.005, per_channel: false, lr: 1.0, epochs: 500, seed: 0, holdout_fraction: 0.25 }
    }
}

/// Thresholded channel maps paired with downsampled masks, ready for BCE.
#[derive(Debug, Clone, PartialEq)]
pub struct Net2VecProblem {
    channels: usize,
    pixels: usize,
    /// Per sample, `[C * pixels]` thresholded activations.
    features: Vec<Vec<f32>>,
    targets: Vec<Vec<f32>>,
}

impl Net2VecProblem {
    pub fn prepare(samples: &[ConceptSample], tau: f32, per_channel: bool) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("no concept samples".into()))?;
        let &[channels, h, w] = first.activation.shape() else {
            return Err(shape_err!("Net2Vec needs [C,h,w] activations, got {:?}", first.activation.shape()));
        };
        let mut features = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            if s.activation.shape() != first.activation.shape() {
                return Err(shape_err!("activation {:?} vs {:?}", s.activation.shape(), first.activation.shape()));
            }
            let mask = s.mask.as_ref().ok_or_else(|| Error::Data("Net2Vec needs a mask on every sample".into()))?;
            features.push(threshold_top(&s.activation, tau, per_channel).into_data());
            targets.push(downsample_mask(mask, h, w)?);
        }
        if targets.iter().all(|t| t.iter().all(|&v| v == 0.0)) {
            return Err(Error::Data("every concept mask is empty".into()));
        }
        Ok(Self { channels, pixels: h * w, features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn logit(&self, sample: usize, pixel: usize, w: &[f64]) -> f64 {
        let f = &self.features[sample];
        (0..self.channels).map(|k| w[k] * f[k * self.pixels + pixel] as f64).sum()
    }

    /// Mean BCE per pixel over `subset` (all samples when `None`).
    pub fn loss(&self, w: &[f64], subset: Option<&[usize]>) -> f64 {
        let all: Vec<usize> = (0..self.len()).collect();
        let idx = subset.unwrap_or(&all);
        let mut total = 0.0;
        for &s in idx {
            for p in 0..self.pixels {
                let z = self.logit(s, p, w);
                let y = self.targets[s][p] as f64;
                // log(1 + e^z) - y z, written to avoid overflow
                let softplus = if z > 0.0 { z + libm::log1p(libm::exp(-z)) } else { libm::log1p(libm::exp(z)) };
                total += softplus - y * z;
            }
        }
        total / (idx.len() * self.pixels) as f64
    }

    /// Gradient of [`Net2VecProblem::loss`] with respect to `w`.
    pub fn gradient(&self, w: &[f64], subset: Option<&[usize]>) -> Vec<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        let idx = subset.unwrap_or(&all);
        let mut grad = vec![0.0; self.channels];
        for &s in idx {
            let f = &self.features[s];
            for p in 0..self.pixels {
                let m = 1.0 / (1.0 + libm::exp(-self.logit(s, p, w)));
                let err = m - self.targets[s][p] as f64;
                for (k, g) in grad.iter_mut().enumerate() {
                    *g += err * f[k * self.pixels + p] as f64;
                }
            }
        }
        let n = (idx.len() * self.pixels) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        grad
    }

    /// Pooled IoU between `M(x, w) > 0.5` and the masks over `subset`.
    pub fn iou(&self, w: &[f64], subset: Option<&[usize]>) -> f32 {
        let all: Vec<usize> = (0..self.len()).collect();
        let idx = subset.unwrap_or(&all);
        let (mut inter, mut union) = (0usize, 0usize);
        for &s in idx {
            for p in 0..self.pixels {
                let pred = sigmoid(self.logit(s, p, w) as f32) > 0.5;
                let truth = self.targets[s][p] > 0.5;
                inter += usize::from(pred && truth);
                union += usize::from(pred || truth);
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f32 / union as f32
        }
    }

    /// Segmentation `M(x, w)` of one sample, `[pixels]`.
    pub fn segmentation(&self, sample: usize, w: &[f64]) -> Vec<f32> {
        (0..self.pixels).map(|p| sigmoid(self.logit(sample, p, w) as f32)).collect()
    }
}

pub fn train_net2vec(samples: &[ConceptSample], layer: &str, concept: &str, config: &Net2VecConfig) -> Result<ConceptVector> {
    let problem = Net2VecProblem::prepare(samples, config.tau_quantile, config.per_channel)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, held_idx) = split(&labels, config.holdout_fraction, &mut rng);

    // isotropic rescaling of the features: w' = w * scale in original units
    let max = problem.features.iter().flatten().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let scaled = Net2VecProblem {
        features: problem.features.iter().map(|f| f.iter().map(|&v| (v as f64 * scale) as f32).collect()).collect(),
        ..problem.clone()
    };

    let mut w = vec![0.0f64; problem.channels];
    for _ in 0..config.epochs {
        let g = scaled.gradient(&w, Some(&train_idx));
        for (wk, gk) in w.iter_mut().zip(&g) {
            *wk -= config.lr as f64 * gk;
        }
    }
    let w_orig: Vec<f64> = w.iter().map(|&v| v * scale).collect();
    let eval = if held_idx.is_empty() { &train_idx } else { &held_idx };
    let iou = problem.iou(&w_orig, Some(eval));
    let vector: Vec<f32> = w_orig.iter().map(|&v| v as f32).collect();
    ConceptVector::new(
        layer,
        Tensor::vector(&vector),
        ConceptMethod::Net2Vec,
        0.0,
        ConceptMeta {
            concept: concept.into(),
            positives,
            negatives: labels.len() - positives,
            held_out_score: Some(iou),
            precondition_warning: false,
        },
    )
}
