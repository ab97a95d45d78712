//! Minibatch SGD on per-cell softmax cross-entropy.
//!
//! Gradients are written out by hand for convolution, dense, ReLU, max pool and
//! the detection head. Batch norm runs with frozen statistics: it scales the
//! gradient but its parameters never move.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{forward, ActivationTrace, ModelGraph};
use super::layer::{bn_affine, Layer};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Tensor};

/// One training image with its per-cell class labels (row-major over the grid).
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub image: &'a Tensor,
    pub cells: &'a [u8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights; `None` weighs every cell equally.
    pub class_weights: Option<Vec<f32>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, momentum: 0.9, batch_size: 16, seed: 0, class_weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Loss of the untrained model over the full set.
    pub initial_loss: f32,
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f32>,
}

/// Inverse-frequency class weights normalized to mean one over the labelled cells.
pub fn balanced_class_weights(samples: &[LabeledImage<'_>], classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; classes];
    for s in samples {
        for &c in s.cells {
            if (c as usize) < classes {
                counts[c as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { total as f32 / (present as f32 * c as f32) })
        .collect()
}

fn check_labels(model: &ModelGraph, samples: &[LabeledImage<'_>]) -> Result<(usize, usize)> {
    let (classes, gh, gw) = model.head_dims()?;
    for (i, s) in samples.iter().enumerate() {
        if s.cells.len() != gh * gw {
            return Err(shape_err!("sample {} has {} cell labels, grid has {}", i, s.cells.len(), gh * gw));
        }
        if let Some(&bad) = s.cells.iter().find(|&&c| c as usize >= classes) {
            return Err(Error::Data(format!("sample {i} labels class {bad}, head has {classes}")));
        }
    }
    Ok((classes, gh * gw))
}

/// Weighted mean cross-entropy and its gradient w.r.t. the logits.
fn loss_and_grad(
    logits: &Tensor,
    labels: &[&[u8]],
    weights: Option<&[f32]>,
) -> (f64, Tensor) {
    let (n, k, cells) = (logits.shape()[0], logits.shape()[1], logits.shape()[2] * logits.shape()[3]);
    let z = logits.data();
    let mut grad = vec![0.0f64; z.len()];
    let mut loss = 0.0;
    let mut norm = 0.0;
    for b in 0..n {
        for cell in 0..cells {
            let y = labels[b][cell] as usize;
            let w = weights.map_or(1.0, |w| w[y] as f64);
            let idx = |c: usize| (b * k + c) * cells + cell;
            let max = (0..k).map(|c| z[idx(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..k).map(|c| libm::exp(z[idx(c)] as f64 - max)).sum();
            let log_total = libm::log(total) + max;
            loss += w * (log_total - z[idx(y)] as f64);
            norm += w;
            for c in 0..k {
                let p = libm::exp(z[idx(c)] as f64 - log_total);
                grad[idx(c)] = w * (p - if c == y { 1.0 } else { 0.0 });
            }
        }
    }
    let norm = if norm > 0.0 { norm } else { 1.0 };
    let grad = grad.into_iter().map(|g| (g / norm) as f32).collect();
    (loss / norm, Tensor::new(logits.shape().to_vec(), grad).expect("logit shape"))
}

/// Parameter gradients of every layer, `None` for layers without trainable weights.
fn backprop(model: &ModelGraph, trace: &ActivationTrace, grad_out: Tensor) -> Result<Vec<Option<(Tensor, Tensor)>>> {
    let layers = model.layers();
    let mut grads = vec![None; layers.len()];
    let mut g = grad_out;
    for (i, spec) in layers.iter().enumerate().rev() {
        let (input, _) = trace.at(i)?;
        g = match &spec.layer {
            Layer::Conv { weight, stride, pad, .. } => {
                grads[i] = Some(tensor::conv2d_param_grads(input, &g, weight.shape4()?, *stride, *pad)?);
                if i == 0 {
                    break;
                }
                tensor::conv2d_transpose(&g, weight, input.shape4()?, *stride, *pad)?
            }
            Layer::DetectionHead { weight, stride, pad, .. } if weight.rank() == 4 => {
                grads[i] = Some(tensor::conv2d_param_grads(input, &g, weight.shape4()?, *stride, *pad)?);
                if i == 0 {
                    break;
                }
                tensor::conv2d_transpose(&g, weight, input.shape4()?, *stride, *pad)?
            }
            Layer::Dense { weight, .. } | Layer::DetectionHead { weight, .. } => {
                let flat = g.reshape(&[input.shape()[0], weight.shape()[0]])?;
                grads[i] = Some(tensor::dense_param_grads(input, &flat)?);
                if i == 0 {
                    break;
                }
                tensor::dense_transpose(&flat, weight)?
            }
            Layer::ReLU => input.zip_map(&g, |a, d| if a > 0.0 { d } else { 0.0 })?,
            Layer::MaxPool { size, stride } => {
                let (_, winners) = tensor::max_pool(input, *size, *stride)?;
                tensor::max_pool_scatter(&g, &winners, input.shape())?
            }
            Layer::BatchNorm { gamma, beta, mean, var, eps } => {
                let (scale, _) = bn_affine(gamma, beta, mean, var, *eps);
                let inner: usize = g.shape()[2..].iter().product();
                let c = scale.len();
                Tensor::from_fn(g.shape(), |j| (g.data()[j] as f64 * scale[(j / inner) % c]) as f32)
            }
            Layer::Flatten => g.reshape(input.shape())?,
        };
    }
    Ok(grads)
}

fn stack(samples: &[LabeledImage<'_>], order: &[usize]) -> Result<Tensor> {
    let images: Vec<Tensor> = order.iter().map(|&i| samples[i].image.clone()).collect();
    Tensor::stack_batch(&images)
}

/// Mean (optionally class-weighted) cross-entropy of `model` over `samples`.
pub fn evaluate_loss(model: &ModelGraph, samples: &[LabeledImage<'_>], weights: Option<&[f32]>) -> Result<f32> {
    check_labels(model, samples)?;
    let mut total = 0.0;
    for s in samples {
        let (logits, _) = forward(model, s.image)?;
        total += loss_and_grad(&logits, &[s.cells], weights).0;
    }
    Ok((total / samples.len().max(1) as f64) as f32)
}

/// Fraction of grid cells whose argmax class equals the label.
pub fn cell_accuracy(model: &ModelGraph, samples: &[LabeledImage<'_>]) -> Result<f32> {
    let (classes, cells) = check_labels(model, samples)?;
    let mut hits = 0usize;
    for s in samples {
        let (logits, _) = forward(model, s.image)?;
        let z = logits.data();
        for (cell, &y) in s.cells.iter().enumerate() {
            let best = (0..classes)
                .fold(0, |best, c| if z[c * cells + cell] > z[best * cells + cell] { c } else { best });
            hits += usize::from(best == y as usize);
        }
    }
    Ok(hits as f32 / (samples.len() * cells).max(1) as f32)
}

/// Train a copy of `model`; the input graph is left untouched.
pub fn train(
    model: &ModelGraph,
    samples: &[LabeledImage<'_>],
    config: &TrainConfig,
) -> Result<(ModelGraph, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let (classes, _) = check_labels(model, samples)?;
    let weights = config.class_weights.as_deref();
    if let Some(w) = weights {
        if w.len() != classes {
            return Err(shape_err!("{} class weights for {} classes", w.len(), classes));
        }
    }
    let mut model = model.clone();
    let mut report = TrainReport {
        initial_loss: evaluate_loss(&model, samples, weights)?,
        epoch_losses: Vec::with_capacity(config.epochs),
    };
    let mut velocity: Vec<Option<(Vec<f32>, Vec<f32>)>> = model
        .layers()
        .iter()
        .map(|l| l.layer.linear_params().map(|(w, _)| (vec![0.0; w.len()], Vec::new())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch = config.batch_size.max(1);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let x = stack(samples, chunk)?;
            let (logits, trace) = forward(&model, &x)?;
            let labels: Vec<&[u8]> = chunk.iter().map(|&i| samples[i].cells).collect();
            let (loss, grad) = loss_and_grad(&logits, &labels, weights);
            if !loss.is_finite() {
                return Err(Error::Train(format!("loss became {loss} in epoch {epoch}")));
            }
            epoch_loss += loss;
            batches += 1;
            let grads = backprop(&model, &trace, grad)?;
            apply_update(&mut model, &mut velocity, grads, config)?;
        }
        let mean = (epoch_loss / batches as f64) as f32;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

fn apply_update(
    model: &mut ModelGraph,
    velocity: &mut [Option<(Vec<f32>, Vec<f32>)>],
    grads: Vec<Option<(Tensor, Tensor)>>,
    config: &TrainConfig,
) -> Result<()> {
    for ((spec, vel), grad) in model.layers_mut().iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let (Some((dw, db)), Some((vw, vb))) = (grad, vel.as_mut()) else { continue };
        let Some((weight, bias)) = spec.layer.linear_params_mut() else { continue };
        step(weight.data_mut(), vw, dw.data(), config);
        if let Some(bias) = bias {
            if vb.is_empty() {
                vb.resize(bias.len(), 0.0);
            }
            step(bias.data_mut(), vb, db.data(), config);
        }
        if !weight.is_finite() {
            return Err(Error::Train(format!("non-finite weights in {}", spec.name)));
        }
    }
    Ok(())
}

fn step(params: &mut [f32], velocity: &mut [f32], grad: &[f32], config: &TrainConfig) {
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v + g;
        *p -= config.lr * *v;
    }
}
