//! Ready-made graphs: a small trainable detector, a detector with hand-set
//! weights whose class-1 evidence is a known colour channel, and a bias-free
//! toy net for conservation checks.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Layer, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Output of the planted detector's first ReLU; channel 0 is exactly the
/// red-disc mask region.
pub const PLANTED_LAYER: &str = "feat.1";
/// Later ReLU of the planted detector where red evidence is mixed with
/// local red intensity.
pub const ENTANGLED_LAYER: &str = "feat.4";
/// Concept channel of [`PLANTED_LAYER`].
pub const PLANTED_CHANNEL: usize = 0;

fn he_conv(rng: &mut ChaCha8Rng, k: usize, c: usize, size: usize) -> Tensor {
    let std = libm::sqrtf(2.0 / (c * size * size) as f32);
    let normal = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(&[k, c, size, size], |_| normal.sample(rng))
}

/// Trainable detector for 3x32x32 inputs on a 4x4 grid with `classes`
/// outputs (background included). Weights are He-initialized from `seed`;
/// the batch norm starts as the identity until [`calibrate_batch_norm`] runs.
pub fn standard_detector(classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bn = |c: usize| Layer::BatchNorm {
        gamma: Tensor::full(&[c], 1.0),
        beta: Tensor::zeros(&[c]),
        mean: Tensor::zeros(&[c]),
        var: Tensor::full(&[c], 1.0),
        eps: 1e-5,
    };
    let pool = || Layer::MaxPool { size: 2, stride: 2 };
    let layers = vec![
        LayerSpec::new("feat.0", Layer::conv(he_conv(&mut rng, 8, 3, 3), Some(Tensor::zeros(&[8])), 1, 1)),
        LayerSpec::new("feat.1", bn(8)),
        LayerSpec::new("feat.2", Layer::ReLU),
        LayerSpec::new("feat.3", pool()),
        LayerSpec::new("feat.4", Layer::conv(he_conv(&mut rng, 16, 8, 3), Some(Tensor::zeros(&[16])), 1, 1)),
        LayerSpec::new("feat.5", Layer::ReLU),
        LayerSpec::new("feat.6", pool()),
        LayerSpec::new("feat.7", Layer::conv(he_conv(&mut rng, 16, 16, 3), Some(Tensor::zeros(&[16])), 1, 1)),
        LayerSpec::new("feat.8", Layer::ReLU),
        LayerSpec::new("feat.9", pool()),
        LayerSpec::new(
            "head",
            Layer::DetectionHead {
                weight: he_conv(&mut rng, classes, 16, 1).scale(0.5),
                bias: Some(Tensor::zeros(&[classes])),
                stride: 1,
                pad: 0,
                grid: (4, 4),
            },
        ),
    ];
    ModelGraph::new(layers, Shape4::new(1, 3, 32, 32))
}

/// Set every batch norm's running statistics to the per-channel mean and
/// variance of its input over `images`, keeping gamma and beta.
pub fn calibrate_batch_norm(model: &ModelGraph, images: &[Tensor]) -> Result<ModelGraph> {
    if images.is_empty() {
        return Err(Error::Data("no images to calibrate on".into()));
    }
    let mut model = model.clone();
    for index in 0..model.layers().len() {
        let Layer::BatchNorm { .. } = model.layers()[index].layer else { continue };
        let mut sums: Vec<(f64, f64)> = Vec::new();
        let mut count = 0usize;
        for image in images {
            let (_, trace) = model.forward(image)?;
            let (input, _) = trace.at(index)?;
            let s = input.shape4()?;
            let plane = s.height * s.width;
            sums.resize(s.channels, (0.0, 0.0));
            for n in 0..s.batch {
                for (c, acc) in sums.iter_mut().enumerate() {
                    let start = (n * s.channels + c) * plane;
                    for &v in &input.data()[start..start + plane] {
                        acc.0 += v as f64;
                        acc.1 += v as f64 * v as f64;
                    }
                }
            }
            count += s.batch * plane;
        }
        let n = count as f64;
        let mean: Vec<f32> = sums.iter().map(|&(s, _)| (s / n) as f32).collect();
        let var: Vec<f32> = sums.iter().map(|&(s, q)| ((q / n - (s / n) * (s / n)).max(0.0)) as f32).collect();
        if let Layer::BatchNorm { mean: m, var: v, .. } = &mut model.layers_mut()[index].layer {
            *m = Tensor::vector(&mean);
            *v = Tensor::vector(&var);
        }
    }
    Ok(model)
}

/// Channel-wise mean pooling written as a strided convolution, so relevance
/// spreads over every pixel of a window instead of a single winner.
fn mean_pool_conv(channels: usize, size: usize) -> Layer {
    let tap = 1.0 / (size * size) as f32;
    let mut w = Tensor::zeros(&[channels, channels, size, size]);
    for c in 0..channels {
        let base = (c * channels + c) * size * size;
        w.data_mut()[base..base + size * size].fill(tap);
    }
    Layer::conv(w, None, size, 0)
}

/// Hand-set detector for the standard scene colours (see
/// [`crate::synth::SceneSpec::standard`]).
///
/// `feat.0` computes per pixel a red detector `4(R-G-B) - 0.6`, the same for
/// blue and green, and the 3x3 mean of the red intensity. After `feat.1`
/// (ReLU) channel 0 is non-zero exactly on red-disc pixels. `feat.3` adds
/// half the local red intensity to each colour channel, which also picks up
/// the yellow rings. Pooling is by mean. The class-1 logit reads channel 0,
/// class 2 reads blue and green, background is a constant.
pub fn planted_detector() -> Result<ModelGraph> {
    let mut w0 = Tensor::zeros(&[4, 3, 3, 3]);
    let center = |k: usize, c: usize| ((k * 3 + c) * 3 + 1) * 3 + 1;
    for (k, target) in [0usize, 2, 1].into_iter().enumerate() {
        for c in 0..3 {
            w0.data_mut()[center(k, c)] = if c == target { 4.0 } else { -4.0 };
        }
    }
    w0.data_mut()[(3 * 3) * 9..(3 * 3) * 9 + 9].fill(1.0 / 9.0);
    let b0 = Tensor::vector(&[-0.6, -0.6, -0.6, 0.0]);

    let mut w3 = Tensor::zeros(&[4, 4, 3, 3]);
    for k in 0..4 {
        w3.data_mut()[((k * 4 + k) * 3 + 1) * 3 + 1] = 1.0;
        if k < 3 {
            w3.data_mut()[(k * 4 + 3) * 9..(k * 4 + 3) * 9 + 9].fill(0.5 / 9.0);
        }
    }

    // classes: 0 background, 1 read from red, 2 read from blue and green
    let wh = Tensor::new(
        vec![3, 4, 1, 1],
        vec![
            0.0, 0.0, 0.0, 0.0, //
            12.0, 0.0, 0.0, 0.0, //
            0.0, 6.0, 6.0, 0.0,
        ],
    )?;
    let bh = Tensor::vector(&[1.5, -0.6, -1.0]);
    let layers = vec![
        LayerSpec::new("feat.0", Layer::conv(w0, Some(b0), 1, 1)),
        LayerSpec::new("feat.1", Layer::ReLU),
        LayerSpec::new("feat.2", mean_pool_conv(4, 2)),
        LayerSpec::new("feat.3", Layer::conv(w3, None, 1, 1)),
        LayerSpec::new("feat.4", Layer::ReLU),
        LayerSpec::new("feat.5", mean_pool_conv(4, 4)),
        LayerSpec::new("head", Layer::DetectionHead { weight: wh, bias: Some(bh), stride: 1, pad: 0, grid: (4, 4) }),
    ];
    ModelGraph::new(layers, Shape4::new(1, 3, 32, 32))
}

/// Conv, ReLU, conv, ReLU, 1x1 conv head without biases, random weights
/// (half of them negative) on `channels`x`size`x`size` inputs; the head grid
/// equals the input size.
pub fn toy_net(channels: usize, size: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    if size == 0 || channels == 0 || classes == 0 {
        return Err(Error::Data(format!("toy net needs positive dims, got {channels}x{size} / {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let layers = vec![
        LayerSpec::new("conv1", Layer::conv(uniform(&[6, channels, 3, 3]), None, 1, 1)),
        LayerSpec::new("relu1", Layer::ReLU),
        LayerSpec::new("conv2", Layer::conv(uniform(&[6, 6, 3, 3]), None, 1, 1)),
        LayerSpec::new("relu2", Layer::ReLU),
        LayerSpec::new(
            "head",
            Layer::DetectionHead { weight: uniform(&[classes, 6, 1, 1]), bias: None, stride: 1, pad: 0, grid: (size, size) },
        ),
    ];
    ModelGraph::new(layers, Shape4::new(1, channels, size, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    #[test]
    fn graphs_are_valid() {
        let m = standard_detector(3, 1).unwrap();
        assert_eq!(m.head_dims().unwrap(), (3, 4, 4));
        let m = planted_detector().unwrap();
        assert_eq!(m.head_dims().unwrap(), (3, 4, 4));
        let m = toy_net(3, 6, 2, 0).unwrap();
        assert_eq!(m.head_dims().unwrap(), (2, 6, 6));
    }

    #[test]
    fn planted_red_channel_matches_concept_mask() {
        let data = generate(&SceneSpec::standard(5), 40).unwrap();
        let model = planted_detector().unwrap();
        for s in &data.samples {
            let (_, trace) = model.forward(&s.image()).unwrap();
            let red = trace.output(PLANTED_LAYER).unwrap();
            let plane = 32 * 32;
            for p in 0..plane {
                let active = red.data()[PLANTED_CHANNEL * plane + p] > 0.0;
                assert_eq!(active, s.concept_mask[p] == 1, "sample {} pixel {}", s.id, p);
            }
        }
    }

    #[test]
    fn calibrated_batch_norm_normalizes_its_input() {
        let data = generate(&SceneSpec::standard(2), 8).unwrap();
        let images = data.images();
        let model = calibrate_batch_norm(&standard_detector(3, 3).unwrap(), &images).unwrap();
        let Layer::BatchNorm { mean, var, .. } = &model.layers()[1].layer else { panic!("feat.1 is a batch norm") };
        assert!(mean.data().iter().any(|&m| m != 0.0));
        assert!(var.data().iter().all(|&v| v > 0.0));
    }
}
