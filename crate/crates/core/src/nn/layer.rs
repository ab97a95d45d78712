use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::{self, Tensor};

/// Discriminant of a [`Layer`], used for rule lookup and file tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Dense,
    ReLU,
    MaxPool,
    BatchNorm,
    Flatten,
    DetectionHead,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Conv => 0,
            LayerKind::Dense => 1,
            LayerKind::ReLU => 2,
            LayerKind::MaxPool => 3,
            LayerKind::BatchNorm => 4,
            LayerKind::Flatten => 5,
            LayerKind::DetectionHead => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::Conv,
            1 => LayerKind::Dense,
            2 => LayerKind::ReLU,
            3 => LayerKind::MaxPool,
            4 => LayerKind::BatchNorm,
            5 => LayerKind::Flatten,
            6 => LayerKind::DetectionHead,
            _ => return None,
        })
    }

    /// Layers with weights that LRP rules apply to.
    pub fn is_linear(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dense | LayerKind::DetectionHead)
    }
}

/// One layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize },
    Dense { weight: Tensor, bias: Option<Tensor> },
    ReLU,
    MaxPool { size: usize, stride: usize },
    BatchNorm { gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: f32 },
    Flatten,
    /// Per-cell class logits. A rank-4 weight makes this a convolution over the
    /// feature map; a rank-2 weight makes it a dense map whose
    /// `classes * grid_h * grid_w` outputs are laid out as `[N, classes, grid_h, grid_w]`.
    DetectionHead {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
        grid: (usize, usize),
    },
}

/// A named layer inside a [`crate::nn::ModelGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub layer: Layer,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, layer: Layer) -> Self {
        Self { name: name.into(), layer }
    }

    pub fn kind(&self) -> LayerKind {
        self.layer.kind()
    }
}

impl Layer {
    pub fn conv(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Self {
        Layer::Conv { weight, bias, stride, pad }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv { .. } => LayerKind::Conv,
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::ReLU => LayerKind::ReLU,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::Flatten => LayerKind::Flatten,
            Layer::DetectionHead { .. } => LayerKind::DetectionHead,
        }
    }

    /// Weight and bias of linear layers.
    pub fn linear_params(&self) -> Option<(&Tensor, Option<&Tensor>)> {
        match self {
            Layer::Conv { weight, bias, .. }
            | Layer::Dense { weight, bias }
            | Layer::DetectionHead { weight, bias, .. } => Some((weight, bias.as_ref())),
            _ => None,
        }
    }

    pub fn linear_params_mut(&mut self) -> Option<(&mut Tensor, &mut Option<Tensor>)> {
        match self {
            Layer::Conv { weight, bias, .. }
            | Layer::Dense { weight, bias }
            | Layer::DetectionHead { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    /// Shape produced from an input of shape `input`, validating parameters.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv { weight, bias, stride, pad } => conv_shape(input, weight, bias.as_ref(), *stride, *pad),
            Layer::Dense { weight, bias } => dense_shape(input, weight, bias.as_ref()),
            Layer::ReLU => Ok(input.to_vec()),
            Layer::MaxPool { size, stride } => {
                let &[n, c, h, w] = input else {
                    return Err(shape_err!("max pool needs [N,C,H,W], got {:?}", input));
                };
                if *size == 0 {
                    return Err(shape_err!("pool size must be at least 1"));
                }
                let (oh, ow) = tensor::conv_output_hw(h, w, *size, *size, *stride, 0)?;
                Ok(vec![n, c, oh, ow])
            }
            Layer::BatchNorm { gamma, beta, mean, var, eps } => {
                if input.len() < 2 {
                    return Err(shape_err!("batch norm needs a channel axis, got {:?}", input));
                }
                let c = input[1];
                for (label, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
                    if t.shape() != [c] {
                        return Err(shape_err!("batch norm {} {:?} vs {} channels", label, t.shape(), c));
                    }
                }
                if *eps < 0.0 || var.data().iter().any(|&v| v + *eps <= 0.0) {
                    return Err(shape_err!("batch norm variance must be positive"));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => match input {
                [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
                _ => Err(shape_err!("cannot flatten {:?}", input)),
            },
            Layer::DetectionHead { weight, bias, stride, pad, grid } => match weight.rank() {
                4 => {
                    let out = conv_shape(input, weight, bias.as_ref(), *stride, *pad)?;
                    if (out[2], out[3]) != *grid {
                        return Err(shape_err!(
                            "head produces a {}x{} grid, declared {:?}",
                            out[2],
                            out[3],
                            grid
                        ));
                    }
                    Ok(out)
                }
                2 => {
                    let out = dense_shape(input, weight, bias.as_ref())?;
                    let cells = grid.0 * grid.1;
                    if cells == 0 || out[1] % cells != 0 {
                        return Err(shape_err!("{} head outputs do not tile a {:?} grid", out[1], grid));
                    }
                    Ok(vec![out[0], out[1] / cells, grid.0, grid.1])
                }
                r => Err(shape_err!("head weight must be rank 2 or 4, got rank {}", r)),
            },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { weight, bias, stride, pad } => tensor::conv2d(x, weight, bias.as_ref(), *stride, *pad),
            Layer::Dense { weight, bias } => tensor::dense(x, weight, bias.as_ref()),
            Layer::ReLU => Ok(x.map(|v| v.max(0.0))),
            Layer::MaxPool { size, stride } => Ok(tensor::max_pool(x, *size, *stride)?.0),
            Layer::BatchNorm { gamma, beta, mean, var, eps } => {
                let (scale, shift) = bn_affine(gamma, beta, mean, var, *eps);
                let channels = scale.len();
                let inner: usize = x.shape()[2..].iter().product();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = (i / inner) % channels;
                        (v as f64 * scale[c] + shift[c]) as f32
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            Layer::Flatten => {
                let shape = self.output_shape(x.shape())?;
                x.reshape(&shape)
            }
            Layer::DetectionHead { weight, bias, stride, pad, .. } => {
                if weight.rank() == 4 {
                    tensor::conv2d(x, weight, bias.as_ref(), *stride, *pad)
                } else {
                    let shape = self.output_shape(x.shape())?;
                    tensor::dense(x, weight, bias.as_ref())?.into_reshaped(&shape)
                }
            }
        }
    }
}

/// Per-channel `(scale, shift)` of an inference-mode batch norm.
pub(crate) fn bn_affine(
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> (Vec<f64>, Vec<f64>) {
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for c in 0..gamma.len() {
        let s = gamma.data()[c] as f64 / libm::sqrt(var.data()[c] as f64 + eps as f64);
        scale.push(s);
        shift.push(beta.data()[c] as f64 - mean.data()[c] as f64 * s);
    }
    (scale, shift)
}

fn conv_shape(
    input: &[usize],
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    let &[n, c, h, w] = input else {
        return Err(shape_err!("convolution needs [N,C,H,W], got {:?}", input));
    };
    let k = weight.shape4()?;
    if k.channels != c {
        return Err(shape_err!("kernel expects {} channels, input has {}", k.channels, c));
    }
    if let Some(b) = bias {
        if b.shape() != [k.batch] {
            return Err(shape_err!("bias {:?} vs {} filters", b.shape(), k.batch));
        }
    }
    let (oh, ow) = tensor::conv_output_hw(h, w, k.height, k.width, stride, pad)?;
    Ok(vec![n, k.batch, oh, ow])
}

fn dense_shape(input: &[usize], weight: &Tensor, bias: Option<&Tensor>) -> Result<Vec<usize>> {
    let &[n, f] = input else {
        return Err(shape_err!("dense layer needs [N,F], got {:?}", input));
    };
    let &[o, wf] = weight.shape() else {
        return Err(shape_err!("dense weight must be [O,F], got {:?}", weight.shape()));
    };
    if wf != f {
        return Err(shape_err!("dense weight expects {} features, input has {}", wf, f));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(shape_err!("bias {:?} vs {} outputs", b.shape(), o));
        }
    }
    Ok(vec![n, o])
}
