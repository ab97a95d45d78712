//! Dense row-major `f32` tensors and the kernels built on them.
//!
//! Feature maps use the `(batch, channels, height, width)` layout everywhere.
//! Storage is `f32`; convolutions and reductions accumulate in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{shape_err, Result};

/// Dense n-dimensional array of `f32` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Extents of a `(batch, channels, height, width)` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("zero extent in {:?}", shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, buffer has {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on a zero extent; use [`Tensor::new`] for fallible construction.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let len: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(values: &[f32]) -> Self {
        assert!(!values.is_empty(), "empty vector");
        Self { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn into_reshaped(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn shape4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [n, c, h, w] => Ok(Shape4::new(n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    /// Sum of all elements with `f64` accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64).abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|&x| (x as f64) * (x as f64)).sum())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Slice out batch item `n` of a tensor whose first axis is the batch, keeping a
    /// leading extent of one.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let batch = *self.shape.first().ok_or_else(|| shape_err!("scalar has no batch axis"))?;
        if n >= batch {
            return Err(shape_err!("batch index {} out of {}", n, batch));
        }
        let stride = self.data.len() / batch;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[n * stride..(n + 1) * stride].to_vec() })
    }

    /// Concatenate rank-equal tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err!("nothing to stack"))?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut batch = 0;
        for t in items {
            if &t.shape[1..] != inner {
                return Err(shape_err!("cannot stack {:?} with {:?}", t.shape, first.shape));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Self::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(shape_err!("kernel {} larger than padded input {}", kernel, padded));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(shape_err!(
            "non-integral output extent: ({} + 2*{} - {}) / {}",
            input,
            pad,
            kernel,
            stride
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output spatial extents of a convolution, enforcing exact division.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err!("stride must be at least 1"));
    }
    Ok((output_extent(h, kh, stride, pad)?, output_extent(w, kw, stride, pad)?))
}

struct ConvGeometry {
    input: Shape4,
    out_channels: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: Shape4, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let k = kernel.shape4()?;
        if k.channels != input.channels {
            return Err(shape_err!(
                "kernel expects {} input channels, input has {}",
                k.channels,
                input.channels
            ));
        }
        let (oh, ow) = conv_output_hw(input.height, input.width, k.height, k.width, stride, pad)?;
        Ok(Self { input, out_channels: k.batch, kh: k.height, kw: k.width, oh, ow, stride, pad })
    }

    /// Input coordinate hit by output position `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.input.batch, self.out_channels, self.oh, self.ow]
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(shape_err!("bias {:?} does not match {} channels", b.shape(), channels));
        }
    }
    Ok(())
}

/// Cross-correlation of `input [N,C,H,W]` with `kernel [K,C,kh,kw]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape4()?, kernel, stride, pad)?;
    check_bias(bias, g.out_channels)?;
    let Shape4 { batch, channels, height, width } = g.input;
    let x = input.data();
    let wt = kernel.data();
    let mut out = Vec::with_capacity(batch * g.out_channels * g.oh * g.ow);
    for n in 0..batch {
        for k in 0..g.out_channels {
            let b = bias.map_or(0.0, |b| b.data()[k] as f64);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b;
                    for c in 0..channels {
                        let x_base = (n * channels + c) * height;
                        let w_base = (k * channels + c) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, height) else { continue };
                            let x_row = (x_base + iy) * width;
                            let w_row = (w_base + ky) * g.kw;
                            for kx in 0..g.kw {
                                if let Some(ix) = g.source(ox, kx, width) {
                                    acc += x[x_row + ix] as f64 * wt[w_row + kx] as f64;
                                }
                            }
                        }
                    }
                    out.push(acc as f32);
                }
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Adjoint of [`conv2d`] with respect to its input: scatters `signal [N,K,H',W']`
/// back through `kernel` onto an `[N,C,H,W]` map.
pub fn conv2d_transpose(
    signal: &Tensor,
    kernel: &Tensor,
    input_shape: Shape4,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input_shape, kernel, stride, pad)?;
    if signal.shape() != g.output_shape().as_slice() {
        return Err(shape_err!(
            "signal {:?} does not match convolution output {:?}",
            signal.shape(),
            g.output_shape()
        ));
    }
    let Shape4 { batch, channels, height, width } = input_shape;
    let s = signal.data();
    let wt = kernel.data();
    let mut acc = vec![0.0f64; input_shape.len()];
    for n in 0..batch {
        for k in 0..g.out_channels {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let v = s[((n * g.out_channels + k) * g.oh + oy) * g.ow + ox] as f64;
                    if v == 0.0 {
                        continue;
                    }
                    for c in 0..channels {
                        let x_base = (n * channels + c) * height;
                        let w_base = (k * channels + c) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, height) else { continue };
                            let x_row = (x_base + iy) * width;
                            let w_row = (w_base + ky) * g.kw;
                            for kx in 0..g.kw {
                                if let Some(ix) = g.source(ox, kx, width) {
                                    acc[x_row + ix] += v * wt[w_row + kx] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.dims().to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

/// Gradients of a convolution's kernel and bias given the layer input and the
/// gradient at its output.
pub fn conv2d_param_grads(
    input: &Tensor,
    grad_out: &Tensor,
    kernel_shape: Shape4,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let probe = Tensor::zeros(&kernel_shape.dims());
    let g = ConvGeometry::new(input.shape4()?, &probe, stride, pad)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(shape_err!("gradient {:?} vs output {:?}", grad_out.shape(), g.output_shape()));
    }
    let Shape4 { batch, channels, height, width } = g.input;
    let x = input.data();
    let go = grad_out.data();
    let mut dw = vec![0.0f64; kernel_shape.len()];
    let mut db = vec![0.0f64; g.out_channels];
    for n in 0..batch {
        for k in 0..g.out_channels {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let v = go[((n * g.out_channels + k) * g.oh + oy) * g.ow + ox] as f64;
                    db[k] += v;
                    if v == 0.0 {
                        continue;
                    }
                    for c in 0..channels {
                        let x_base = (n * channels + c) * height;
                        let w_base = (k * channels + c) * g.kh;
                        for ky in 0..g.kh {
                            let Some(iy) = g.source(oy, ky, height) else { continue };
                            let x_row = (x_base + iy) * width;
                            let w_row = (w_base + ky) * g.kw;
                            for kx in 0..g.kw {
                                if let Some(ix) = g.source(ox, kx, width) {
                                    dw[w_row + kx] += v * x[x_row + ix] as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(kernel_shape.dims().to_vec(), dw.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![g.out_channels], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

fn dense_dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, f) = match input.shape() {
        &[n, f] => (n, f),
        s => return Err(shape_err!("dense input must be [N,F], got {:?}", s)),
    };
    let (o, wf) = match weight.shape() {
        &[o, wf] => (o, wf),
        s => return Err(shape_err!("dense weight must be [O,F], got {:?}", s)),
    };
    if wf != f {
        return Err(shape_err!("dense weight expects {} features, input has {}", wf, f));
    }
    Ok((n, f, o))
}

/// `input [N,F] · weightᵀ [F,O] + bias`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f, o) = dense_dims(input, weight)?;
    check_bias(bias, o)?;
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        let row = &x[i * f..(i + 1) * f];
        for j in 0..o {
            let mut acc = bias.map_or(0.0, |b| b.data()[j] as f64);
            for (a, b) in row.iter().zip(&w[j * f..(j + 1) * f]) {
                acc += *a as f64 * *b as f64;
            }
            out.push(acc as f32);
        }
    }
    Tensor::new(vec![n, o], out)
}

/// Adjoint of [`dense`] with respect to its input: `signal [N,O] · weight [O,F]`.
pub fn dense_transpose(signal: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (o, f) = match weight.shape() {
        &[o, f] => (o, f),
        s => return Err(shape_err!("dense weight must be [O,F], got {:?}", s)),
    };
    let n = match signal.shape() {
        &[n, so] if so == o => n,
        s => return Err(shape_err!("signal {:?} does not match {} outputs", s, o)),
    };
    let s = signal.data();
    let w = weight.data();
    let mut acc = vec![0.0f64; n * f];
    for i in 0..n {
        for j in 0..o {
            let v = s[i * o + j] as f64;
            if v == 0.0 {
                continue;
            }
            for (a, &b) in acc[i * f..(i + 1) * f].iter_mut().zip(&w[j * f..(j + 1) * f]) {
                *a += v * b as f64;
            }
        }
    }
    Tensor::new(vec![n, f], acc.into_iter().map(|v| v as f32).collect())
}

/// Weight and bias gradients of a dense layer.
pub fn dense_param_grads(input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, f) = match input.shape() {
        &[n, f] => (n, f),
        s => return Err(shape_err!("dense input must be [N,F], got {:?}", s)),
    };
    let o = match grad_out.shape() {
        &[gn, o] if gn == n => o,
        s => return Err(shape_err!("gradient {:?} does not match batch {}", s, n)),
    };
    let x = input.data();
    let g = grad_out.data();
    let mut dw = vec![0.0f64; o * f];
    let mut db = vec![0.0f64; o];
    for i in 0..n {
        for j in 0..o {
            let v = g[i * o + j] as f64;
            db[j] += v;
            for (d, &a) in dw[j * f..(j + 1) * f].iter_mut().zip(&x[i * f..(i + 1) * f]) {
                *d += v * a as f64;
            }
        }
    }
    Ok((
        Tensor::new(vec![o, f], dw.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(vec![o], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Max pooling that also returns, for every output element, the flat input index
/// of its winner. Ties go to the first element in row-major window order.
pub fn max_pool(input: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let Shape4 { batch, channels, height, width } = input.shape4()?;
    let (oh, ow) = conv_output_hw(height, width, size, size, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(batch * channels * oh * ow);
    let mut winners = Vec::with_capacity(out.capacity());
    for plane in 0..batch * channels {
        let base = plane * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * width + ox * stride;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                winners.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![batch, channels, oh, ow], out)?, winners))
}

/// Route `values` (shaped like the pooled output) back to the pooling winners.
pub fn max_pool_scatter(
    values: &Tensor,
    winners: &[usize],
    input_shape: &[usize],
) -> Result<Tensor> {
    if values.len() != winners.len() {
        return Err(shape_err!("{} values for {} pooling windows", values.len(), winners.len()));
    }
    let mut out = Tensor::zeros(input_shape);
    let buf = out.data_mut();
    for (&v, &w) in values.data().iter().zip(winners) {
        buf[w] += v;
    }
    Ok(out)
}

/// Pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Sigmoid,
    Add,
    Mul,
    /// Clip to the non-negative part.
    ClipMin0,
}

#[inline]
pub fn sigmoid(z: f32) -> f32 {
    (1.0 / (1.0 + libm::exp(-(z as f64)))) as f32
}

/// Apply `op`; binary ops take `b` with the same shape as `a`, or a length-C
/// vector broadcast along axis 1 of `a`.
pub fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match op {
        ElementwiseOp::Relu | ElementwiseOp::ClipMin0 => {
            if b.is_some() {
                return Err(shape_err!("{:?} is unary", op));
            }
            Ok(a.map(|x| x.max(0.0)))
        }
        ElementwiseOp::Sigmoid => {
            if b.is_some() {
                return Err(shape_err!("sigmoid is unary"));
            }
            Ok(a.map(sigmoid))
        }
        ElementwiseOp::Add | ElementwiseOp::Mul => {
            let b = b.ok_or_else(|| shape_err!("{:?} needs a second operand", op))?;
            let f = |x: f32, y: f32| if op == ElementwiseOp::Add { x + y } else { x * y };
            if a.shape() == b.shape() {
                return a.zip_map(b, f);
            }
            channel_broadcast(a, b, f)
        }
    }
}

fn channel_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let channels = match (a.shape(), b.shape()) {
        (sa, &[c]) if sa.len() >= 2 && sa[1] == c => c,
        (sa, sb) => return Err(shape_err!("cannot broadcast {:?} against {:?}", sb, sa)),
    };
    let inner: usize = a.shape()[2..].iter().product();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[(i / inner) % channels]))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Reductions over a set of axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    L1Norm,
}

/// Reduce `t` over `axes`; reduced axes are removed from the result shape.
pub fn reduce(op: ReduceOp, t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut reduced = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(shape_err!("axis {} out of range for rank {}", ax, rank));
        }
        if reduced[ax] {
            return Err(shape_err!("axis {} listed twice", ax));
        }
        reduced[ax] = true;
    }
    let out_shape: Vec<usize> =
        t.shape().iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
    let out_len: usize = out_shape.iter().product();
    let count = (t.len() / out_len) as f64;
    let init = if op == ReduceOp::Max { f64::NEG_INFINITY } else { 0.0 };
    let mut acc = vec![init; out_len];

    // strides of the kept axes inside the output
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        if !reduced[ax] {
            out_strides[ax] = s;
            s *= t.shape()[ax];
        }
    }
    let mut index = vec![0usize; rank];
    for &x in t.data() {
        let o: usize = index.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        let x = x as f64;
        match op {
            ReduceOp::Sum | ReduceOp::Mean => acc[o] += x,
            ReduceOp::L1Norm => acc[o] += x.abs(),
            ReduceOp::Max => acc[o] = acc[o].max(x),
        }
        for ax in (0..rank).rev() {
            index[ax] += 1;
            if index[ax] < t.shape()[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    if op == ReduceOp::Mean {
        acc.iter_mut().for_each(|a| *a /= count);
    }
    Tensor::new(out_shape, acc.into_iter().map(|v| v as f32).collect())
}
