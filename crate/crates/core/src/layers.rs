//! Layer definitions and their forward computations.
//!
//! Image tensors are laid out `[height, width, channels]`; convolution
//! kernels are `[kh, kw, cin, cout]` and dense weights `[in, out]`, all row-major.
//! Accumulation order is fixed (kernel rows, kernel columns, input channels)
//! so outputs are reproducible bit for bit.

use crate::model::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{element_count, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding, output extent `ceil(in / stride)`, padding split
    /// floor before / ceil after.
    Same,
}

/// Activation fused into a Conv2D or Dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    /// Only valid on Dense layers (rank-1 output).
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    Conv2D {
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    MaxPool2D {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Dense {
        weights: Tensor<T>,
        bias: Tensor<T>,
        activation: Activation,
    },
    Relu,
    PRelu {
        alpha: Tensor<T>,
    },
    Softmax,
    Flatten,
    /// Inference-mode dropout; `rate` is kept only for the manifest.
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T> {
    pub name: String,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn new(name: impl Into<String>, kind: LayerKind<T>) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::MaxPool2D { .. } => "max_pool2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Relu => "relu",
            LayerKind::PRelu { .. } => "prelu",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
            LayerKind::Dropout { .. } => "dropout",
        }
    }

    /// Layers whose output carries exactly the input's values in the same
    /// row-major order.
    pub fn is_pass_through(&self) -> bool {
        matches!(self.kind, LayerKind::Flatten | LayerKind::Dropout { .. })
    }

    fn invalid(&self, reason: impl Into<String>) -> ModelError {
        ModelError::InvalidLayer {
            layer: self.name.clone(),
            reason: reason.into(),
        }
    }

    fn input_mismatch(&self, expected: impl Into<String>, found: &[usize]) -> ModelError {
        ModelError::InputShape {
            layer: self.name.clone(),
            expected: expected.into(),
            found: found.to_vec(),
        }
    }

    /// Output shape for a given input shape, validating parameters on the way.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, ModelError> {
        match &self.kind {
            LayerKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
                activation,
            } => {
                let &[h, w, cin] = input else {
                    return Err(self.input_mismatch("[height, width, channels]", input));
                };
                let &[kh, kw, kcin, cout] = kernel.shape() else {
                    return Err(self.invalid(format!(
                        "kernel must be rank-4 [kh, kw, cin, cout], got {:?}",
                        kernel.shape()
                    )));
                };
                if kcin != cin {
                    return Err(self.input_mismatch(format!("[_, _, {kcin}]"), input));
                }
                if bias.shape() != [cout] {
                    return Err(self.invalid(format!(
                        "bias shape {:?} does not match {cout} output channels",
                        bias.shape()
                    )));
                }
                if stride.0 == 0 || stride.1 == 0 {
                    return Err(self.invalid("stride must be positive"));
                }
                if *activation == Activation::Softmax {
                    return Err(self.invalid("softmax activation is only supported on dense layers"));
                }
                let oh = spatial_extent(h, kh, stride.0, *padding)
                    .ok_or_else(|| self.input_mismatch(format!("height >= {kh}"), input))?;
                let ow = spatial_extent(w, kw, stride.1, *padding)
                    .ok_or_else(|| self.input_mismatch(format!("width >= {kw}"), input))?;
                Ok(vec![oh.0, ow.0, cout])
            }
            LayerKind::MaxPool2D { window, stride } => {
                let &[h, w, c] = input else {
                    return Err(self.input_mismatch("[height, width, channels]", input));
                };
                if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err(self.invalid("pool window and stride must be positive"));
                }
                let oh = spatial_extent(h, window.0, stride.0, Padding::Valid)
                    .ok_or_else(|| self.input_mismatch(format!("height >= {}", window.0), input))?;
                let ow = spatial_extent(w, window.1, stride.1, Padding::Valid)
                    .ok_or_else(|| self.input_mismatch(format!("width >= {}", window.1), input))?;
                Ok(vec![oh.0, ow.0, c])
            }
            LayerKind::Dense {
                weights,
                bias,
                activation: _,
            } => {
                let &[n_in, n_out] = weights.shape() else {
                    return Err(self.invalid(format!(
                        "weights must be rank-2 [in, out], got {:?}",
                        weights.shape()
                    )));
                };
                if input != [n_in] {
                    return Err(self.input_mismatch(format!("[{n_in}]"), input));
                }
                if bias.shape() != [n_out] {
                    return Err(self.invalid(format!(
                        "bias shape {:?} does not match {n_out} outputs",
                        bias.shape()
                    )));
                }
                Ok(vec![n_out])
            }
            LayerKind::PRelu { alpha } => {
                broadcast_offsets(input, alpha.shape()).map_err(|_| {
                    ModelError::Broadcast {
                        layer: self.name.clone(),
                        alpha: alpha.shape().to_vec(),
                        input: input.to_vec(),
                    }
                })?;
                Ok(input.to_vec())
            }
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(self.input_mismatch("rank-1 scores", input));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Flatten => Ok(vec![element_count(input)]),
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(self.invalid(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Output extent and leading pad for one spatial axis; `None` if a valid
/// window does not fit.
fn spatial_extent(input: usize, window: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < window {
                None
            } else {
                Some(((input - window) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

/// For each element of `input_shape`, the offset of the broadcast operand
/// element it pairs with (numpy-style right alignment).
pub(crate) fn broadcast_offsets(input_shape: &[usize], operand_shape: &[usize]) -> Result<Vec<usize>, ()> {
    if operand_shape.len() > input_shape.len() {
        return Err(());
    }
    let lead = input_shape.len() - operand_shape.len();
    // Strides of the operand mapped onto input axes; 0 where broadcast.
    let mut strides = vec![0usize; input_shape.len()];
    let mut acc = 1usize;
    for (i, &d) in operand_shape.iter().enumerate().rev() {
        let target = input_shape[lead + i];
        if d != target && d != 1 {
            return Err(());
        }
        if d != 1 {
            strides[lead + i] = acc;
        }
        acc *= d;
    }
    let n = element_count(input_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut index = vec![0usize; input_shape.len()];
    for _ in 0..n {
        offsets.push(index.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..index.len()).rev() {
            index[axis] += 1;
            if index[axis] < input_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    Ok(offsets)
}

#[inline]
pub(crate) fn relu_scalar<T: Scalar>(x: T) -> T {
    // NaN must propagate: `x > 0` is false for NaN, so test it explicitly.
    if x > T::zero() || x.is_nan() {
        x
    } else {
        T::zero()
    }
}

/// Elementwise `max(0, x)` with NaN propagation.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(relu_scalar)
}

/// Maximum that returns NaN as soon as any element is NaN.
pub(crate) fn nan_max<T: Scalar>(values: impl IntoIterator<Item = T>) -> Option<T> {
    let mut best: Option<T> = None;
    for v in values {
        if v.is_nan() {
            return Some(v);
        }
        best = Some(match best {
            Some(b) if b >= v => b,
            _ => v,
        });
    }
    best
}

/// Parametric ReLU, evaluated in the branch structure of the TensorFlow
/// graph: `relu(x) + (alpha * (x - |x|)) * 0.5`.
///
/// [`crate::microops::expand_prelu`] emits the same dataflow as separate
/// operations, so both routes agree bit for bit.
pub fn prelu<T: Scalar>(input: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let offsets = broadcast_offsets(input.shape(), alpha.shape()).map_err(|_| ModelError::Broadcast {
        layer: "prelu".into(),
        alpha: alpha.shape().to_vec(),
        input: input.shape().to_vec(),
    })?;
    Ok(prelu_with_offsets(input, alpha, &offsets))
}

fn prelu_with_offsets<T: Scalar>(input: &Tensor<T>, alpha: &Tensor<T>, offsets: &[usize]) -> Tensor<T> {
    let half = T::from_f64(0.5).unwrap();
    let a = alpha.data();
    let data = input
        .data()
        .iter()
        .zip(offsets)
        .map(|(&x, &off)| relu_scalar(x) + (a[off] * (x - x.abs())) * half)
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Softmax over a rank-1 tensor with max subtraction. Any NaN input makes
/// the whole output NaN.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let max = nan_max(input.data().iter().copied()).unwrap_or_else(T::zero);
    let exps: Vec<T> = input.data().iter().map(|&x| (x - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
    let data = exps.into_iter().map(|e| e / sum).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let n = input.len();
    input.clone().reshape(vec![n]).expect("element count preserved")
}

pub fn dropout_inference<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.clone()
}

fn apply_activation<T: Scalar>(out: Tensor<T>, activation: Activation) -> Tensor<T> {
    match activation {
        Activation::Linear => out,
        Activation::Relu => relu(&out),
        Activation::Softmax => softmax(&out),
    }
}

/// Geometry of one convolution, shared by the full and partial evaluators.
struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ow: usize,
    stride: (usize, usize),
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input_shape: &[usize], kernel_shape: &[usize], stride: (usize, usize), padding: Padding, out_shape: &[usize]) -> Self {
        let (h, w) = (input_shape[0], input_shape[1]);
        let (kh, kw) = (kernel_shape[0], kernel_shape[1]);
        Self {
            h,
            w,
            cin: input_shape[2],
            kh,
            kw,
            cout: kernel_shape[3],
            ow: out_shape[1],
            stride,
            pad_top: spatial_extent(h, kh, stride.0, padding).unwrap().1,
            pad_left: spatial_extent(w, kw, stride.1, padding).unwrap().1,
        }
    }

    /// Writes the `cout` outputs of pixel `(oy, ox)` into `out`, bias included.
    fn pixel<T: Scalar>(&self, x: &[T], k: &[T], b: &[T], oy: usize, ox: usize, out: &mut [T]) {
        let cout = self.cout;
        out.fill(T::zero());
        for ky in 0..self.kh {
            let iy = (oy * self.stride.0 + ky) as isize - self.pad_top as isize;
            if iy < 0 || iy >= self.h as isize {
                continue;
            }
            for kx in 0..self.kw {
                let ix = (ox * self.stride.1 + kx) as isize - self.pad_left as isize;
                if ix < 0 || ix >= self.w as isize {
                    continue;
                }
                let pixel = &x[(iy as usize * self.w + ix as usize) * self.cin..][..self.cin];
                let taps = &k[(ky * self.kw + kx) * self.cin * cout..][..self.cin * cout];
                for (ci, &xv) in pixel.iter().enumerate() {
                    let row = &taps[ci * cout..][..cout];
                    for (a, &wv) in out.iter_mut().zip(row) {
                        *a = *a + xv * wv;
                    }
                }
            }
        }
        for (a, &bv) in out.iter_mut().zip(b) {
            *a = *a + bv;
        }
    }

    /// Output pixels whose receptive field covers input pixel `(iy, ix)`,
    /// as inclusive `(row range, column range)`.
    fn affected(&self, iy: usize, ix: usize, oh: usize) -> Option<((usize, usize), (usize, usize))> {
        let axis = |i: usize, pad: usize, window: usize, stride: usize, extent: usize| {
            // oy * stride - pad <= i <= oy * stride - pad + window - 1
            let hi = (i + pad) / stride;
            let lo = (i + pad + 1).saturating_sub(window).div_ceil(stride);
            let hi = hi.min(extent.checked_sub(1)?);
            (lo <= hi).then_some((lo, hi))
        };
        Some((
            axis(iy, self.pad_top, self.kh, self.stride.0, oh)?,
            axis(ix, self.pad_left, self.kw, self.stride.1, self.ow)?,
        ))
    }
}

fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
    padding: Padding,
    out_shape: &[usize],
) -> Tensor<T> {
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, out_shape);
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![T::zero(); element_count(out_shape)];
    for (p, chunk) in out.chunks_exact_mut(geom.cout).enumerate() {
        geom.pixel(x, k, b, p / geom.ow, p % geom.ow, chunk);
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn pool_element<T: Scalar>(input: &Tensor<T>, window: (usize, usize), stride: (usize, usize), oy: usize, ox: usize, ch: usize) -> T {
    let (w, c) = (input.shape()[1], input.shape()[2]);
    let x = input.data();
    let values = (0..window.0).flat_map(|dy| {
        (0..window.1).map(move |dx| x[((oy * stride.0 + dy) * w + ox * stride.1 + dx) * c + ch])
    });
    nan_max(values).expect("non-empty window")
}

fn max_pool2d<T: Scalar>(input: &Tensor<T>, window: (usize, usize), stride: (usize, usize), out_shape: &[usize]) -> Tensor<T> {
    let (oh, ow, c) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                out.push(pool_element(input, window, stride, oy, ox, ch));
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("pool output shape")
}

fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n_out = weights.shape()[1];
    let wdata = weights.data();
    let mut acc = vec![T::zero(); n_out];
    for (i, &xv) in input.data().iter().enumerate() {
        let row = &wdata[i * n_out..][..n_out];
        for (a, &wv) in acc.iter_mut().zip(row) {
            *a = *a + xv * wv;
        }
    }
    let out = acc.into_iter().zip(bias.data()).map(|(a, &bv)| a + bv).collect();
    Tensor::new(vec![n_out], out).expect("dense output shape")
}

/// Runs one layer. Fails if `input` does not have the shape the layer accepts.
pub fn forward_layer<T: Scalar>(layer: &LayerSpec<T>, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let out_shape = layer.output_shape(input.shape())?;
    Ok(match &layer.kind {
        LayerKind::Conv2D {
            kernel,
            bias,
            stride,
            padding,
            activation,
        } => apply_activation(conv2d(input, kernel, bias, *stride, *padding, &out_shape), *activation),
        LayerKind::MaxPool2D { window, stride } => max_pool2d(input, *window, *stride, &out_shape),
        LayerKind::Dense {
            weights,
            bias,
            activation,
        } => apply_activation(dense(input, weights, bias), *activation),
        LayerKind::Relu => relu(input),
        LayerKind::PRelu { alpha } => prelu(input, alpha).map_err(|e| match e {
            ModelError::Broadcast { alpha, input, .. } => ModelError::Broadcast {
                layer: layer.name.clone(),
                alpha,
                input,
            },
            other => other,
        })?,
        LayerKind::Softmax => softmax(input),
        LayerKind::Flatten => flatten(input),
        LayerKind::Dropout { .. } => dropout_inference(input),
    })
}

fn differing<T: Scalar>(out: &Tensor<T>, reference: &Tensor<T>, candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let (o, r) = (out.data(), reference.data());
    candidates.filter(|&i| o[i].to_word() != r[i].to_word()).collect()
}

/// Evaluates `layer` on `input` given that `input` differs from the input
/// that produced `reference` only at the flat positions in `changed`.
///
/// Convolutions and pools recompute just the outputs whose window touches a
/// changed position; the arithmetic is the same as [`forward_layer`], so the
/// result is bit-identical to a full evaluation. Also returns the positions
/// where the output differs bitwise from `reference`.
pub(crate) fn forward_layer_delta<T: Scalar>(
    layer: &LayerSpec<T>,
    input: &Tensor<T>,
    changed: &[usize],
    reference: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<usize>), ModelError> {
    match &layer.kind {
        LayerKind::Conv2D {
            kernel,
            bias,
            stride,
            padding,
            activation: activation @ (Activation::Linear | Activation::Relu),
        } => {
            let out_shape = reference.shape();
            let geom = ConvGeometry::new(input.shape(), kernel.shape(), *stride, *padding, out_shape);
            let oh = out_shape[0];
            let mut marked = vec![false; oh * geom.ow];
            for &i in changed {
                let pixel = i / geom.cin;
                if let Some(((y0, y1), (x0, x1))) = geom.affected(pixel / geom.w, pixel % geom.w, oh) {
                    for oy in y0..=y1 {
                        marked[oy * geom.ow + x0..=oy * geom.ow + x1].fill(true);
                    }
                }
            }
            let mut out = reference.clone();
            let (x, k, b) = (input.data(), kernel.data(), bias.data());
            let data = out.data_mut();
            for (p, _) in marked.iter().enumerate().filter(|(_, &m)| m) {
                let slot = &mut data[p * geom.cout..][..geom.cout];
                geom.pixel(x, k, b, p / geom.ow, p % geom.ow, slot);
                if *activation == Activation::Relu {
                    slot.iter_mut().for_each(|v| *v = relu_scalar(*v));
                }
            }
            let cout = geom.cout;
            let touched = marked
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .flat_map(|(p, _)| p * cout..(p + 1) * cout);
            let diff = differing(&out, reference, touched);
            Ok((out, diff))
        }
        LayerKind::MaxPool2D { window, stride } => {
            let (w, c) = (input.shape()[1], input.shape()[2]);
            let (oh, ow) = (reference.shape()[0], reference.shape()[1]);
            let mut marked = vec![false; reference.len()];
            for &i in changed {
                let (pixel, ch) = (i / c, i % c);
                let (iy, ix) = (pixel / w, pixel % w);
                let span = |i: usize, win: usize, s: usize, extent: usize| {
                    let lo = (i + 1).saturating_sub(win).div_ceil(s);
                    let hi = (i / s).min(extent - 1);
                    lo..=hi
                };
                for oy in span(iy, window.0, stride.0, oh) {
                    for ox in span(ix, window.1, stride.1, ow) {
                        marked[(oy * ow + ox) * c + ch] = true;
                    }
                }
            }
            let mut out = reference.clone();
            let data = out.data_mut();
            for (j, _) in marked.iter().enumerate().filter(|(_, &m)| m) {
                let (pixel, ch) = (j / c, j % c);
                data[j] = pool_element(input, *window, *stride, pixel / ow, pixel % ow, ch);
            }
            let touched = marked.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j);
            let diff = differing(&out, reference, touched);
            Ok((out, diff))
        }
        _ => {
            let out = forward_layer(layer, input)?;
            let diff = differing(&out, reference, 0..out.len());
            Ok((out, diff))
        }
    }
}
