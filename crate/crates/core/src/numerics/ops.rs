//! Differentiable primitives.
//!
//! Every primitive is a pure function of its input tensors (parameters are
//! passed as ordinary inputs) with a hand-written reverse-mode gradient.
//! [`primitive_forward`] and [`primitive_backward`] expose them directly; the
//! [`Tape`](super::Tape) records them to differentiate whole networks.

use std::fmt;

use super::conv;
use super::dft;
use super::gemm::{gemm, Layout};
use super::lstm;
use super::tensor::{dims_string, Tensor};
use crate::error::{Error, Result};

/// Variance below which layer normalization outputs zeros.
pub const LAYER_NORM_ZERO_VAR: f64 = 1e-12;
/// Added to the variance before the square root in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;
/// Added under the square root of complex magnitudes.
pub const COMPLEX_ABS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `x (Cin, T)`, `w (Cout, Cin, K)`, optional `b (Cout)` → `(Cout, T')`.
    Conv1d { stride: usize },
    /// Stride-1 convolution with zero padding: `x (Cin, H, W)`,
    /// `w (Cout, Cin, KH, KW)`, optional `b (Cout)`.
    Conv2d { padding: usize },
    /// Non-overlapping max pooling over `(C, H, W)`; trailing rows/cols dropped.
    MaxPool2d { size: usize },
    /// `(C, H, W)` → `(C)`.
    GlobalAvgPool,
    /// `x (..., In)`, `w (Out, In)`, optional `b (Out)` → `(..., Out)`.
    Linear,
    /// One LSTM step: `x (B, In)`, `h (B, H)`, `c (B, H)`, `w_ih (4H, In)`,
    /// `w_hh (4H, H)`, `b (4H)` → stacked `(2, B, H)` holding `[h', c']`.
    LstmCell,
    /// Bidirectional LSTM over the middle axis of `x (B, T, In)`; takes the
    /// forward `w_ih, w_hh, b` then the backward ones → `(B, T, 2H)`.
    BiLstm,
    /// Normalizes each slice along axis 0 over all remaining axes; optional
    /// gain and bias broadcast along the last axis.
    LayerNorm,
    Softmax { axis: usize },
    /// `x`, `slope (1)`.
    Prelu,
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Log1p,
    /// `(2, ...)` real/imaginary planes → magnitudes `(...)`.
    ComplexAbs,
    /// Hann-windowed STFT of a 1-D signal with reflect padding of
    /// `window_len / 2` → `(2, window_len / 2 + 1, frames)`.
    Stft { window_len: usize, hop: usize },
    Concat { axis: usize },
    Add,
    /// Elementwise product.
    Mul,
    Scale { factor: f64 },
    /// Sum of all elements → `(1)`.
    Sum,
    Reshape { shape: Vec<usize> },
    Transpose { perm: Vec<usize> },
    Narrow { axis: usize, start: usize, len: usize },
    /// `(T, D)` → `(C, K, D)` overlapping chunks with zero padding.
    Segment { chunk_len: usize, hop: usize },
    /// `(C, K, D)` → `(frames, D)` by averaging overlap-add.
    Merge { frames: usize, hop: usize },
    /// `(T, L)` frames → `((T - 1) * stride + L)` samples.
    OverlapAdd { stride: usize },
    /// 1-D zero padding or truncation to `len`.
    FitLength { len: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::LstmCell => "lstm_cell",
            OpKind::BiLstm => "bilstm_layer",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Prelu => "prelu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Log1p => "log1p",
            OpKind::ComplexAbs => "complex_abs",
            OpKind::Stft { .. } => "stft",
            OpKind::Concat { .. } => "concat",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise_mul",
            OpKind::Scale { .. } => "scale",
            OpKind::Sum => "sum",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Transpose { .. } => "transpose",
            OpKind::Narrow { .. } => "narrow",
            OpKind::Segment { .. } => "segment",
            OpKind::Merge { .. } => "merge",
            OpKind::OverlapAdd { .. } => "overlap_add",
            OpKind::FitLength { .. } => "fit_length",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// State kept from the forward pass for the backward pass.
pub(crate) enum Saved {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Lstm(lstm::CellCache),
    BiLstm(Box<[lstm::DirCache; 2]>),
}

/// Evaluates a primitive.
pub fn primitive_forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    forward(kind, inputs).map(|(out, _)| out)
}

/// Exact gradients of `sum(upstream * forward(inputs))` with respect to every input.
pub fn primitive_backward(kind: &OpKind, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    let (out, saved) = forward(kind, inputs)?;
    let needs = vec![true; inputs.len()];
    let grads = backward(kind, inputs, &out, &saved, upstream, &needs)?;
    Ok(grads
        .into_iter()
        .zip(inputs)
        .map(|(g, x)| g.unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
        .collect())
}

fn arity(kind: &OpKind, inputs: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(
            kind.name(),
            format!("expected {allowed:?} inputs, got {}", inputs.len()),
        ))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = kind.name();
    match kind {
        OpKind::Conv1d { stride } => {
            arity(kind, inputs, &[2, 3])?;
            let (y, cols) = conv::conv1d_forward(inputs[0], inputs[1], inputs.get(2).copied(), *stride)?;
            Ok((y, Saved::Cols(cols)))
        }
        OpKind::Conv2d { padding } => {
            arity(kind, inputs, &[2, 3])?;
            let (y, cols) = conv::conv2d_forward(inputs[0], inputs[1], inputs.get(2).copied(), *padding)?;
            Ok((y, Saved::Cols(cols)))
        }
        OpKind::MaxPool2d { size } => {
            arity(kind, inputs, &[1])?;
            let (y, arg) = conv::max_pool2d_forward(inputs[0], *size)?;
            Ok((y, Saved::Argmax(arg)))
        }
        OpKind::GlobalAvgPool => {
            arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.ndim() != 3 {
                return Err(Error::shape(name, format!("expected (C, H, W), got {}", x.dims())));
            }
            let c = x.shape()[0];
            let hw = x.shape()[1] * x.shape()[2];
            let data = x
                .data()
                .chunks(hw)
                .map(|s| s.iter().sum::<f64>() / hw as f64)
                .collect();
            Ok((Tensor::from_parts(vec![c], data), Saved::None))
        }
        OpKind::Linear => {
            arity(kind, inputs, &[2, 3])?;
            Ok((linear_forward(inputs[0], inputs[1], inputs.get(2).copied())?, Saved::None))
        }
        OpKind::LstmCell => {
            arity(kind, inputs, &[6])?;
            let (y, cache) = lstm::cell_forward(inputs)?;
            Ok((y, Saved::Lstm(cache)))
        }
        OpKind::BiLstm => {
            arity(kind, inputs, &[7])?;
            let (y, caches) = lstm::bilstm_forward(inputs)?;
            Ok((y, Saved::BiLstm(Box::new(caches))))
        }
        OpKind::LayerNorm => {
            arity(kind, inputs, &[1, 3])?;
            layer_norm_forward(inputs)
        }
        OpKind::Softmax { axis } => {
            arity(kind, inputs, &[1])?;
            Ok((softmax_forward(inputs[0], *axis)?, Saved::None))
        }
        OpKind::Prelu => {
            arity(kind, inputs, &[2])?;
            if inputs[1].numel() != 1 {
                return Err(Error::shape(name, format!("slope must have one element, got {}", inputs[1].dims())));
            }
            let a = inputs[1].data()[0];
            Ok((inputs[0].map(|x| if x > 0.0 { x } else { a * x }), Saved::None))
        }
        OpKind::Relu => unary(kind, inputs, |x| x.max(0.0)),
        OpKind::Sigmoid => unary(kind, inputs, sigmoid),
        OpKind::Tanh => unary(kind, inputs, f64::tanh),
        OpKind::Log => unary(kind, inputs, f64::ln),
        OpKind::Log1p => unary(kind, inputs, f64::ln_1p),
        OpKind::ComplexAbs => {
            arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.ndim() < 2 || x.shape()[0] != 2 {
                return Err(Error::shape(name, format!("expected leading axis of 2, got {}", x.dims())));
            }
            let half = x.numel() / 2;
            let (re, im) = x.data().split_at(half);
            let data = re
                .iter()
                .zip(im)
                .map(|(r, i)| (r * r + i * i + COMPLEX_ABS_EPS).sqrt())
                .collect();
            Ok((Tensor::from_parts(x.shape()[1..].to_vec(), data), Saved::None))
        }
        OpKind::Stft { window_len, hop } => {
            arity(kind, inputs, &[1])?;
            Ok((dft::stft_forward(inputs[0], *window_len, *hop)?, Saved::None))
        }
        OpKind::Concat { axis } => concat_forward(inputs, *axis).map(|y| (y, Saved::None)),
        OpKind::Add | OpKind::Mul => {
            arity(kind, inputs, &[2])?;
            same_shape(name, inputs[0], inputs[1])?;
            let f: fn(f64, f64) -> f64 = if *kind == OpKind::Add { |a, b| a + b } else { |a, b| a * b };
            let data = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            Ok((Tensor::from_parts(inputs[0].shape().to_vec(), data), Saved::None))
        }
        OpKind::Scale { factor } => {
            let factor = *factor;
            unary(kind, inputs, move |x| x * factor)
        }
        OpKind::Sum => {
            arity(kind, inputs, &[1])?;
            Ok((Tensor::scalar(inputs[0].sum()), Saved::None))
        }
        OpKind::Reshape { shape } => {
            arity(kind, inputs, &[1])?;
            let y = Tensor::new(shape.clone(), inputs[0].data().to_vec()).map_err(|_| {
                Error::shape(name, format!("cannot view {} as {}", inputs[0].dims(), dims_string(shape)))
            })?;
            Ok((y, Saved::None))
        }
        OpKind::Transpose { perm } => {
            arity(kind, inputs, &[1])?;
            Ok((transpose(inputs[0], perm)?, Saved::None))
        }
        OpKind::Narrow { axis, start, len } => {
            arity(kind, inputs, &[1])?;
            Ok((narrow_forward(inputs[0], *axis, *start, *len)?, Saved::None))
        }
        OpKind::Segment { chunk_len, hop } => {
            arity(kind, inputs, &[1])?;
            Ok((segment_forward(inputs[0], *chunk_len, *hop)?, Saved::None))
        }
        OpKind::Merge { frames, hop } => {
            arity(kind, inputs, &[1])?;
            Ok((merge_forward(inputs[0], *frames, *hop)?, Saved::None))
        }
        OpKind::OverlapAdd { stride } => {
            arity(kind, inputs, &[1])?;
            Ok((overlap_add_forward(inputs[0], *stride)?, Saved::None))
        }
        OpKind::FitLength { len } => {
            arity(kind, inputs, &[1])?;
            let x = inputs[0];
            if x.ndim() != 1 || *len == 0 {
                return Err(Error::shape(name, format!("expected 1-D input and len > 0, got {} -> {len}", x.dims())));
            }
            let mut data = vec![0.0; *len];
            let n = x.numel().min(*len);
            data[..n].copy_from_slice(&x.data()[..n]);
            Ok((Tensor::from_parts(vec![*len], data), Saved::None))
        }
    }
}

/// Computes gradients for the inputs flagged in `needs`.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    dy: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    if dy.shape() != out.shape() {
        return Err(Error::shape(
            kind.name(),
            format!("upstream gradient {} does not match output {}", dy.dims(), out.dims()),
        ));
    }
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let like = |i: usize, data: Vec<f64>| Tensor::from_parts(inputs[i].shape().to_vec(), data);
    let zip_map = |a: &[f64], b: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };

    let grads = match kind {
        OpKind::Conv1d { stride } => {
            let Saved::Cols(cols) = saved else { unreachable!() };
            conv::conv1d_backward(inputs, cols, dy, *stride, needs)
        }
        OpKind::Conv2d { padding } => {
            let Saved::Cols(cols) = saved else { unreachable!() };
            conv::conv2d_backward(inputs, cols, dy, *padding, needs)
        }
        OpKind::MaxPool2d { .. } => {
            let Saved::Argmax(arg) = saved else { unreachable!() };
            let mut dx = vec![0.0; inputs[0].numel()];
            for (&src, &g) in arg.iter().zip(dy.data()) {
                dx[src] += g;
            }
            vec![Some(like(0, dx))]
        }
        OpKind::GlobalAvgPool => {
            let x = inputs[0];
            let hw = x.shape()[1] * x.shape()[2];
            let mut dx = Vec::with_capacity(x.numel());
            for &g in dy.data() {
                dx.extend(std::iter::repeat(g / hw as f64).take(hw));
            }
            vec![Some(like(0, dx))]
        }
        OpKind::Linear => linear_backward(inputs, dy, needs),
        OpKind::LstmCell => {
            let Saved::Lstm(cache) = saved else { unreachable!() };
            lstm::cell_backward(inputs, cache, dy, needs)
        }
        OpKind::BiLstm => {
            let Saved::BiLstm(caches) = saved else { unreachable!() };
            lstm::bilstm_backward(inputs, out, caches, dy, needs)
        }
        OpKind::LayerNorm => {
            let Saved::LayerNorm { xhat, inv_std } = saved else { unreachable!() };
            layer_norm_backward(inputs, xhat, inv_std, dy, needs)
        }
        OpKind::Softmax { axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let g = dy.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                    for k in 0..n {
                        let idx = base + k * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![Some(like(0, dx))]
        }
        OpKind::Prelu => {
            let a = inputs[1].data()[0];
            let x = inputs[0].data();
            let dx = zip_map(x, dy.data(), &|x, g| if x > 0.0 { g } else { a * g });
            let da: f64 = x
                .iter()
                .zip(dy.data())
                .filter(|(&x, _)| x <= 0.0)
                .map(|(x, g)| x * g)
                .sum();
            vec![Some(like(0, dx)), Some(like(1, vec![da]))]
        }
        OpKind::Relu => vec![Some(like(0, zip_map(inputs[0].data(), dy.data(), &|x, g| if x > 0.0 { g } else { 0.0 })))],
        OpKind::Sigmoid => vec![Some(like(0, zip_map(out.data(), dy.data(), &|y, g| g * y * (1.0 - y))))],
        OpKind::Tanh => vec![Some(like(0, zip_map(out.data(), dy.data(), &|y, g| g * (1.0 - y * y))))],
        OpKind::Log => vec![Some(like(0, zip_map(inputs[0].data(), dy.data(), &|x, g| g / x)))],
        OpKind::Log1p => vec![Some(like(0, zip_map(inputs[0].data(), dy.data(), &|x, g| g / (1.0 + x))))],
        OpKind::ComplexAbs => {
            let x = inputs[0].data();
            let half = x.len() / 2;
            let mut dx = vec![0.0; x.len()];
            for k in 0..half {
                let scale = dy.data()[k] / out.data()[k];
                dx[k] = scale * x[k];
                dx[half + k] = scale * x[half + k];
            }
            vec![Some(like(0, dx))]
        }
        OpKind::Stft { window_len, hop } => {
            vec![Some(dft::stft_backward(inputs[0], dy, *window_len, *hop))]
        }
        OpKind::Concat { axis } => concat_backward(inputs, dy, *axis),
        OpKind::Add => vec![Some(dy.clone()), Some(dy.clone())],
        OpKind::Mul => vec![
            need(0).then(|| like(0, zip_map(dy.data(), inputs[1].data(), &|g, b| g * b))),
            need(1).then(|| like(1, zip_map(dy.data(), inputs[0].data(), &|g, a| g * a))),
        ],
        OpKind::Scale { factor } => vec![Some(dy.map(|g| g * factor))],
        OpKind::Sum => vec![Some(Tensor::full(inputs[0].shape().to_vec(), dy.data()[0]))],
        OpKind::Reshape { .. } => vec![Some(like(0, dy.data().to_vec()))],
        OpKind::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(transpose(dy, &inv)?)]
        }
        OpKind::Narrow { axis, start, .. } => {
            vec![Some(narrow_backward(inputs[0].shape(), dy, *axis, *start))]
        }
        OpKind::Segment { chunk_len, hop } => {
            vec![Some(segment_backward(inputs[0].shape(), dy, *chunk_len, *hop))]
        }
        OpKind::Merge { frames, hop } => vec![Some(merge_backward(inputs[0].shape(), dy, *frames, *hop))],
        OpKind::OverlapAdd { stride } => {
            let (t, l) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut dx = vec![0.0; t * l];
            for f in 0..t {
                dx[f * l..(f + 1) * l].copy_from_slice(&dy.data()[f * stride..f * stride + l]);
            }
            vec![Some(like(0, dx))]
        }
        OpKind::FitLength { len } => {
            let n = inputs[0].numel();
            let mut dx = vec![0.0; n];
            let m = n.min(*len);
            dx[..m].copy_from_slice(&dy.data()[..m]);
            vec![Some(like(0, dx))]
        }
    };
    Ok(grads)
}

fn unary(kind: &OpKind, inputs: &[&Tensor], f: impl Fn(f64) -> f64) -> Result<(Tensor, Saved)> {
    arity(kind, inputs, &[1])?;
    Ok((inputs[0].map(f), Saved::None))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, n, inner)` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    if w.ndim() != 2 || x.shape().last() != Some(&w.shape()[1]) {
        return Err(Error::shape(
            "linear",
            format!("input {} does not match weight {} (Out, In)", x.dims(), w.dims()),
        ));
    }
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [out_dim] {
            return Err(Error::shape("linear", format!("bias {} for {out_dim} outputs", b.dims())));
        }
    }
    let rows = x.numel() / in_dim;
    let mut y = match b {
        Some(b) => b.data().repeat(rows),
        None => vec![0.0; rows * out_dim],
    };
    gemm(
        1.0,
        x.data(),
        Layout::row_major(rows, in_dim),
        w.data(),
        Layout::transposed(out_dim, in_dim),
        1.0,
        &mut y,
        Layout::row_major(rows, out_dim),
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Ok(Tensor::from_parts(shape, y))
}

fn linear_backward(inputs: &[&Tensor], dy: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / in_dim;
    let mut grads = vec![None, None, None];
    if needs[0] {
        let mut dx = vec![0.0; rows * in_dim];
        gemm(
            1.0,
            dy.data(),
            Layout::row_major(rows, out_dim),
            w.data(),
            Layout::row_major(out_dim, in_dim),
            0.0,
            &mut dx,
            Layout::row_major(rows, in_dim),
        );
        grads[0] = Some(Tensor::from_parts(x.shape().to_vec(), dx));
    }
    if needs[1] {
        let mut dw = vec![0.0; out_dim * in_dim];
        gemm(
            1.0,
            dy.data(),
            Layout::transposed(rows, out_dim),
            x.data(),
            Layout::row_major(rows, in_dim),
            0.0,
            &mut dw,
            Layout::row_major(out_dim, in_dim),
        );
        grads[1] = Some(Tensor::from_parts(w.shape().to_vec(), dw));
    }
    if inputs.len() == 3 && needs[2] {
        let mut db = vec![0.0; out_dim];
        for row in dy.data().chunks(out_dim) {
            for (acc, g) in db.iter_mut().zip(row) {
                *acc += g;
            }
        }
        grads[2] = Some(Tensor::from_parts(vec![out_dim], db));
    }
    grads.truncate(inputs.len());
    grads
}

/// `(groups, group_len, last_dim)` for layer normalization.
fn layer_norm_geometry(x: &Tensor) -> (usize, usize, usize) {
    if x.ndim() == 1 {
        (1, x.numel(), x.numel())
    } else {
        let g = x.shape()[0];
        (g, x.numel() / g, *x.shape().last().unwrap())
    }
}

fn layer_norm_forward(inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let x = inputs[0];
    let (groups, len, d) = layer_norm_geometry(x);
    let affine = inputs.len() == 3;
    if affine && (inputs[1].shape() != [d] || inputs[2].shape() != [d]) {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {} / bias {} must have {d} elements", inputs[1].dims(), inputs[2].dims()),
        ));
    }
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; groups];
    for g in 0..groups {
        let src = &x.data()[g * len..(g + 1) * len];
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        if var < LAYER_NORM_ZERO_VAR {
            continue;
        }
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[g] = inv;
        for (dst, v) in xhat[g * len..(g + 1) * len].iter_mut().zip(src) {
            *dst = (v - mean) * inv;
        }
    }
    let y = if affine {
        let (gain, bias) = (inputs[1].data(), inputs[2].data());
        xhat.iter()
            .enumerate()
            .map(|(i, v)| v * gain[i % d] + bias[i % d])
            .collect()
    } else {
        xhat.clone()
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        Saved::LayerNorm { xhat, inv_std },
    ))
}

fn layer_norm_backward(
    inputs: &[&Tensor],
    xhat: &[f64],
    inv_std: &[f64],
    dy: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let x = inputs[0];
    let (groups, len, d) = layer_norm_geometry(x);
    let affine = inputs.len() == 3;
    let g = dy.data();
    let dxhat: Vec<f64> = if affine {
        let gain = inputs[1].data();
        g.iter().enumerate().map(|(i, v)| v * gain[i % d]).collect()
    } else {
        g.to_vec()
    };
    let mut grads = Vec::with_capacity(inputs.len());
    if needs[0] {
        let mut dx = vec![0.0; x.numel()];
        for grp in 0..groups {
            let inv = inv_std[grp];
            if inv == 0.0 {
                continue;
            }
            let r = grp * len..(grp + 1) * len;
            let (dh, xh) = (&dxhat[r.clone()], &xhat[r.clone()]);
            let sum_dh: f64 = dh.iter().sum();
            let sum_dh_xh: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
            let n = len as f64;
            for ((o, a), b) in dx[r].iter_mut().zip(dh).zip(xh) {
                *o = inv / n * (n * a - sum_dh - b * sum_dh_xh);
            }
        }
        grads.push(Some(Tensor::from_parts(x.shape().to_vec(), dx)));
    } else {
        grads.push(None);
    }
    if affine {
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for (i, (v, h)) in g.iter().zip(xhat).enumerate() {
            dgain[i % d] += v * h;
            dbias[i % d] += v;
        }
        grads.push(Some(Tensor::from_parts(vec![d], dgain)));
        grads.push(Some(Tensor::from_parts(vec![d], dbias)));
    }
    grads
}

fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {}", x.dims())));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut y = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|k| src[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (src[base + k * inner] - max).exp();
                y[base + k * inner] = e;
                total += e;
            }
            for k in 0..n {
                y[base + k * inner] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {}", first.dims())));
    }
    for t in inputs {
        let compatible = t.ndim() == first.ndim()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", format!("{} vs {} along axis {axis}", t.dims(), first.dims())));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total_axis: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Ok(Tensor::from_parts(shape, data))
}

fn concat_backward(inputs: &[&Tensor], dy: &Tensor, axis: usize) -> Vec<Option<Tensor>> {
    let (outer, total, inner) = axis_split(dy.shape(), axis);
    let mut offset = 0;
    inputs
        .iter()
        .map(|t| {
            let block = t.shape()[axis] * inner;
            let mut d = Vec::with_capacity(t.numel());
            for o in 0..outer {
                let start = o * total * inner + offset;
                d.extend_from_slice(&dy.data()[start..start + block]);
            }
            offset += block;
            Some(Tensor::from_parts(t.shape().to_vec(), d))
        })
        .collect()
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("transpose", format!("invalid permutation {perm:?} for {}", x.dims())));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut data = Vec::with_capacity(src.len());
    // The innermost output axis is copied in a tight loop.
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; last];
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.extend((0..inner_len).map(|k| src[base + k * inner_stride]));
        let mut axis = last;
        loop {
            if axis == 0 {
                return Ok(Tensor::from_parts(out_shape, data));
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape(
            "narrow",
            format!("[{start}, {}) along axis {axis} of {}", start + len, x.dims()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[s..s + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

fn narrow_backward(in_shape: &[usize], dy: &Tensor, axis: usize, start: usize) -> Tensor {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let len = dy.shape()[axis];
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        let s = (o * n + start) * inner;
        dx[s..s + len * inner].copy_from_slice(&dy.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Chunk count for `frames` frames: at least two chunks, and enough to cover
/// every frame.
pub fn chunk_count(frames: usize, chunk_len: usize, hop: usize) -> usize {
    let padded = frames.max(chunk_len + hop);
    1 + (padded - chunk_len).div_ceil(hop)
}

fn check_chunking(op: &'static str, chunk_len: usize, hop: usize) -> Result<()> {
    if chunk_len < 2 || hop == 0 || hop > chunk_len {
        return Err(Error::shape(op, format!("invalid chunking K={chunk_len}, hop={hop}")));
    }
    Ok(())
}

fn segment_forward(x: &Tensor, chunk_len: usize, hop: usize) -> Result<Tensor> {
    check_chunking("segment", chunk_len, hop)?;
    if x.ndim() != 2 {
        return Err(Error::shape("segment", format!("expected (T, D), got {}", x.dims())));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let c = chunk_count(t, chunk_len, hop);
    let mut data = vec![0.0; c * chunk_len * d];
    for ci in 0..c {
        for k in 0..chunk_len {
            let frame = ci * hop + k;
            if frame < t {
                let dst = (ci * chunk_len + k) * d;
                data[dst..dst + d].copy_from_slice(&x.data()[frame * d..(frame + 1) * d]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, chunk_len, d], data))
}

fn segment_backward(in_shape: &[usize], dy: &Tensor, chunk_len: usize, hop: usize) -> Tensor {
    let (t, d) = (in_shape[0], in_shape[1]);
    let c = dy.shape()[0];
    let mut dx = vec![0.0; t * d];
    for ci in 0..c {
        for k in 0..chunk_len {
            let frame = ci * hop + k;
            if frame < t {
                let src = (ci * chunk_len + k) * d;
                for (a, b) in dx[frame * d..(frame + 1) * d].iter_mut().zip(&dy.data()[src..src + d]) {
                    *a += b;
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

fn overlap_counts(frames: usize, chunks: usize, chunk_len: usize, hop: usize) -> Vec<f64> {
    let mut count = vec![0.0; frames];
    for ci in 0..chunks {
        for k in 0..chunk_len {
            if let Some(c) = count.get_mut(ci * hop + k) {
                *c += 1.0;
            }
        }
    }
    count
}

fn merge_forward(x: &Tensor, frames: usize, hop: usize) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::shape("merge", format!("expected (C, K, D), got {}", x.dims())));
    }
    let (c, k_len, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c > 1 {
        check_chunking("merge", k_len, hop)?;
    }
    if frames == 0 || frames > (c - 1) * hop + k_len {
        return Err(Error::shape(
            "merge",
            format!("{c} chunks of {k_len} at hop {hop} cannot cover {frames} frames"),
        ));
    }
    let count = overlap_counts(frames, c, k_len, hop);
    let mut y = vec![0.0; frames * d];
    for ci in 0..c {
        for k in 0..k_len {
            let frame = ci * hop + k;
            if frame < frames {
                let src = (ci * k_len + k) * d;
                for (a, b) in y[frame * d..(frame + 1) * d].iter_mut().zip(&x.data()[src..src + d]) {
                    *a += b;
                }
            }
        }
    }
    for (f, row) in y.chunks_mut(d).enumerate() {
        for v in row {
            *v /= count[f];
        }
    }
    Ok(Tensor::from_parts(vec![frames, d], y))
}

fn merge_backward(in_shape: &[usize], dy: &Tensor, frames: usize, hop: usize) -> Tensor {
    let (c, k_len, d) = (in_shape[0], in_shape[1], in_shape[2]);
    let count = overlap_counts(frames, c, k_len, hop);
    let mut dx = vec![0.0; c * k_len * d];
    for ci in 0..c {
        for k in 0..k_len {
            let frame = ci * hop + k;
            if frame < frames {
                let dst = (ci * k_len + k) * d;
                for (a, b) in dx[dst..dst + d].iter_mut().zip(&dy.data()[frame * d..(frame + 1) * d]) {
                    *a = b / count[frame];
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

fn overlap_add_forward(x: &Tensor, stride: usize) -> Result<Tensor> {
    if x.ndim() != 2 || stride == 0 || stride > x.shape()[1] {
        return Err(Error::shape("overlap_add", format!("frames {} at stride {stride}", x.dims())));
    }
    let (t, l) = (x.shape()[0], x.shape()[1]);
    let n = (t - 1) * stride + l;
    let mut y = vec![0.0; n];
    for (f, frame) in x.data().chunks(l).enumerate() {
        for (a, b) in y[f * stride..f * stride + l].iter_mut().zip(frame) {
            *a += b;
        }
    }
    Ok(Tensor::from_parts(vec![n], y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = primitive_forward(&OpKind::Softmax { axis: 0 }, &[&t(&[2], &[0.0, 0.0])]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn prelu_definition() {
        let slope = Tensor::scalar(0.25);
        let y = primitive_forward(&OpKind::Prelu, &[&t(&[2], &[-1.0, 2.0]), &slope]).unwrap();
        assert_eq!(y.data(), &[-0.25, 2.0]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let y = primitive_forward(&OpKind::LayerNorm, &[&t(&[4], &[5.0; 4])]).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
        let g = primitive_backward(&OpKind::LayerNorm, &[&t(&[4], &[5.0; 4])], &t(&[4], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_mul_gradient_is_product_rule() {
        let a = t(&[3], &[1.0, -2.0, 0.5]);
        let b = t(&[3], &[4.0, 3.0, -1.0]);
        let g = t(&[3], &[0.1, 0.2, 0.3]);
        let grads = primitive_backward(&OpKind::Mul, &[&a, &b], &g).unwrap();
        assert_eq!(grads[0].data(), &[0.1 * 4.0, 0.2 * 3.0, 0.3 * -1.0]);
        assert_eq!(grads[1].data(), &[0.1 * 1.0, 0.2 * -2.0, 0.3 * 0.5]);
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // y = W x with W (2x3), x (3)
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let x = t(&[3], &[0.5, -1.0, 2.0]);
        let g = t(&[2], &[1.0, -3.0]);
        let y = primitive_forward(&OpKind::Linear, &[&x, &w]).unwrap();
        assert_eq!(y.data(), &[0.5 - 2.0 + 6.0, -0.5 - 0.5]);
        let grads = primitive_backward(&OpKind::Linear, &[&x, &w], &g).unwrap();
        // grad_x = W^T g
        assert_eq!(grads[0].data(), &[1.0 + 3.0, 2.0 - 1.5, 3.0]);
        // grad_W = g x^T
        assert_eq!(grads[1].data(), &[0.5, -1.0, 2.0, -1.5, 3.0, -6.0]);
    }

    #[test]
    fn shape_errors_name_op_and_dims() {
        let err = primitive_forward(&OpKind::Linear, &[&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![4, 5])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("linear") && err.contains("2x3") && err.contains("4x5"), "{err}");
        let err = primitive_forward(&OpKind::Add, &[&Tensor::zeros(vec![2]), &Tensor::zeros(vec![3])])
            .unwrap_err()
            .to_string();
        assert!(err.contains("add"), "{err}");
        let err = primitive_backward(&OpKind::Tanh, &[&Tensor::zeros(vec![2])], &Tensor::zeros(vec![3]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("tanh") && err.contains("upstream"), "{err}");
    }

    #[test]
    fn transpose_round_trip() {
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let y = transpose(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y.data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
        let back = transpose(&y, &[1, 2, 0]).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_count(4, 4, 2), 2);
        assert_eq!(chunk_count(8, 4, 2), 3);
        assert_eq!(chunk_count(9, 4, 2), 4);
        assert_eq!(chunk_count(999, 50, 25), 39);
    }
}
