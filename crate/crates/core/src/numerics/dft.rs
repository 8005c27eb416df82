//! Differentiable short-time Fourier transform.
//!
//! The transform is a GEMM against a cached windowed DFT basis, which makes
//! the backward pass the transposed product followed by an adjoint of the
//! framing and reflect padding.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use super::gemm::{gemm, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Source index in `x` of padded index `p` under reflect padding by `pad`
/// (edge sample not repeated).
#[inline]
pub(crate) fn reflect_index(p: usize, pad: usize, len: usize) -> usize {
    if p < pad {
        pad - p
    } else if p < pad + len {
        p - pad
    } else {
        2 * len - 2 - (p - pad)
    }
}

pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    (0..x.len() + 2 * pad)
        .map(|p| x[reflect_index(p, pad, x.len())])
        .collect()
}

/// Number of frames for a signal of `len` samples after padding
/// `window_len / 2` on both ends: `1 + (len + window_len - window_len) / hop`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

pub(crate) fn check_stft_input(len: usize, window_len: usize, hop: usize) -> Result<()> {
    if window_len < 2 || !window_len.is_power_of_two() {
        return Err(Error::Config(format!("STFT window length {window_len} must be a power of two")));
    }
    if hop == 0 || window_len % hop != 0 {
        return Err(Error::Config(format!("STFT hop {hop} must divide window length {window_len}")));
    }
    if len <= window_len / 2 {
        return Err(Error::InvalidInput(format!(
            "signal of {len} samples is shorter than half a window ({}) and cannot be reflect-padded",
            window_len / 2 + 1
        )));
    }
    Ok(())
}

/// `(window_len x 2F)` basis `[w·cos | -w·sin]`.
fn basis(window_len: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(window_len)
        .or_insert_with(|| {
            let bins = window_len / 2 + 1;
            let w = hann(window_len);
            let mut b = vec![0.0; window_len * 2 * bins];
            for n in 0..window_len {
                for k in 0..bins {
                    let phase = 2.0 * PI * ((k * n) % window_len) as f64 / window_len as f64;
                    b[n * 2 * bins + k] = w[n] * phase.cos();
                    b[n * 2 * bins + bins + k] = -w[n] * phase.sin();
                }
            }
            Arc::new(b)
        })
        .clone()
}

pub(crate) fn stft_forward(x: &Tensor, window_len: usize, hop: usize) -> Result<Tensor> {
    if x.ndim() != 1 {
        return Err(Error::shape("stft", format!("expected a 1-D signal, got {}", x.dims())));
    }
    check_stft_input(x.numel(), window_len, hop).map_err(|e| Error::shape("stft", e.to_string()))?;
    let padded = reflect_pad(x.data(), window_len / 2);
    let frames = frame_count(x.numel(), hop);
    let bins = window_len / 2 + 1;
    let b = basis(window_len);
    let mut out = vec![0.0; 2 * bins * frames];
    // out (2F x frames) = basis^T (2F x N) * frames^T (N x frames)
    gemm(
        1.0,
        &b,
        Layout::transposed(window_len, 2 * bins),
        &padded,
        Layout { rows: window_len, cols: frames, row_stride: 1, col_stride: hop },
        0.0,
        &mut out,
        Layout::row_major(2 * bins, frames),
    );
    Ok(Tensor::from_parts(vec![2, bins, frames], out))
}

pub(crate) fn stft_backward(x: &Tensor, dy: &Tensor, window_len: usize, hop: usize) -> Tensor {
    let len = x.numel();
    let pad = window_len / 2;
    let bins = window_len / 2 + 1;
    let frames = dy.shape()[2];
    let b = basis(window_len);
    let mut dframes = vec![0.0; window_len * frames];
    gemm(
        1.0,
        &b,
        Layout::row_major(window_len, 2 * bins),
        dy.data(),
        Layout::row_major(2 * bins, frames),
        0.0,
        &mut dframes,
        Layout::row_major(window_len, frames),
    );
    let mut dx = vec![0.0; len];
    for n in 0..window_len {
        for f in 0..frames {
            dx[reflect_index(f * hop + n, pad, len)] += dframes[n * frames + f];
        }
    }
    Tensor::from_parts(vec![len], dx)
}
