use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::numerics::dft::{check_stft_input, reflect_pad};
use crate::numerics::{frame_count, hann};

/// Window length and hop of a Hann-windowed STFT.
///
/// Construction rejects settings whose squared window does not overlap-add
/// to a constant, so every accepted configuration reconstructs exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    window_len: usize,
    hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { window_len: 512, hop: 128 }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        check_stft_input(usize::MAX, window_len, hop)?;
        let w = hann(window_len);
        let sums: Vec<f64> = (0..hop)
            .map(|n| (n..window_len).step_by(hop).map(|i| w[i] * w[i]).sum())
            .collect();
        let (lo, hi) = sums.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if lo <= 0.0 || (hi - lo) > 1e-9 * hi {
            return Err(Error::Config(format!(
                "Hann window {window_len} with hop {hop} does not satisfy the overlap-add condition"
            )));
        }
        Ok(StftConfig { window_len, hop })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }
}

/// One-sided complex spectrogram stored frame-major: `bins[frame * F + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: Vec<Complex64>,
    pub frames: usize,
    pub config: StftConfig,
    pub window: Vec<f64>,
    /// Length of the analysed signal, restored by [`istft`].
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn num_bins(&self) -> usize {
        self.config.bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let f = self.num_bins();
        &self.bins[t * f..(t + 1) * f]
    }

    /// Same layout with the given bins (for masking).
    pub fn with_bins(&self, bins: Vec<Complex64>) -> Result<Spectrogram> {
        if bins.len() != self.bins.len() {
            return Err(Error::InvalidInput(format!(
                "spectrogram needs {} bins, got {}",
                self.bins.len(),
                bins.len()
            )));
        }
        Ok(Spectrogram { bins, ..self.clone() })
    }
}

/// Hann-windowed STFT with reflect padding of half a window on both ends.
pub fn stft(x: &Waveform, config: StftConfig) -> Result<Spectrogram> {
    let (wl, hop) = (config.window_len, config.hop);
    check_stft_input(x.len(), wl, hop)?;
    let window = hann(wl);
    let padded = reflect_pad(&x.samples, wl / 2);
    let frames = frame_count(x.len(), hop);
    let fft = FftPlanner::new().plan_fft_forward(wl);
    let f = config.bins();
    let mut bins = Vec::with_capacity(frames * f);
    let mut buf = vec![Complex64::new(0.0, 0.0); wl];
    for t in 0..frames {
        let seg = &padded[t * hop..t * hop + wl];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        bins.extend_from_slice(&buf[..f]);
    }
    Ok(Spectrogram {
        bins,
        frames,
        config,
        window,
        signal_len: x.len(),
        sample_rate: x.sample_rate,
    })
}

/// Weighted overlap-add inverse normalised by the summed squared window.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let (wl, hop) = (s.config.window_len, s.config.hop);
    let f = s.num_bins();
    if s.bins.len() != s.frames * f || s.window.len() != wl {
        return Err(Error::InvalidInput("spectrogram dimensions are inconsistent".into()));
    }
    let pad = wl / 2;
    let total = (s.frames - 1) * hop + wl;
    if total < s.signal_len + pad {
        return Err(Error::InvalidInput(format!(
            "{} frames cannot cover {} samples",
            s.frames, s.signal_len
        )));
    }
    let ifft = FftPlanner::new().plan_fft_inverse(wl);
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); wl];
    for t in 0..s.frames {
        let frame = s.frame(t);
        buf[..f].copy_from_slice(frame);
        // Hermitian extension; the DC and Nyquist imaginary parts do not
        // belong to any real signal and are dropped.
        buf[0].im = 0.0;
        buf[f - 1].im = 0.0;
        for k in f..wl {
            buf[k] = frame[wl - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..wl {
            let w = s.window[n];
            out[start + n] += buf[n].re / wl as f64 * w;
            norm[start + n] += w * w;
        }
    }
    let samples = (pad..pad + s.signal_len)
        .map(|i| if norm[i] > 1e-10 { out[i] / norm[i] } else { 0.0 })
        .collect();
    Ok(Waveform::new(samples, s.sample_rate))
}
