use rustfft::num_complex::Complex64;

use super::spectral::{istft, stft, StftConfig};
use super::Waveform;
use crate::error::{Error, Result};

/// Ideal ratio masks `|X_s| / Σ|X_j|`, frame-major per source; bins where
/// every reference is silent get `1 / S`.
pub fn irm_masks(refs: &[Waveform], config: StftConfig) -> Result<Vec<Vec<f64>>> {
    let Some(first) = refs.first() else {
        return Err(Error::InvalidInput("no reference sources".into()));
    };
    if let Some(r) = refs.iter().find(|r| r.len() != first.len()) {
        return Err(Error::InvalidInput(format!(
            "reference lengths differ: {} vs {}",
            first.len(),
            r.len()
        )));
    }
    let mags: Vec<Vec<f64>> = refs
        .iter()
        .map(|r| Ok(stft(r, config)?.bins.iter().map(|c| c.norm()).collect()))
        .collect::<Result<_>>()?;
    let s = refs.len();
    let bins = mags[0].len();
    let mut masks = vec![vec![0.0; bins]; s];
    for i in 0..bins {
        let total: f64 = mags.iter().map(|m| m[i]).sum();
        for (mask, mag) in masks.iter_mut().zip(&mags) {
            mask[i] = if total > 0.0 { mag[i] / total } else { 1.0 / s as f64 };
        }
    }
    Ok(masks)
}

/// Oracle separation: each reference's ratio mask applied to the mixture
/// spectrum (mixture phase kept), then inverted.
pub fn irm_separate(mixture: &Waveform, refs: &[Waveform], config: StftConfig) -> Result<Vec<Waveform>> {
    if let Some(r) = refs.iter().find(|r| r.len() != mixture.len()) {
        return Err(Error::InvalidInput(format!(
            "reference has {} samples, mixture has {}",
            r.len(),
            mixture.len()
        )));
    }
    let masks = irm_masks(refs, config)?;
    let y = stft(mixture, config)?;
    masks
        .iter()
        .map(|m| {
            let bins: Vec<Complex64> = y.bins.iter().zip(m).map(|(c, &g)| c * g).collect();
            istft(&y.with_bins(bins)?)
        })
        .collect()
}
