//! Audio I/O, spectral analysis, toy speakers, SNR mixing and the
//! ideal-ratio-mask oracle.

mod irm;
mod manifest;
mod spectral;
mod synth;
mod wav;

pub use irm::{irm_masks, irm_separate};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use spectral::{istft, stft, Spectrogram, StftConfig};
pub use synth::{mix_at_snr, power, synth_speaker_source, MixtureSpec, MAX_TOY_SPEAKERS};
pub use wav::{wav_read, wav_write};

/// Default sample rate in Hz.
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

impl AsRef<[f64]> for Waveform {
    fn as_ref(&self) -> &[f64] {
        &self.samples
    }
}
