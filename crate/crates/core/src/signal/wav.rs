use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

/// Reads a 16-bit PCM mono WAV file into samples in [-1, 1).
pub fn wav_read(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| Error::io(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::io(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::io(
            path,
            format!(
                "unsupported encoding: {} bits {:?}, expected 16-bit PCM",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / FULL_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::io(path, format!("truncated or corrupt sample data: {e}")))?;
    if samples.is_empty() {
        return Err(Error::io(path, "file contains no samples"));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono, clamping samples to [-1, 1].
pub fn wav_write(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if wave.sample_rate == 0 {
        return Err(Error::InvalidInput("sample rate must be positive".into()));
    }
    if wave.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("{}: refusing to write non-finite samples", path.display())));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| Error::io(path, e))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * FULL_SCALE).round().clamp(-FULL_SCALE, FULL_SCALE - 1.0) as i16;
        writer.write_sample(q).map_err(|e| Error::io(path, e))?;
    }
    writer.finalize().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sine_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let x: Vec<f64> = (0..8000).map(|n| 0.9 * (2.0 * PI * 440.0 * n as f64 / 8000.0).sin()).collect();
        wav_write(&path, &Waveform::new(x.clone(), 8000)).unwrap();
        let y = wav_read(&path).unwrap();
        assert_eq!(y.sample_rate, 8000);
        let err = x.iter().zip(&y.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 2f64.powi(-15), "{err}");
    }

    #[test]
    fn full_scale_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        wav_write(&path, &Waveform::new(vec![1.0, -1.0, 3.0, -3.0], 8000)).unwrap();
        let y = wav_read(&path).unwrap();
        assert_eq!(y.samples, vec![32767.0 / 32768.0, -1.0, 32767.0 / 32768.0, -1.0]);
    }
}
