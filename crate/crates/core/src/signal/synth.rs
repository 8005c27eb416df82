use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Waveform;
use crate::error::{Error, Result};

/// Number of distinct toy speaker identities; fundamental bands beyond this
/// would start to overlap the formant region.
pub const MAX_TOY_SPEAKERS: usize = 16;

const F0_BASE_HZ: f64 = 80.0;
const F0_SPACING_HZ: f64 = 25.0;
const F0_BAND_HZ: f64 = 15.0;
const TARGET_RMS: f64 = 0.1;

/// Mean square of the samples.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Fundamental-frequency band `[lo, hi]` of a toy speaker.
pub(crate) fn f0_band(speaker_id: usize) -> (f64, f64) {
    let lo = F0_BASE_HZ + F0_SPACING_HZ * speaker_id as f64;
    (lo, lo + F0_BAND_HZ)
}

struct Formant {
    freq: f64,
    bandwidth: f64,
    gain: f64,
}

/// Spectral envelope fixed by the speaker identity alone.
fn speaker_formants(speaker_id: usize) -> Vec<Formant> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + speaker_id as u64);
    let ranges = [(300.0, 850.0), (900.0, 2300.0), (2400.0, 3400.0)];
    ranges
        .iter()
        .enumerate()
        .map(|(j, &(lo, hi))| Formant {
            freq: rng.gen_range(lo..hi),
            bandwidth: rng.gen_range(60.0..160.0),
            gain: rng.gen_range(0.4..1.0) / (1.0 + j as f64),
        })
        .collect()
}

fn envelope(formants: &[Formant], shift: f64, f: f64) -> f64 {
    let peaks: f64 = formants
        .iter()
        .map(|fm| {
            let d = (f - fm.freq * shift) / fm.bandwidth;
            fm.gain / (1.0 + d * d)
        })
        .sum();
    peaks + 0.01
}

/// Deterministic harmonic toy utterance for `(speaker_id, seed)`.
///
/// The fundamental wanders inside a speaker-specific band, harmonics are
/// shaped by speaker-specific formants, and the seed controls the f0
/// trajectory, syllable-rate amplitude modulation, a small formant shift and
/// a low-level noise floor. Output is scaled to an RMS of 0.1.
pub fn synth_speaker_source(speaker_id: usize, duration_s: f64, seed: u64, sample_rate: u32) -> Result<Waveform> {
    if speaker_id >= MAX_TOY_SPEAKERS {
        return Err(Error::InvalidInput(format!(
            "toy speaker id {speaker_id} out of range (at most {MAX_TOY_SPEAKERS} speakers)"
        )));
    }
    if !(duration_s >= 0.5) || sample_rate == 0 {
        return Err(Error::InvalidInput(format!("duration must be at least 0.5 s, got {duration_s}")));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ speaker_id as u64);
    let formants = speaker_formants(speaker_id);
    let (lo, hi) = f0_band(speaker_id);
    let width = hi - lo;
    let vib_rate = rng.gen_range(0.5..2.0);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let am_rate = rng.gen_range(2.5..5.0);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let shift = rng.gen_range(0.97..1.03);
    let noise_level = 0.02;

    let nyquist = sr / 2.0;
    let harmonics = ((0.95 * nyquist) / lo).floor() as usize;
    let block = 32;
    let mut amps = vec![0.0; harmonics];
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = lo + width * (0.5 + 0.4 * (2.0 * PI * vib_rate * t + vib_phase).sin());
        if i % block == 0 {
            for (h, a) in amps.iter_mut().enumerate() {
                let f = (h + 1) as f64 * f0;
                *a = if f < 0.95 * nyquist { envelope(&formants, shift, f) } else { 0.0 };
            }
        }
        phase = (phase + 2.0 * PI * f0 / sr) % (2.0 * PI);
        let voiced: f64 = amps
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum();
        let am = 0.55 + 0.45 * (2.0 * PI * am_rate * t + am_phase).sin();
        out.push(am * voiced + noise_level * rng.gen_range(-1.0..1.0));
    }
    let rms = power(&out).sqrt();
    for v in &mut out {
        *v *= TARGET_RMS / rms;
    }
    Ok(Waveform::new(out, sample_rate))
}

/// Scales `b` so that `a` is `snr_db` above it and returns
/// `(a + g·b, a, g·b)`.
pub fn mix_at_snr(a: &Waveform, b: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform, Waveform)> {
    if a.len() != b.len() || a.sample_rate != b.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sources differ: {} samples @ {} Hz vs {} samples @ {} Hz",
            a.len(),
            a.sample_rate,
            b.len(),
            b.sample_rate
        )));
    }
    let (pa, pb) = (power(&a.samples), power(&b.samples));
    if pa <= 1e-10 || pb <= 1e-10 {
        return Err(Error::InvalidInput(format!(
            "SNR undefined for a silent source (powers {pa:.3e}, {pb:.3e})"
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput(format!("SNR must be finite, got {snr_db}")));
    }
    let g = (pa / (pb * 10f64.powf(snr_db / 10.0))).sqrt();
    let b_scaled: Vec<f64> = b.samples.iter().map(|v| g * v).collect();
    let mix = a.samples.iter().zip(&b_scaled).map(|(x, y)| x + y).collect();
    Ok((
        Waveform::new(mix, a.sample_rate),
        a.clone(),
        Waveform::new(b_scaled, a.sample_rate),
    ))
}

/// Two sources and the SNR at which to mix them.
#[derive(Clone, Debug)]
pub struct MixtureSpec {
    pub source_a: Waveform,
    pub source_b: Waveform,
    pub snr_db: f64,
    pub seed: u64,
}

impl MixtureSpec {
    /// Draws the SNR uniformly from `[snr_lo, snr_hi]` using `seed`.
    pub fn random_snr(source_a: Waveform, source_b: Waveform, snr_lo: f64, snr_hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snr_db = if snr_hi > snr_lo { rng.gen_range(snr_lo..=snr_hi) } else { snr_lo };
        MixtureSpec {
            source_a,
            source_b,
            snr_db,
            seed,
        }
    }

    pub fn mix(&self) -> Result<(Waveform, Waveform, Waveform)> {
        mix_at_snr(&self.source_a, &self.source_b, self.snr_db)
    }
}
