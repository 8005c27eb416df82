use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{
    mix_at_snr, power, synth_speaker_source, wav_read, wav_write, write_manifest, ManifestRecord, Waveform,
    DEFAULT_SAMPLE_RATE, MAX_TOY_SPEAKERS,
};

/// Corpus splits in manifest order.
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Peak level that written mixtures are kept under.
const MAX_PEAK: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub speakers: usize,
    /// Training utterances per speaker; each mixture uses two.
    pub utts_per: usize,
    pub dur_s: f64,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Explicit mixture counts per split; by default the training split has
    /// `speakers · utts_per / 2` mixtures and the others a quarter of that.
    pub counts: Option<[usize; 3]>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            speakers: 8,
            utts_per: 25,
            dur_s: 1.0,
            snr_lo: 0.0,
            snr_hi: 5.0,
            seed: 0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            counts: None,
        }
    }
}

impl SynthOptions {
    pub fn split_counts(&self) -> [usize; 3] {
        self.counts.unwrap_or_else(|| {
            let train = (self.speakers * self.utts_per).div_ceil(2).max(1);
            let held = train.div_ceil(4);
            [train, held, held]
        })
    }

    fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::InvalidInput(format!(
                "mixtures need at least 2 speakers, got {}",
                self.speakers
            )));
        }
        if !(self.snr_lo <= self.snr_hi) || !self.snr_lo.is_finite() || !self.snr_hi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "invalid SNR range [{}, {}]",
                self.snr_lo, self.snr_hi
            )));
        }
        if !(self.dur_s > 0.0) {
            return Err(Error::InvalidInput(format!("duration must be positive, got {}", self.dur_s)));
        }
        Ok(())
    }
}

/// Paths of the three manifests and the number of mixtures in each.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub manifests: [PathBuf; 3],
    pub counts: [usize; 3],
}

/// SplitMix64 finaliser; derives independent seeds from structured keys.
fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn split_seed(seed: u64, split: usize, item: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(seed) ^ split as u64) ^ item)
}

fn draw_snr(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Mixes at the SNR, rescales all three signals together if the mixture
/// would clip, writes `split/{mix,s1,s2}/id.wav` and returns the record.
fn write_mixture(
    out: &Path,
    split: &str,
    id: &str,
    a: &Waveform,
    b: &Waveform,
    snr_db: f64,
    speakers: [String; 2],
) -> Result<ManifestRecord> {
    let (mix, s1, s2) = mix_at_snr(a, b, snr_db)?;
    let peak = [&mix, &s1, &s2]
        .iter()
        .flat_map(|w| w.samples.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > MAX_PEAK { MAX_PEAK / peak } else { 1.0 };
    let scale = |w: &Waveform| Waveform::new(w.samples.iter().map(|v| v * g).collect(), w.sample_rate);
    let mut paths = Vec::with_capacity(3);
    for (dir, wave) in [("mix", &mix), ("s1", &s1), ("s2", &s2)] {
        let d = out.join(split).join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        let p = d.join(format!("{id}.wav"));
        wav_write(&p, &scale(wave))?;
        paths.push(p);
    }
    let mix_path = paths.remove(0);
    Ok(ManifestRecord {
        mix: mix_path,
        sources: [paths.remove(0), paths.remove(0)],
        snr_db,
        speakers,
    })
}

fn write_manifests(out: &Path, records: [Vec<ManifestRecord>; 3]) -> Result<CorpusSummary> {
    let mut manifests: [PathBuf; 3] = Default::default();
    let mut counts = [0; 3];
    for (k, recs) in records.iter().enumerate() {
        manifests[k] = out.join(format!("{}.tsv", SPLITS[k]));
        counts[k] = recs.len();
        write_manifest(&manifests[k], recs)?;
    }
    Ok(CorpusSummary { manifests, counts })
}

/// Toy speaker name for a synthetic speaker id.
pub fn toy_speaker_name(id: usize) -> String {
    format!("toy{id:02}")
}

/// Writes a two-speaker toy corpus. Every source utterance is generated
/// from its own seed, and the seeds of the development and test splits
/// never occur in training, so the splits share no utterances. Training
/// mixtures rotate the first speaker so every speaker is covered evenly.
pub fn synth_corpus(opts: &SynthOptions, out: impl AsRef<Path>) -> Result<CorpusSummary> {
    opts.validate()?;
    if opts.speakers > MAX_TOY_SPEAKERS {
        return Err(Error::InvalidInput(format!(
            "at most {MAX_TOY_SPEAKERS} toy speakers are available, asked for {}",
            opts.speakers
        )));
    }
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut all: [Vec<ManifestRecord>; 3] = Default::default();
    for (k, count) in opts.split_counts().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, k, u64::MAX));
        for j in 0..count {
            let a = j % opts.speakers;
            let b = (a + 1 + rng.gen_range(0..opts.speakers - 1)) % opts.speakers;
            let snr = draw_snr(&mut rng, opts.snr_lo, opts.snr_hi);
            let src = |spk: usize, slot: u64| {
                synth_speaker_source(spk, opts.dur_s, split_seed(opts.seed, k, 2 * j as u64 + slot), opts.sample_rate)
            };
            let (wa, wb) = (src(a, 0)?, src(b, 1)?);
            let (na, nb) = (toy_speaker_name(a), toy_speaker_name(b));
            let id = format!("{}{j:05}_{na}_{nb}", SPLITS[k]);
            all[k].push(write_mixture(out, SPLITS[k], &id, &wa, &wb, snr, [na, nb])?);
        }
    }
    write_manifests(out, all)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Builds a corpus from `dir/<speaker>/*.wav`: files are cut into
/// `dur_s` pieces (remainders and silent pieces dropped), every tenth
/// piece of a speaker goes to development and the next to test, and each
/// split's pieces are shuffled and greedily paired across speakers.
pub fn corpus_from_wavs(dir: impl AsRef<Path>, opts: &SynthOptions, out: impl AsRef<Path>) -> Result<CorpusSummary> {
    opts.validate().or_else(|e| match e {
        Error::InvalidInput(m) if m.contains("speakers") => Ok(()),
        other => Err(other),
    })?;
    let dir = dir.as_ref();
    let mut pools: [Vec<(String, Waveform)>; 3] = Default::default();
    let mut rate: Option<u32> = None;
    let mut speaker_count = 0;
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = sub.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut piece_idx = 0usize;
        for file in sorted_entries(&sub)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        {
            let w = wav_read(&file)?;
            match rate {
                None => rate = Some(w.sample_rate),
                Some(r) if r != w.sample_rate => {
                    return Err(Error::InvalidInput(format!(
                        "{}: sample rate {} differs from {r}",
                        file.display(),
                        w.sample_rate
                    )))
                }
                _ => {}
            }
            let len = (opts.dur_s * f64::from(w.sample_rate)).round() as usize;
            for piece in w.samples.chunks_exact(len.max(1)) {
                if power(piece) <= 1e-10 {
                    continue;
                }
                let split = match piece_idx % 10 {
                    8 => 1,
                    9 => 2,
                    _ => 0,
                };
                pools[split].push((name.clone(), Waveform::new(piece.to_vec(), w.sample_rate)));
                piece_idx += 1;
            }
        }
        if piece_idx > 0 {
            speaker_count += 1;
        }
    }
    if speaker_count < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: found {speaker_count} speaker folders with usable audio; at least 2 are needed",
            dir.display()
        )));
    }
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut all: [Vec<ManifestRecord>; 3] = Default::default();
    for (k, pool) in pools.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(opts.seed, k, u64::MAX - 1));
        pool.shuffle(&mut rng);
        let mut pending: Vec<(String, Waveform)> = Vec::new();
        let limit = opts.counts.map(|c| c[k]).unwrap_or(usize::MAX);
        for item in pool.drain(..) {
            if all[k].len() >= limit {
                break;
            }
            match pending.iter().position(|(s, _)| *s != item.0) {
                Some(p) => {
                    let (sa, wa) = pending.remove(p);
                    let (sb, wb) = item;
                    let snr = draw_snr(&mut rng, opts.snr_lo, opts.snr_hi);
                    let id = format!("{}{:05}_{sa}_{sb}", SPLITS[k], all[k].len());
                    all[k].push(write_mixture(out, SPLITS[k], &id, &wa, &wb, snr, [sa, sb])?);
                }
                None => pending.push(item),
            }
        }
    }
    write_manifests(out, all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let o = SynthOptions {
            speakers: 8,
            utts_per: 50,
            ..SynthOptions::default()
        };
        assert_eq!(o.split_counts(), [200, 50, 50]);
    }

    #[test]
    fn seeds_differ_across_splits() {
        assert_ne!(split_seed(1, 0, 5), split_seed(1, 1, 5));
        assert_ne!(split_seed(1, 0, 5), split_seed(1, 0, 6));
        assert_eq!(split_seed(1, 2, 5), split_seed(1, 2, 5));
    }

    #[test]
    fn one_speaker_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = SynthOptions {
            speakers: 1,
            ..SynthOptions::default()
        };
        assert!(synth_corpus(&o, dir.path()).is_err());
    }
}
