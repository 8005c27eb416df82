use std::path::Path;

use crate::error::{Error, Result};
use crate::idnet::LabeledUtterance;
use crate::signal::{read_manifest, wav_read, ManifestRecord, Waveform};

/// A mixture with its reference sources, loaded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub mixture: Vec<f64>,
    pub sources: Vec<Vec<f64>>,
    pub speakers: Vec<String>,
    pub sample_rate: u32,
}

impl Example {
    /// Builds an example, checking that every signal has the same length.
    pub fn new(utt_id: impl Into<String>, mixture: Waveform, sources: Vec<Waveform>, speakers: Vec<String>) -> Result<Self> {
        let utt_id = utt_id.into();
        if let Some(s) = sources
            .iter()
            .find(|s| s.len() != mixture.len() || s.sample_rate != mixture.sample_rate)
        {
            return Err(Error::InvalidInput(format!(
                "{utt_id}: source of {} samples @ {} Hz does not match mixture of {} samples @ {} Hz",
                s.len(),
                s.sample_rate,
                mixture.len(),
                mixture.sample_rate
            )));
        }
        if mixture.is_empty() {
            return Err(Error::InvalidInput(format!("{utt_id}: empty mixture")));
        }
        Ok(Example {
            utt_id,
            sample_rate: mixture.sample_rate,
            mixture: mixture.samples,
            sources: sources.into_iter().map(|s| s.samples).collect(),
            speakers,
        })
    }

    pub fn from_record(record: &ManifestRecord) -> Result<Self> {
        let mixture = wav_read(&record.mix)?;
        let sources = record.sources.iter().map(wav_read).collect::<Result<Vec<_>>>()?;
        Self::new(record.utt_id(), mixture, sources, record.speakers.to_vec())
    }
}

/// Every example of a manifest; the first unreadable one is an error.
pub fn load_examples(manifest: impl AsRef<Path>) -> Result<Vec<Example>> {
    let records = read_manifest(manifest.as_ref())?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: manifest lists no mixtures",
            manifest.as_ref().display()
        )));
    }
    records.iter().map(Example::from_record).collect()
}

/// Reference sources of a manifest labelled with their speakers, for
/// identity-network training.
pub fn labeled_sources(examples: &[Example]) -> Vec<LabeledUtterance> {
    examples
        .iter()
        .flat_map(|ex| {
            ex.sources.iter().zip(&ex.speakers).map(|(s, spk)| LabeledUtterance {
                speaker: spk.clone(),
                wave: Waveform::new(s.clone(), ex.sample_rate),
            })
        })
        .collect()
}
