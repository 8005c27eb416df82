use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::data::Example;
use crate::error::{Error, Result};
use crate::idnet::FrozenIdNet;
use crate::numerics::par;
use crate::objectives::{append_metrics, id_loss, pit_loss, sdri, si_sdri, MetricsRecord};
use crate::sepnet::{tastas_forward, TasTasModel};
use crate::signal::{irm_separate, ManifestRecord, StftConfig, Waveform};

/// Header of the summary table.
pub const EVAL_HEADER: &str = "system\tmean_si_sdri\tmedian_si_sdri\tmean_sdri\tmedian_sdri\tpesq\testoi\tutterances";

/// Label of the ideal-ratio-mask oracle row.
pub const IRM_SYSTEM: &str = "IRM";

/// Summary of one system over the evaluated utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRow {
    pub system: String,
    pub mean_si_sdri: f64,
    pub median_si_sdri: f64,
    pub mean_sdri: f64,
    pub median_sdri: f64,
    pub utterances: usize,
}

impl SystemRow {
    fn from_records(system: &str, records: &[MetricsRecord]) -> Self {
        let si: Vec<f64> = records.iter().map(|r| r.si_sdri).collect();
        let sd: Vec<f64> = records.iter().map(|r| r.sdri).collect();
        SystemRow {
            system: system.to_string(),
            mean_si_sdri: mean(&si),
            median_si_sdri: median(&si),
            mean_sdri: mean(&sd),
            median_sdri: median(&sd),
            utterances: records.len(),
        }
    }

    /// Perceptual metrics are not implemented and are marked as such.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\tunsupported\tunsupported\t{}",
            self.system, self.mean_si_sdri, self.median_si_sdri, self.mean_sdri, self.median_sdri, self.utterances
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// An utterance that could not be evaluated by some system.
#[derive(Clone, Debug, PartialEq)]
pub struct UttError {
    pub utt_id: String,
    pub system: String,
    pub message: String,
}

/// Summary rows, per-utterance records per system and error records, all
/// in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SystemRow>,
    pub per_utterance: Vec<(String, Vec<MetricsRecord>)>,
    pub errors: Vec<UttError>,
}

fn file_label(system: &str) -> String {
    system
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

impl EvalReport {
    pub fn row(&self, system: &str) -> Option<&SystemRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    /// The summary table as tab-separated text with a header row.
    pub fn table(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_line());
        }
        s
    }

    /// Writes `eval_table.tsv`, one `metrics_<system>.tsv` per system and
    /// `eval_errors.tsv`; returns the paths written. Existing files are
    /// replaced.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let table = dir.join("eval_table.tsv");
        fs::write(&table, self.table()).map_err(|e| Error::io(&table, e))?;
        written.push(table);
        for (system, records) in &self.per_utterance {
            let p = dir.join(format!("metrics_{}.tsv", file_label(system)));
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
            append_metrics(&p, records)?;
            written.push(p);
        }
        let errs = dir.join("eval_errors.tsv");
        let mut text = String::from("utt_id\tsystem\tmessage\n");
        for e in &self.errors {
            let _ = writeln!(text, "{}\t{}\t{}", e.utt_id, e.system, e.message.replace(['\t', '\n'], " "));
        }
        fs::write(&errs, text).map_err(|e| Error::io(&errs, e))?;
        written.push(errs);
        Ok(written)
    }
}

/// Final-stage metrics of one model on one example.
pub fn score_model(model: &TasTasModel, ex: &Example, idnet: Option<&FrozenIdNet>) -> Result<MetricsRecord> {
    let outputs = tastas_forward(model, &ex.mixture)?;
    let est = outputs.last().expect("at least one stage");
    let (_, pit) = pit_loss(&ex.sources, est)?;
    let id = match idnet {
        Some(net) => {
            let sep = est.iter().map(|e| net.embed_utterance(e)).collect::<Result<Vec<_>>>()?;
            let refs = ex.sources.iter().map(|s| net.embed_utterance(s)).collect::<Result<Vec<_>>>()?;
            id_loss(&sep, &refs, &pit.perm)?
        }
        None => f64::NAN,
    };
    Ok(MetricsRecord {
        utt_id: ex.utt_id.clone(),
        si_sdri: si_sdri(&ex.mixture, &ex.sources, est, &pit.perm)?,
        sdri: sdri(&ex.mixture, &ex.sources, est, &pit.perm)?,
        perm: pit.perm,
        id_loss: id,
    })
}

/// Oracle metrics: each reference's ideal ratio mask on the mixture.
pub fn score_irm(ex: &Example) -> Result<MetricsRecord> {
    let sr = ex.sample_rate;
    let refs: Vec<Waveform> = ex.sources.iter().map(|s| Waveform::new(s.clone(), sr)).collect();
    let est = irm_separate(&Waveform::new(ex.mixture.clone(), sr), &refs, StftConfig::default())?;
    let est: Vec<&[f64]> = est.iter().map(|w| w.samples.as_slice()).collect();
    let perm: Vec<usize> = (0..refs.len()).collect();
    Ok(MetricsRecord {
        utt_id: ex.utt_id.clone(),
        si_sdri: si_sdri(&ex.mixture, &ex.sources, &est, &perm)?,
        sdri: sdri(&ex.mixture, &ex.sources, &est, &perm)?,
        perm,
        id_loss: f64::NAN,
    })
}

/// Evaluates each labelled model, plus the IRM oracle when `with_irm`, on
/// every manifest record. Unreadable or mismatched utterances become error
/// records and the run continues.
pub fn evaluate(
    systems: &[(String, &TasTasModel)],
    records: &[ManifestRecord],
    idnet: Option<&FrozenIdNet>,
    with_irm: bool,
) -> Result<EvalReport> {
    let mut labels: Vec<&str> = systems.iter().map(|(l, _)| l.as_str()).collect();
    if with_irm {
        labels.push(IRM_SYSTEM);
    }
    if let Some(dup) = labels.iter().enumerate().find(|(i, l)| labels[..*i].contains(l)) {
        return Err(Error::InvalidInput(format!("system label `{}` used twice", dup.1)));
    }
    let per_record = par::map_indexed(records.len(), |i| {
        let rec = &records[i];
        match Example::from_record(rec) {
            Err(e) => vec![Err(UttError {
                utt_id: rec.utt_id(),
                system: "*".into(),
                message: e.to_string(),
            })],
            Ok(ex) => {
                let mut out: Vec<std::result::Result<MetricsRecord, UttError>> = systems
                    .iter()
                    .map(|(label, model)| {
                        score_model(model, &ex, idnet).map_err(|e| UttError {
                            utt_id: ex.utt_id.clone(),
                            system: label.clone(),
                            message: e.to_string(),
                        })
                    })
                    .collect();
                if with_irm {
                    out.push(score_irm(&ex).map_err(|e| UttError {
                        utt_id: ex.utt_id.clone(),
                        system: IRM_SYSTEM.into(),
                        message: e.to_string(),
                    }));
                }
                out
            }
        }
    });
    let mut per_system: Vec<Vec<MetricsRecord>> = vec![Vec::new(); labels.len()];
    let mut errors = Vec::new();
    for results in per_record {
        if results.len() != labels.len() {
            errors.extend(results.into_iter().filter_map(|r| r.err()));
            continue;
        }
        for (slot, r) in per_system.iter_mut().zip(results) {
            match r {
                Ok(m) => slot.push(m),
                Err(e) => errors.push(e),
            }
        }
    }
    Ok(EvalReport {
        rows: labels
            .iter()
            .zip(&per_system)
            .map(|(l, recs)| SystemRow::from_records(l, recs))
            .collect(),
        per_utterance: labels.iter().map(|l| l.to_string()).zip(per_system).collect(),
        errors,
    })
}
