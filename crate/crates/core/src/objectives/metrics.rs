use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use super::sisdr::{sdr, si_sdr};
use crate::error::{Error, Result};

fn improvement<T, E>(
    metric: fn(&[f64], &[f64]) -> Result<f64>,
    mixture: &[f64],
    targets: &[T],
    estimates: &[E],
    perm: &[usize],
) -> Result<f64>
where
    T: AsRef<[f64]>,
    E: AsRef<[f64]>,
{
    if targets.len() != estimates.len() || perm.len() != estimates.len() || targets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} targets, {} estimates, permutation of {}",
            targets.len(),
            estimates.len(),
            perm.len()
        )));
    }
    let s = targets.len() as f64;
    let mut est = 0.0;
    for (e, &j) in estimates.iter().zip(perm) {
        let t = targets
            .get(j)
            .ok_or_else(|| Error::InvalidInput(format!("permutation entry {j} out of range")))?;
        est += metric(t.as_ref(), e.as_ref())?;
    }
    let mut base = 0.0;
    for t in targets {
        base += metric(t.as_ref(), mixture)?;
    }
    Ok(est / s - base / s)
}

/// Mean SI-SDR of the matched estimates minus mean SI-SDR of the mixture.
pub fn si_sdri<T: AsRef<[f64]>, E: AsRef<[f64]>>(mixture: &[f64], targets: &[T], estimates: &[E], perm: &[usize]) -> Result<f64> {
    improvement(si_sdr, mixture, targets, estimates, perm)
}

/// As [`si_sdri`] with the plain (not scale-invariant) SDR.
pub fn sdri<T: AsRef<[f64]>, E: AsRef<[f64]>>(mixture: &[f64], targets: &[T], estimates: &[E], perm: &[usize]) -> Result<f64> {
    improvement(sdr, mixture, targets, estimates, perm)
}

pub const METRICS_HEADER: &str = "utt_id\tsi_sdri\tsdri\tperm\tid_loss";

/// One evaluated utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub utt_id: String,
    pub si_sdri: f64,
    pub sdri: f64,
    pub perm: Vec<usize>,
    /// `NaN` when no identity network was used.
    pub id_loss: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let perm: Vec<String> = self.perm.iter().map(usize::to_string).collect();
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.utt_id,
            self.si_sdri,
            self.sdri,
            perm.join(","),
            self.id_loss
        )
    }

    pub fn parse(line: &str) -> Option<MetricsRecord> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return None;
        }
        Some(MetricsRecord {
            utt_id: f[0].to_string(),
            si_sdri: f[1].parse().ok()?,
            sdri: f[2].parse().ok()?,
            perm: f[3].split(',').map(|p| p.parse().ok()).collect::<Option<_>>()?,
            id_loss: f[4].parse().ok()?,
        })
    }
}

/// Appends records, writing the header first if the file is new or empty.
pub fn append_metrics(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if fresh {
        out.push_str(METRICS_HEADER);
        out.push('\n');
    }
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(i, l)| !(*i == 0 && *l == METRICS_HEADER) && !l.is_empty())
        .map(|(i, l)| MetricsRecord::parse(l).ok_or_else(|| Error::io(path, format!("line {}: malformed record", i + 1))))
        .collect()
}
