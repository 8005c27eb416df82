use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One two-speaker mixture: `mix TAB src1 TAB src2 TAB snr_db TAB spk1 TAB spk2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub mix: PathBuf,
    pub sources: [PathBuf; 2],
    pub snr_db: f64,
    pub speakers: [String; 2],
}

impl ManifestRecord {
    /// Identifier used in reports: the mixture file stem.
    pub fn utt_id(&self) -> String {
        self.mix
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.mix.display().to_string())
    }
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::io(
                path,
                format!("line {}: expected 6 tab-separated fields, found {}", lineno + 1, fields.len()),
            ));
        }
        let snr_db = fields[3]
            .parse()
            .map_err(|_| Error::io(path, format!("line {}: bad SNR `{}`", lineno + 1, fields[3])))?;
        records.push(ManifestRecord {
            mix: resolve(fields[0]),
            sources: [resolve(fields[1]), resolve(fields[2])],
            snr_db,
            speakers: [fields[4].to_string(), fields[5].to_string()],
        });
    }
    Ok(records)
}

/// Writes a manifest, storing paths relative to its directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::new();
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            rel(&r.mix),
            rel(&r.sources[0]),
            rel(&r.sources[1]),
            r.snr_db,
            r.speakers[0],
            r.speakers[1]
        )
        .expect("writing to a String cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let rec = ManifestRecord {
            mix: d.join("mix/u1.wav"),
            sources: [d.join("s1/u1.wav"), d.join("s2/u1.wav")],
            snr_db: 2.75,
            speakers: ["spk3".into(), "spk7".into()],
        };
        let m = d.join("train.tsv");
        write_manifest(&m, std::slice::from_ref(&rec)).unwrap();
        assert!(fs::read_to_string(&m).unwrap().starts_with("mix/u1.wav\ts1/u1.wav\t"));
        assert_eq!(read_manifest(&m).unwrap(), vec![rec.clone()]);
        assert_eq!(rec.utt_id(), "u1");
    }

    #[test]
    fn malformed_line_names_location() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("bad.tsv");
        fs::write(&m, "a\tb\n").unwrap();
        let err = read_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }
}
