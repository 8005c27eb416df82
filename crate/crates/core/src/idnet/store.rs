use std::fs;
use std::path::Path;

use super::net::{FrozenIdNet, IdNetConfig};
use crate::error::{Error, Result};
use crate::sepnet::checkpoint::{ByteReader, ByteWriter};
use crate::sepnet::{Container, ContainerKind, Dtype};
use crate::signal::StftConfig;

/// `speaker_name TAB class_index` lines in class order.
pub fn label_map_text(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, name)| format!("{name}\t{i}\n"))
        .collect()
}

pub fn parse_label_map(text: &str) -> Result<Vec<String>> {
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (name, idx) = line
            .rsplit_once('\t')
            .ok_or_else(|| Error::InvalidInput(format!("label map line {}: expected `name<TAB>index`", n + 1)))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("label map line {}: bad index `{idx}`", n + 1)))?;
        entries.push((idx, name.to_string()));
    }
    entries.sort();
    if entries.iter().enumerate().any(|(i, (idx, _))| *idx != i) {
        return Err(Error::InvalidInput("label map indices must be 0..n without gaps".into()));
    }
    Ok(entries.into_iter().map(|(_, n)| n).collect())
}

pub fn write_label_map(path: impl AsRef<Path>, labels: &[String]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, label_map_text(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_label_map(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    parse_label_map(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub(crate) fn idnet_container(net: &FrozenIdNet) -> Container {
    let cfg = net.config();
    let mut w = ByteWriter::default();
    w.f64(cfg.segment_s)
        .u32(cfg.sample_rate)
        .u32(cfg.stft.window_len() as u32)
        .u32(cfg.stft.hop() as u32)
        .u32(cfg.channels.len() as u32);
    for &c in &cfg.channels {
        w.u32(c as u32);
    }
    w.u32(cfg.embedding_dim as u32)
        .u32(cfg.num_speakers as u32)
        .str(&label_map_text(net.labels()));
    let mut c = Container {
        kind: ContainerKind::IdNet,
        header: w.finish(),
        blobs: Vec::new(),
    };
    c.push_params("", net.params(), Dtype::F32);
    c
}

pub(crate) fn idnet_from_container(c: &Container) -> Result<FrozenIdNet> {
    c.expect_kind(ContainerKind::IdNet)?;
    let mut r = ByteReader::new(&c.header, "ID-Net header");
    let segment_s = r.f64()?;
    let sample_rate = r.u32()?;
    let (wl, hop) = (r.u32()? as usize, r.u32()? as usize);
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(Error::Checkpoint(format!("implausible conv stage count {n}")));
    }
    let channels = (0..n).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let embedding_dim = r.u32()? as usize;
    let num_speakers = r.u32()? as usize;
    let labels = parse_label_map(&r.str()?)?;
    r.finish()?;
    let config = IdNetConfig {
        segment_s,
        sample_rate,
        stft: StftConfig::new(wl, hop)?,
        channels,
        embedding_dim,
        num_speakers,
    };
    FrozenIdNet::new(config, c.params("")?, labels)
        .map_err(|e| Error::Checkpoint(format!("ID-Net parameters do not match header: {e}")))
}

pub fn save_idnet(path: impl AsRef<Path>, net: &FrozenIdNet) -> Result<()> {
    idnet_container(net).write(path)
}

pub fn load_idnet(path: impl AsRef<Path>) -> Result<FrozenIdNet> {
    idnet_from_container(&Container::read(path)?)
}
