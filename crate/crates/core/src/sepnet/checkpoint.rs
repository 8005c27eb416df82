//! Versioned binary container for model parameters and training state.
//!
//! Layout (little-endian): magic `TSTS`, `u32` format version, `u8` kind,
//! `u32` header length and header bytes, `u32` blob count, then per blob a
//! `u16`-prefixed UTF-8 name, `u8` dtype, `u8` rank, `u32` dims and the
//! values; finally a SHA-256 digest of everything before it.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::StageConfig;
use super::model::TasTasModel;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TSTS";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    SeparatorModel = 0,
    IdNet = 1,
    TrainState = 2,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ContainerKind::SeparatorModel),
            1 => Ok(ContainerKind::IdNet),
            2 => Ok(ContainerKind::TrainState),
            other => Err(Error::Checkpoint(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub header: Vec<u8>,
    pub blobs: Vec<Blob>,
}

/// Append-only encoder for header fields.
#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Bounds-checked decoder; every read past the end is a checkpoint error.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "{} truncated at byte {} (needed {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{}: invalid UTF-8", self.what)))
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }
    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
    pub fn finish(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{}: {} unexpected trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )))
        }
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC).u32(FORMAT_VERSION).u8(self.kind as u8);
        w.u32(self.header.len() as u32).bytes(&self.header);
        w.u32(self.blobs.len() as u32);
        for blob in &self.blobs {
            w.buf.extend_from_slice(&(blob.name.len() as u16).to_le_bytes());
            w.bytes(blob.name.as_bytes());
            w.u8(blob.dtype as u8).u8(blob.tensor.ndim() as u8);
            for &d in blob.tensor.shape() {
                w.u32(d as u32);
            }
            for &v in blob.tensor.data() {
                match blob.dtype {
                    Dtype::F32 => w.bytes(&(v as f32).to_le_bytes()),
                    Dtype::F64 => w.f64(v),
                };
            }
        }
        let digest = Sha256::digest(&w.buf);
        w.bytes(&digest);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint header");
        if r.bytes(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
            )));
        }
        if bytes.len() < r.pos + DIGEST_LEN {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: file is corrupt or truncated ({} bytes, format version {version})",
                bytes.len()
            )));
        }
        let mut r = ByteReader::new(&body[r.pos..], "checkpoint body");
        let kind = ContainerKind::from_byte(r.u8()?)?;
        let header_len = r.u32()? as usize;
        let header = r.bytes(header_len)?.to_vec();
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let dtype = match r.u8()? {
                0 => Dtype::F32,
                1 => Dtype::F64,
                other => return Err(Error::Checkpoint(format!("blob `{name}`: unknown dtype {other}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let width = if dtype == Dtype::F32 { 4 } else { 8 };
            let raw = r.bytes(numel * width)?;
            let data = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("blob `{name}`: {e}")))?;
            blobs.push(Blob { name, dtype, tensor });
        }
        r.finish()?;
        Ok(Container { kind, header, blobs })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn expect_kind(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} container, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Blobs whose names start with `prefix`, with the prefix removed.
    pub fn params(&self, prefix: &str) -> Result<ParamSet> {
        let mut set = ParamSet::default();
        for b in self.blobs.iter().filter(|b| b.name.starts_with(prefix)) {
            set.insert(&b.name[prefix.len()..], b.tensor.clone())?;
        }
        Ok(set)
    }

    /// Appends every parameter as a blob named `prefix + name`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet, dtype: Dtype) {
        for (name, t) in params.iter() {
            self.blobs.push(Blob {
                name: format!("{prefix}{name}"),
                dtype,
                tensor: t.clone(),
            });
        }
    }
}

pub(crate) fn write_stage_configs(w: &mut ByteWriter, stages: &[StageConfig], use_id_loss: bool) {
    w.u32(stages.len() as u32);
    for s in stages {
        for v in [
            s.num_filters,
            s.kernel_len,
            s.stride,
            s.chunk_len,
            s.chunk_hop,
            s.num_blocks,
            s.hidden_size,
            s.num_speakers,
        ] {
            w.u32(v as u32);
        }
    }
    w.u8(use_id_loss as u8);
}

pub(crate) fn read_stage_configs(r: &mut ByteReader) -> Result<(Vec<StageConfig>, bool)> {
    let count = r.u32()? as usize;
    if count == 0 || count > 64 {
        return Err(Error::Checkpoint(format!("implausible stage count {count}")));
    }
    let mut stages = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = [0usize; 8];
        for x in &mut v {
            *x = r.u32()? as usize;
        }
        let cfg = StageConfig {
            num_filters: v[0],
            kernel_len: v[1],
            stride: v[2],
            chunk_len: v[3],
            chunk_hop: v[4],
            num_blocks: v[5],
            hidden_size: v[6],
            num_speakers: v[7],
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(format!("invalid stage configuration in header: {e}")))?;
        stages.push(cfg);
    }
    let use_id_loss = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("invalid use_id_loss flag {other}"))),
    };
    Ok((stages, use_id_loss))
}

/// Saves model parameters as 32-bit floats.
pub fn save_model(path: impl AsRef<Path>, model: &TasTasModel) -> Result<()> {
    let mut w = ByteWriter::default();
    write_stage_configs(&mut w, model.stages(), model.use_id_loss());
    let mut c = Container {
        kind: ContainerKind::SeparatorModel,
        header: w.finish(),
        blobs: Vec::new(),
    };
    c.push_params("", model.params(), Dtype::F32);
    c.write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TasTasModel> {
    let c = Container::read(path)?;
    model_from_container(&c)
}

pub(crate) fn model_from_container(c: &Container) -> Result<TasTasModel> {
    c.expect_kind(ContainerKind::SeparatorModel)?;
    let mut r = ByteReader::new(&c.header, "model header");
    let (stages, use_id_loss) = read_stage_configs(&mut r)?;
    r.finish()?;
    TasTasModel::from_parts(stages, use_id_loss, c.params("")?)
        .map_err(|e| Error::Checkpoint(format!("parameters do not match header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TasTasModel {
        let base = StageConfig::sized(4, 4, 3, 1);
        TasTasModel::new(vec![base, base], true, 9).unwrap()
    }

    #[test]
    fn model_round_trip_at_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny();
        save_model(&p, &m).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.stages(), m.stages());
        assert!(back.use_id_loss());
        for (name, t) in m.params().iter() {
            let b = back.params().get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn rejects_unknown_version_and_corruption() {
        let mut w = ByteWriter::default();
        write_stage_configs(&mut w, tiny().stages(), false);
        let c = Container {
            kind: ContainerKind::SeparatorModel,
            header: w.finish(),
            blobs: vec![],
        };
        let bytes = c.to_bytes();
        let mut future = bytes.clone();
        future[4] = 9;
        let err = Container::from_bytes(&future).unwrap_err().to_string();
        assert!(err.contains("unsupported format version 9"), "{err}");
        let mut flipped = bytes.clone();
        flipped[12] ^= 1;
        assert!(Container::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(Container::from_bytes(b"RIFF0000").unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn f64_blobs_are_exact() {
        let mut c = Container {
            kind: ContainerKind::TrainState,
            header: vec![],
            blobs: vec![],
        };
        let mut p = ParamSet::default();
        p.insert("x", Tensor::from_vec(vec![0.1, 1.0 / 3.0])).unwrap();
        c.push_params("opt.", &p, Dtype::F64);
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.params("opt.").unwrap(), p);
    }
}
