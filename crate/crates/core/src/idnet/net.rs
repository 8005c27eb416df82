use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{init_uniform, Bound, OpKind, ParamSet, Tape, Tensor, Var};
use crate::signal::{StftConfig, DEFAULT_SAMPLE_RATE};

/// ID-Net hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IdNetConfig {
    /// Segment length in seconds.
    pub segment_s: f64,
    pub sample_rate: u32,
    pub stft: StftConfig,
    /// Output channels of each 3×3 conv + ReLU + 2×2 max-pool stage.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub num_speakers: usize,
}

impl Default for IdNetConfig {
    fn default() -> Self {
        IdNetConfig {
            segment_s: 0.5,
            sample_rate: DEFAULT_SAMPLE_RATE,
            stft: StftConfig::default(),
            channels: vec![16, 32, 64, 64],
            embedding_dim: 128,
            num_speakers: 2,
        }
    }
}

impl IdNetConfig {
    /// Samples per segment.
    pub fn segment_len(&self) -> usize {
        (self.segment_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.segment_len();
        let (wl, hop) = (self.stft.window_len(), self.stft.hop());
        if len <= wl / 2 || len < hop {
            return Err(Error::Config(format!(
                "a {}-sample segment is too short for a {wl}/{hop} STFT",
                len
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::Config("conv channels and embedding size must be positive".into()));
        }
        if self.num_speakers < 2 {
            return Err(Error::Config(format!(
                "an identity classifier needs at least 2 speakers, got {}",
                self.num_speakers
            )));
        }
        let (mut h, mut w) = (self.stft.bins(), 1 + len / hop);
        for (i, _) in self.channels.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "spectrogram of {}x{} cannot be pooled {} times (exhausted at stage {i})",
                    self.stft.bins(),
                    1 + len / hop,
                    self.channels.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Randomly initialised parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::default();
        let mut cin = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            p.insert(format!("conv{i}.weight"), init_uniform(vec![c, cin, 3, 3], cin * 9, &mut rng))?;
            p.insert(format!("conv{i}.bias"), Tensor::zeros(vec![c]))?;
            cin = c;
        }
        let d = self.embedding_dim;
        p.insert("embed.weight", init_uniform(vec![d, cin], cin, &mut rng))?;
        p.insert("embed.bias", Tensor::zeros(vec![d]))?;
        p.insert("head.weight", init_uniform(vec![self.num_speakers, d], d, &mut rng))?;
        p.insert("head.bias", Tensor::zeros(vec![self.num_speakers]))?;
        Ok(p)
    }

    pub(crate) fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.init_params(0)?.check_mirrors(params)
    }
}

/// Records the network on one segment of exactly `segment_len` samples;
/// returns `(logits, embedding)`.
pub(crate) fn forward_on(tape: &mut Tape, bound: &Bound, cfg: &IdNetConfig, segment: Var) -> Result<(Var, Var)> {
    let spec = tape.apply(
        OpKind::Stft {
            window_len: cfg.stft.window_len(),
            hop: cfg.stft.hop(),
        },
        &[segment],
    )?;
    let mag = tape.apply(OpKind::ComplexAbs, &[spec])?;
    let mut x = tape.apply(OpKind::Log1p, &[mag])?;
    let (bins, frames) = (tape.value(x).shape()[0], tape.value(x).shape()[1]);
    x = tape.apply(OpKind::Reshape { shape: vec![1, bins, frames] }, &[x])?;
    for i in 0..cfg.channels.len() {
        let w = bound.get(&format!("conv{i}.weight"))?;
        let b = bound.get(&format!("conv{i}.bias"))?;
        x = tape.apply(OpKind::Conv2d { padding: 1 }, &[x, w, b])?;
        x = tape.apply(OpKind::Relu, &[x])?;
        x = tape.apply(OpKind::MaxPool2d { size: 2 }, &[x])?;
    }
    let pooled = tape.apply(OpKind::GlobalAvgPool, &[x])?;
    let embedding = tape.apply(OpKind::Linear, &[pooled, bound.get("embed.weight")?, bound.get("embed.bias")?])?;
    let logits = tape.apply(OpKind::Linear, &[embedding, bound.get("head.weight")?, bound.get("head.bias")?])?;
    Ok((logits, embedding))
}

/// Mean embedding over non-overlapping segments of a 1-D waveform on the
/// tape; the trailing partial segment is zero-padded.
pub(crate) fn embed_on(tape: &mut Tape, bound: &Bound, cfg: &IdNetConfig, wave: Var) -> Result<Var> {
    let len = tape.value(wave).numel();
    if len == 0 || tape.value(wave).ndim() != 1 {
        return Err(Error::InvalidInput(format!(
            "cannot embed a waveform of shape {}",
            tape.value(wave).dims()
        )));
    }
    let seg = cfg.segment_len();
    let count = len.div_ceil(seg);
    let padded = tape.apply(OpKind::FitLength { len: count * seg }, &[wave])?;
    let mut sum: Option<Var> = None;
    for i in 0..count {
        let piece = tape.apply(OpKind::Narrow { axis: 0, start: i * seg, len: seg }, &[padded])?;
        let (_, e) = forward_on(tape, bound, cfg, piece)?;
        sum = Some(match sum {
            Some(acc) => tape.apply(OpKind::Add, &[acc, e])?,
            None => e,
        });
    }
    let sum = sum.expect("at least one segment");
    if count == 1 {
        Ok(sum)
    } else {
        tape.apply(OpKind::Scale { factor: 1.0 / count as f64 }, &[sum])
    }
}

fn fit_segment(cfg: &IdNetConfig, segment: &[f64]) -> Result<Vec<f64>> {
    let seg = cfg.segment_len();
    if segment.is_empty() {
        return Err(Error::InvalidInput("empty segment".into()));
    }
    if segment.len() > seg {
        return Err(Error::InvalidInput(format!(
            "segment of {} samples exceeds the {seg}-sample segment length",
            segment.len()
        )));
    }
    let mut s = segment.to_vec();
    s.resize(seg, 0.0);
    Ok(s)
}

/// Logits and embedding of one segment; shorter segments are zero-padded.
pub fn idnet_forward(cfg: &IdNetConfig, params: &ParamSet, segment: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = fit_segment(cfg, segment)?;
    let mut tape = Tape::new();
    let bound = tape.bind(params, false);
    let x = tape.constant(Tensor::from_vec(s));
    let (logits, emb) = forward_on(&mut tape, &bound, cfg, x)?;
    Ok((tape.value(logits).data().to_vec(), tape.value(emb).data().to_vec()))
}

/// Non-overlapping segments of `seg` samples; the last one zero-padded.
pub fn slice_segments(samples: &[f64], seg: usize) -> Vec<Vec<f64>> {
    samples
        .chunks(seg.max(1))
        .map(|c| {
            let mut v = c.to_vec();
            v.resize(seg, 0.0);
            v
        })
        .collect()
}

/// A trained ID-Net whose parameters can no longer change.
///
/// Parameters are rounded to single precision on construction so that the
/// checksum survives a checkpoint round trip unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenIdNet {
    config: IdNetConfig,
    params: ParamSet,
    labels: Vec<String>,
}

impl FrozenIdNet {
    pub fn new(config: IdNetConfig, mut params: ParamSet, labels: Vec<String>) -> Result<Self> {
        config.check_params(&params)?;
        if labels.len() != config.num_speakers {
            return Err(Error::Config(format!(
                "{} labels for {} classes",
                labels.len(),
                config.num_speakers
            )));
        }
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        Ok(FrozenIdNet { config, params, labels })
    }

    pub fn config(&self) -> &IdNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Speaker name of each class index.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn forward(&self, segment: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        idnet_forward(&self.config, &self.params, segment)
    }

    /// Most likely class of one segment.
    pub fn classify(&self, segment: &[f64]) -> Result<usize> {
        let (logits, _) = self.forward(segment)?;
        Ok(argmax(&logits))
    }

    /// Mean segment embedding of a whole utterance.
    pub fn embed_utterance(&self, wave: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(wave.to_vec()));
        let e = self.embed_on_tape(&mut tape, x)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Records the embedding of `wave` on `tape` with the parameters bound
    /// as constants: gradients reach the waveform but never the network.
    pub fn embed_on_tape(&self, tape: &mut Tape, wave: Var) -> Result<Var> {
        let bound = tape.bind(&self.params, false);
        embed_on(tape, &bound, &self.config, wave)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> IdNetConfig {
        IdNetConfig {
            channels: vec![4, 4],
            embedding_dim: 8,
            num_speakers: 3,
            ..IdNetConfig::default()
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = small();
        let p = cfg.init_params(1).unwrap();
        let (logits, emb) = idnet_forward(&cfg, &p, &vec![0.1; 4000]).unwrap();
        assert_eq!(logits.len(), 3);
        assert_eq!(emb.len(), 8);
        assert!(idnet_forward(&cfg, &p, &[]).is_err());
        assert!(idnet_forward(&cfg, &p, &vec![0.1; 4001]).is_err());
    }

    #[test]
    fn short_segment_matches_explicit_padding() {
        let cfg = small();
        let p = cfg.init_params(2).unwrap();
        let x: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.03).sin()).collect();
        let mut padded = x.clone();
        padded.resize(4000, 0.0);
        assert_eq!(idnet_forward(&cfg, &p, &x).unwrap(), idnet_forward(&cfg, &p, &padded).unwrap());
    }

    #[test]
    fn validation() {
        IdNetConfig::default().validate().unwrap();
        let single = IdNetConfig {
            num_speakers: 1,
            ..IdNetConfig::default()
        };
        assert!(single.validate().is_err());
        let ok = IdNetConfig {
            num_speakers: 8,
            ..IdNetConfig::default()
        };
        ok.validate().unwrap();
        let too_deep = IdNetConfig {
            channels: vec![4; 6],
            ..ok.clone()
        };
        assert!(too_deep.validate().is_err());
        let too_short = IdNetConfig {
            segment_s: 0.02,
            ..ok
        };
        assert!(too_short.validate().is_err());
    }

    #[test]
    fn slicing_pads_the_tail() {
        let s = slice_segments(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
        assert_eq!(s, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]]);
    }
}
