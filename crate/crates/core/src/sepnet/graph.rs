use super::config::StageConfig;
use super::model::TasTasModel;
use crate::error::{Error, Result};
use crate::numerics::{Bound, OpKind, Tape, Tensor, Var};

/// Samples after right-padding so the encoder frames tile the signal exactly.
pub fn padded_len(len: usize, kernel_len: usize, stride: usize) -> Result<usize> {
    if len < kernel_len {
        return Err(Error::InvalidInput(format!(
            "waveform of {len} samples is shorter than the encoder kernel ({kernel_len})"
        )));
    }
    Ok(kernel_len + (len - kernel_len).div_ceil(stride) * stride)
}

/// Encoder frames for a waveform of `len` samples.
pub fn encoder_frames(len: usize, kernel_len: usize, stride: usize) -> Result<usize> {
    Ok((padded_len(len, kernel_len, stride)? - kernel_len) / stride + 1)
}

fn param(bound: &Bound, prefix: &str, name: &str) -> Result<Var> {
    bound.get(&format!("{prefix}.{name}"))
}

/// Shared conv1d + PReLU over each 1-D waveform, concatenated along the
/// feature axis → `(T, waves·N)`.
pub fn encode(tape: &mut Tape, bound: &Bound, prefix: &str, cfg: &StageConfig, waves: &[Var]) -> Result<Var> {
    let first = waves
        .first()
        .ok_or_else(|| Error::InvalidInput("encode needs at least one waveform".into()))?;
    let len = tape.value(*first).numel();
    if let Some(w) = waves.iter().find(|w| tape.value(**w).shape() != [len]) {
        return Err(Error::shape(
            "encode",
            format!("waveforms must be 1-D of equal length: {} vs {len}", tape.value(*w).dims()),
        ));
    }
    let len_p = padded_len(len, cfg.kernel_len, cfg.stride)?;
    let w = param(bound, prefix, "encoder.weight")?;
    let mut feats = Vec::with_capacity(waves.len());
    for &x in waves {
        let x = tape.apply(OpKind::FitLength { len: len_p }, &[x])?;
        let x = tape.apply(OpKind::Reshape { shape: vec![1, len_p] }, &[x])?;
        feats.push(tape.apply(OpKind::Conv1d { stride: cfg.stride }, &[x, w])?);
    }
    let stacked = if feats.len() == 1 {
        feats[0]
    } else {
        tape.apply(OpKind::Concat { axis: 0 }, &feats)?
    };
    let act = tape.apply(OpKind::Prelu, &[stacked, param(bound, prefix, "encoder.prelu")?])?;
    tape.apply(OpKind::Transpose { perm: vec![1, 0] }, &[act])
}

fn bilstm(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let mut inputs = vec![x];
    for dir in ["fwd", "bwd"] {
        for w in ["w_ih", "w_hh", "b"] {
            inputs.push(param(bound, prefix, &format!("{dir}.{w}"))?);
        }
    }
    tape.apply(OpKind::BiLstm, &inputs)
}

/// BiLSTM over the middle axis of `(B, T, N)`, projection back to `N`,
/// per-slice layer norm and residual connection.
fn recurrent_path(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = bilstm(tape, bound, prefix, x)?;
    let proj = tape.apply(
        OpKind::Linear,
        &[h, param(bound, prefix, "proj.weight")?, param(bound, prefix, "proj.bias")?],
    )?;
    let norm = tape.apply(
        OpKind::LayerNorm,
        &[proj, param(bound, prefix, "norm.gain")?, param(bound, prefix, "norm.bias")?],
    )?;
    tape.apply(OpKind::Add, &[x, norm])
}

/// Intra-chunk then inter-chunk recurrent pass over a `(C, K, N)` tensor.
pub fn dual_path_block(tape: &mut Tape, bound: &Bound, block_prefix: &str, chunks: Var) -> Result<Var> {
    if tape.value(chunks).ndim() != 3 {
        return Err(Error::shape(
            "dual_path_block",
            format!("expected (C, K, N), got {}", tape.value(chunks).dims()),
        ));
    }
    let intra = recurrent_path(tape, bound, &format!("{block_prefix}.intra"), chunks)?;
    // The inter path runs over chunks: swap to (K, C, N) for the recurrence
    // and swap back before the per-chunk norm.
    let across = tape.apply(OpKind::Transpose { perm: vec![1, 0, 2] }, &[intra])?;
    let prefix = format!("{block_prefix}.inter");
    let h = bilstm(tape, bound, &prefix, across)?;
    let proj = tape.apply(
        OpKind::Linear,
        &[h, param(bound, &prefix, "proj.weight")?, param(bound, &prefix, "proj.bias")?],
    )?;
    let back = tape.apply(OpKind::Transpose { perm: vec![1, 0, 2] }, &[proj])?;
    let norm = tape.apply(
        OpKind::LayerNorm,
        &[back, param(bound, &prefix, "norm.gain")?, param(bound, &prefix, "norm.bias")?],
    )?;
    tape.apply(OpKind::Add, &[intra, norm])
}

/// Separator on a `(T, W·N)` representation → masks `(T, S, N)` that sum to
/// one over the speaker axis.
pub fn estimate_masks(tape: &mut Tape, bound: &Bound, prefix: &str, cfg: &StageConfig, rep: Var) -> Result<Var> {
    let (frames, width) = match tape.value(rep).shape() {
        &[t, w] => (t, w),
        _ => {
            return Err(Error::shape(
                "estimate_masks",
                format!("expected (T, F), got {}", tape.value(rep).dims()),
            ))
        }
    };
    let (n, s) = (cfg.num_filters, cfg.num_speakers);
    let global = tape.apply(OpKind::Reshape { shape: vec![1, frames, width] }, &[rep])?;
    let global = tape.apply(
        OpKind::LayerNorm,
        &[global, param(bound, prefix, "norm.gain")?, param(bound, prefix, "norm.bias")?],
    )?;
    let global = tape.apply(OpKind::Reshape { shape: vec![frames, width] }, &[global])?;
    let x = tape.apply(
        OpKind::Linear,
        &[global, param(bound, prefix, "bottleneck.weight")?, param(bound, prefix, "bottleneck.bias")?],
    )?;
    let mut chunks = tape.apply(
        OpKind::Segment {
            chunk_len: cfg.chunk_len,
            hop: cfg.chunk_hop,
        },
        &[x],
    )?;
    for b in 0..cfg.num_blocks {
        chunks = dual_path_block(tape, bound, &format!("{prefix}.block{b}"), chunks)?;
    }
    let merged = tape.apply(OpKind::Merge { frames, hop: cfg.chunk_hop }, &[chunks])?;
    let logits = tape.apply(
        OpKind::Linear,
        &[merged, param(bound, prefix, "mask.weight")?, param(bound, prefix, "mask.bias")?],
    )?;
    let logits = tape.apply(OpKind::Reshape { shape: vec![frames, s, n] }, &[logits])?;
    tape.apply(OpKind::Softmax { axis: 1 }, &[logits])
}

/// Masked `(T, N)` features → per-frame linear decoder → overlap-add,
/// trimmed to `len` samples.
pub fn decode(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &StageConfig,
    mixture_rep: Var,
    mask: Var,
    len: usize,
) -> Result<Var> {
    let masked = tape.apply(OpKind::Mul, &[mixture_rep, mask])?;
    let frames = tape.apply(OpKind::Linear, &[masked, param(bound, prefix, "decoder.weight")?])?;
    let wave = tape.apply(OpKind::OverlapAdd { stride: cfg.stride }, &[frames])?;
    tape.apply(OpKind::FitLength { len }, &[wave])
}

/// One stage: `prev` (absent for the first stage) followed by the mixture
/// is encoded, masks are estimated and applied to the mixture's own
/// encoder channels, and each speaker is decoded.
pub fn stage_forward(
    tape: &mut Tape,
    bound: &Bound,
    model: &TasTasModel,
    stage: usize,
    mixture: Var,
    prev: Option<&[Var]>,
) -> Result<Vec<Var>> {
    let cfg = model
        .stages()
        .get(stage)
        .ok_or_else(|| Error::Config(format!("stage {stage} does not exist")))?;
    let mut waves: Vec<Var> = match (stage, prev) {
        (0, None) => Vec::new(),
        (0, Some(_)) => return Err(Error::InvalidInput("the first stage takes only the mixture".into())),
        (_, Some(p)) if p.len() == cfg.num_speakers => p.to_vec(),
        (_, _) => {
            return Err(Error::InvalidInput(format!(
                "stage {stage} needs {} previous estimates",
                cfg.num_speakers
            )))
        }
    };
    waves.push(mixture);
    let prefix = TasTasModel::prefix(stage);
    let len = tape.value(mixture).numel();
    let rep = encode(tape, bound, &prefix, cfg, &waves)?;
    let masks = estimate_masks(tape, bound, &prefix, cfg, rep)?;
    let n = cfg.num_filters;
    let frames = tape.value(rep).shape()[0];
    let mix_rep = tape.apply(
        OpKind::Narrow {
            axis: 1,
            start: (waves.len() - 1) * n,
            len: n,
        },
        &[rep],
    )?;
    (0..cfg.num_speakers)
        .map(|s| {
            let m = tape.apply(OpKind::Narrow { axis: 1, start: s, len: 1 }, &[masks])?;
            let m = tape.apply(OpKind::Reshape { shape: vec![frames, n] }, &[m])?;
            decode(tape, bound, &prefix, cfg, mix_rep, m, len)
        })
        .collect()
}

/// All stages on a tape; entry `i` holds the estimates of stage `i`.
pub fn tastas_forward_on(tape: &mut Tape, bound: &Bound, model: &TasTasModel, mixture: Var) -> Result<Vec<Vec<Var>>> {
    let mut outputs: Vec<Vec<Var>> = Vec::with_capacity(model.stages().len());
    for stage in 0..model.stages().len() {
        let prev = outputs.last().map(Vec::as_slice);
        let est = stage_forward(tape, bound, model, stage, mixture, prev)?;
        outputs.push(est);
    }
    Ok(outputs)
}

/// Inference: estimates of every stage, `[stage][speaker][sample]`.
pub fn tastas_forward(model: &TasTasModel, mixture: &[f64]) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), false);
    let x = tape.constant(Tensor::new(vec![mixture.len()], mixture.to_vec())?);
    let outputs = tastas_forward_on(&mut tape, &bound, model, x)?;
    Ok(outputs
        .iter()
        .map(|stage| stage.iter().map(|v| tape.value(*v).data().to_vec()).collect())
        .collect())
}
