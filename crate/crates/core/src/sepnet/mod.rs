//! The separation network: encoder, segmentation, dual-path BiLSTM blocks,
//! mask estimation, merge, decoder and the multi-stage composition.
//!
//! Feature maps are stored time-major as `(T, F)` and chunk tensors as
//! `(C, K, F)`, so every recurrent pass reads contiguous rows.

mod check;
pub mod checkpoint;
mod config;
mod graph;
mod model;

pub use checkpoint::{load_model, save_model, Blob, Container, ContainerKind, Dtype, FORMAT_VERSION};
pub use check::{model_grad_error, tiny_check_config, tiny_model_grad_check};
pub use config::StageConfig;
pub use graph::{
    decode, dual_path_block, encode, encoder_frames, estimate_masks, stage_forward, tastas_forward,
    tastas_forward_on, padded_len,
};
pub use model::{TasTasModel, PRESETS};

use crate::error::{Error, Result};
use crate::numerics::{chunk_count, primitive_forward, OpKind, Tensor};

/// Overlapping chunks of a feature map, `(C, K, F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkTensor {
    pub data: Tensor,
    /// Frames in the unpadded feature map.
    pub frames: usize,
    pub hop: usize,
    /// Zero frames appended to fill the last chunk.
    pub pad_frames: usize,
}

/// Splits a `(T, F)` feature map into 50%-overlapping chunks of `K` frames.
pub fn segment(rep: &Tensor, chunk_len: usize, hop: usize) -> Result<ChunkTensor> {
    if rep.ndim() != 2 {
        return Err(Error::shape("segment", format!("expected (T, F), got {}", rep.dims())));
    }
    let frames = rep.shape()[0];
    let data = primitive_forward(&OpKind::Segment { chunk_len, hop }, &[rep])?;
    let c = chunk_count(frames, chunk_len, hop);
    Ok(ChunkTensor {
        data,
        frames,
        hop,
        pad_frames: (c - 1) * hop + chunk_len - frames,
    })
}

/// Averaging overlap-add back to `(T, F)` with the padding removed.
pub fn merge(chunks: &ChunkTensor) -> Result<Tensor> {
    primitive_forward(
        &OpKind::Merge {
            frames: chunks.frames,
            hop: chunks.hop,
        },
        &[&chunks.data],
    )
}
