//! Multi-stage dual-path BiLSTM speech separation.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – tensors, a reverse-mode tape with hand-written primitive
//!   gradients, finite-difference verification and the Adam optimizer.
//! * [`signal`] – WAV I/O, STFT/iSTFT, toy speaker synthesis, SNR mixing and
//!   the ideal-ratio-mask oracle.
//! * [`sepnet`] – encoder, segmentation, dual-path blocks, masks, decoder and
//!   the multi-stage refinement model.
//! * [`objectives`] – SI-SDR, permutation-invariant training, stage-loss
//!   averaging, identity-consistency loss and evaluation metrics.
//! * [`idnet`] – the speaker-identity network used as a frozen embedding
//!   extractor.
//! * [`pipeline`] – the three training phases, learning-rate restarts,
//!   checkpointing and evaluation.

pub mod error;
pub mod idnet;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod sepnet;
pub mod signal;

pub use error::{Error, Result};
