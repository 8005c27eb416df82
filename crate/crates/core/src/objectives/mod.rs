//! Separation objectives: SI-SDR, permutation-invariant training, stage-loss
//! averaging, the identity-consistency loss and evaluation metrics.

mod metrics;
mod pit;
mod sisdr;

pub use metrics::{append_metrics, read_metrics, sdri, si_sdri, MetricsRecord, METRICS_HEADER};
pub use pit::{
    id_loss, id_loss_with_grad, multi_stage_loss, multi_stage_loss_with_grad, permutations, pit_loss,
    pit_loss_with_grad, LossBreakdown, PermutationResult, StageGradients,
};
pub use sisdr::{sdr, si_sdr, si_sdr_with_grad, SI_SDR_EPS};
