//! Training phases, corpus preparation, learning-rate restarts,
//! resumable training state and evaluation.

mod config;
mod control;
mod corpus;
mod data;
mod eval;
mod phase;
mod trainer;

pub use config::{Phase, TrainConfig};
pub use control::{Action, RestartController};
pub use corpus::{corpus_from_wavs, synth_corpus, toy_speaker_name, CorpusSummary, SynthOptions, SPLITS};
pub use data::{labeled_sources, load_examples, Example};
pub use eval::{evaluate, score_irm, score_model, EvalReport, SystemRow, UttError, EVAL_HEADER, IRM_SYSTEM};
pub use phase::{
    run_phase, PhaseOutcome, CONFIG_FILE, EPOCH_REPORT, IDNET_CHECKPOINT, IDNET_HEADER, IDNET_REPORT, LABELS_FILE,
    MODEL_CHECKPOINT, STATE_CHECKPOINT,
};
pub use trainer::{
    example_gradient, example_metrics, reference_embeddings, EpochReport, IdentityTerm, SepTrainer, Snapshot,
    TrainState, EPOCH_HEADER,
};
