//! The speaker-identity network: a differentiable STFT front end and a
//! small convolutional classifier over log magnitudes. Once trained it is
//! frozen and its penultimate layer serves as a speaker embedding.

mod net;
mod store;
mod train;

pub use net::{idnet_forward, slice_segments, FrozenIdNet, IdNetConfig};
pub use store::{load_idnet, read_label_map, save_idnet, write_label_map};
pub use train::{train_idnet, IdEpochReport, IdTrainOptions, IdTraining, LabeledUtterance};
