//! Backbone assembly, training and score fusion.

mod checkpoint;
mod config;
mod fuse;
mod model;
mod train;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{
    parse_key_values, AlphaMode, BackboneConfig, BasicBlockConfig, SpatialOp, TemporalOp, TrainConfig,
    DESK_CHANNELS, FULL_DECAY_EPOCHS, FULL_EPOCHS, FULL_CHANNELS,
};
pub use fuse::{fuse_scores, scores_from_csv, scores_to_csv};
pub use model::{ForwardPass, Mode, Model, Parameter, RunningStats, BN_EPS, BN_MOMENTUM};
pub use train::{
    evaluate, make_batch, predict_scores, predictions, train, train_with, EpochRecord, NesterovSgd, TrainLog,
    Trainer,
};
