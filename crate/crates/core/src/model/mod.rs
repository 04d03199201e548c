//! Network assembly, parameter/FLOP counting and checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, transfer_from, transfer_weights, TransferReport,
};
pub use config::{DecoderChaining, ModelConfig, Placement, SkipSequence};
pub use network::{count_params, Network};
