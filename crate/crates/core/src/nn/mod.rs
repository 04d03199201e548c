//! Network building blocks.
//!
//! Each block is a small description (key prefix plus hyperparameters)
//! that can list the parameters it needs via `defs` and evaluate itself on
//! a [`Bound`](crate::params::Bound) parameter set.

mod attention;
mod complexity;
mod conv;
mod convlstm;
mod patch;

pub use attention::{crop, pad_to_multiple, window_partition_rows, SwinPair, SwinUnit};
pub use complexity::{complexity_msa, complexity_swmsa, complexity_swmsa_quadratic};
pub use conv::{add_channel_bias, ConvBn, ConvKind, EncoderBlock, TransposedConv};
pub use convlstm::{BConvLstm, ConvLstmCell, ConvLstmState};
pub use patch::{linear, linear_embed, patch_merge2, patch_partition4};

/// Batch-norm epsilon used by every block.
pub const BN_EPS: f64 = 1e-5;
/// Layer-norm epsilon used by the attention blocks.
pub const LN_EPS: f64 = 1e-5;

pub(crate) fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
