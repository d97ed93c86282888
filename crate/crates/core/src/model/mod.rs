//! The Hybrid ConvNet-Transformer network: configuration, parameters,
//! forward pass, and checkpointing.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_for_task, read_checkpoint, save_checkpoint,
    write_checkpoint,
};
pub use config::{HctConfig, ModelTask};
pub use forward::{
    add_positional_encoding, class_from_probs, conv_branch, conv_branch_on_tape, forward,
    forward_on_tape, forward_trace, positional_values, reduce_fc, spatial_encode,
    spatial_encode_on_tape, temporal_encode, temporal_encode_on_tape, ForwardNodes,
    ForwardTrace, PeMode,
};
pub use params::{init_params, ConvParams, DenseParams, HctNodes, HctParams};
