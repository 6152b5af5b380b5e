//! Patch tokenization, random masking and the transformer encoder/decoder.

mod config;
mod mae;
mod mask;
mod patch;
pub(crate) mod transformer;

pub use config::ModelConfig;
pub use mae::{
    decode_node, embed_node, encode, encode_node, encoder_param_shapes, encoder_param_specs,
    forward_mae, init_encoder_params, init_mae_params, mae_graph, mae_loss_and_grads,
    mae_param_shapes, mae_param_specs, MaeNodes, MaeOutput, ENCODER_PREFIX,
};
pub use mask::{masked_count, sample_mask, MaskPlan};
pub use patch::{patchify, unpatchify, PatchSequence};
