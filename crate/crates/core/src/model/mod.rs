//! TEO, TEP and TED transformer variants.

mod config;
mod layers;
mod params;
mod transformer;

pub use config::{Architecture, ModelConfig};
pub use layers::{
    attention, causal_mask, decoder_layer, embed_input, encoder_layer, encoder_pooling_layer,
    feed_forward, multi_head_attention, positional_encoding, AttentionVars, DecoderLayerVars,
    Dropout, EncoderLayerVars, FfnVars, NormVars,
};
pub use params::{Binding, ModelParams, Param, ParamId};
pub use transformer::{DecoderInput, ForwardOutput, Transformer, BOX_DIM};
