//! Transformer building blocks: attention, feed-forward, positional
//! encoding, convolutional subsampling, layer norm, embeddings and the
//! label-smoothed loss.
//!
//! All blocks use pre-norm residual placement: `x + dropout(f(norm(x)))`.

mod attention;
mod block;
mod layers;
mod loss;
mod params;

pub use attention::{scaled_dot_product_attention, AttentionMask, MaskKind, MultiHeadAttention};
pub use block::{residual_sublayer, DecoderBlock, EncoderBlock, EncoderStack};
pub use layers::{
    add_positional_encoding, halve, sinusoidal_positional_encoding, subsampled_len, ConvSubsample,
    Embedding, FeedForward, LayerNorm, Linear, LAYER_NORM_EPS, MIN_SUBSAMPLE_FRAMES,
};
pub use loss::label_smoothing_loss;
pub use params::{grad_check_block, Binder, ParamStore};
pub(crate) use params::hex_string;

#[cfg(test)]
pub(crate) mod tests;
