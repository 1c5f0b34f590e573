//! Neural-network layers shared by the convolutional and Transformer streams.

mod attention;
mod conv;
mod norm;

pub use attention::{EncoderLayer, Linear, MultiHeadAttention};
pub use conv::Conv3d;
pub use norm::{BatchNorm3d, BatchStats, LayerNorm, BN_EPS, BN_MOMENTUM, LN_EPS};
