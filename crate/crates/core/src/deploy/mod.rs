//! Frozen-model export and inference.

pub mod bitconv;
pub mod format;
pub mod pack;

pub use bitconv::{Padding, binary_conv01, binary_conv_popcount, pack_sign_rows, pack_signs, xnor_dot};
pub use format::{ConvPath, InferenceLayer, InferenceModel, export};
pub use pack::{PackedIndices, PackedWeights, pack};
