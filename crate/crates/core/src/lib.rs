//! Attention-probe bug detection and line localization over frozen
//! language-model hidden states.

pub mod evalkit;
pub mod localize;
pub mod probe;
pub mod render;
pub mod repstore;
pub mod synth;
pub mod tensor;
pub mod trainer;
