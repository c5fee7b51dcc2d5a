//! Dense tensor operations with explicit backward passes.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use layers::{Encoder, EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use ops::Mode;
pub use tensor::{read_checkpoint, CheckpointRecord, Gradients, ParamId, ParamSet, Tensor};
