//! The segmentation network, its tokenizer, EMA maintenance and checkpoint
//! files.

pub mod checkpoint;
pub mod ema;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod tokenizer;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use ema::ema_update;
pub use network::{
    backward, forward, forward_with_cache, init_params, Cache, ForwardOutput, ModelConfig,
    OutputGrads,
};
pub use tensor::{ModelParams, ParamSet, Real, Tensor};
pub use tokenizer::{TokenSequence, Vocabulary, MAX_TOKENS, PAD_ID, UNK_ID, UNK_POS_ID};
