//! A small Vision Transformer with hand-written backward passes: patch
//! embedding, pre-norm blocks, a final layer norm, a pooling head over the
//! patch tokens, and a linear classifier.

mod backward;
mod checkpoint;
mod config;
pub mod layers;
mod forward;
mod model;
mod train;

pub use backward::{cross_entropy, loss, loss_and_gradients};
pub use checkpoint::{
    checkpoint_tensors, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, RngInfo,
};
pub use config::ToyVitConfig;
pub use forward::{extract_patches, patch_embed, vit_forward, AttentionRecord, BlockAttention, ForwardOutput};
pub use model::{Block, LayerNorm, Linear, ToyVitModel, EMBED_INIT_BOUND, INIT_GAIN};
pub use train::{evaluate, train, EpochRecord, TrainConfig, TrainingTrace};
