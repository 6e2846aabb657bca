//! Byte-level decoder-only target transformer and its supporting pieces.

pub mod checkpoint;
mod config;
mod kv_cache;
mod sampling;
pub mod tokenizer;
mod transformer;

pub use config::ModelConfig;
pub use kv_cache::{KvCache, LayerCache};
pub use sampling::{sample_from_probs, sample_token, SamplerRng};
pub(crate) use transformer::normal_tensor;
pub use transformer::{init_block, Block, BlockVars, ForwardOutput, TargetModel, TargetVars, TARGET_KIND};
