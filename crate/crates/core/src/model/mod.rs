//! Promptable segmentation model: image encoder, prompt encoder and mask decoder.

mod checkpoint;
mod config;
mod layers;
mod network;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, read_checkpoint_header,
    save_checkpoint, CheckpointManifest, Provenance, FORMAT_VERSION,
};
pub use config::{ModelConfig, SKIP_CHANNELS, UPSCALE};
pub use network::{
    ImageEmbedding, ParameterPartition, PromptEmbeddings, PromptSegModel, DECODER_PREFIX,
    ENCODER_PREFIX, PROMPT_ENCODER_PREFIX,
};
pub(crate) use network::tensor_to_logits;
