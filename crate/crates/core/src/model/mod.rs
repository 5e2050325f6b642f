//! Encoder-decoder with factorised embeddings and a copy-gated output layer.

mod check;
mod checkpoint;
mod config;
mod decode;
mod params;
mod transformer;

pub use check::param_grad_check;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, inspect_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointHeader, ManifestEntry, FORMAT_VERSION,
};
pub use config::ModelConfig;
pub use decode::{
    argmax, beam_search, compose_embedding, copy_mix, decode_step, encode, greedy, soft_argmax, soft_decode,
    soft_decode_graph, DecoderStepState, Hypothesis, SoftDecoded, LOG_FLOOR,
};
pub use params::TransformerParams;
pub use transformer::{positional, Decoded, Encoded, Net, Step, StepDecoder};

#[cfg(test)]
mod tests;
