//! Small BERT-style encoder exposing the output of every block.

mod checkpoint;
mod config;
mod mlm;
mod model;

pub use checkpoint::{param_layout, Checkpoint, FORMAT_VERSION};
pub use config::EncoderConfig;
pub use mlm::{mask_sequence, mlm_pretrain, MlmHyper, PretrainReport};
pub use model::{embed, embed_graph, encode, encoder_forward, EncoderLayout, EncoderOutput, LayerStates, Mode};
