//! Tokenization, dataset files, synthetic tasks and batching.

mod batch;
mod dataset;
mod synthetic;
mod tokenizer;

pub use batch::{batch_indices, batch_iter};
pub use dataset::{
    load_dataset, read_corpus, write_corpus, ClassCounts, DatasetSplits, Example, RawDataset, SPLIT_FILES,
};
pub use synthetic::{
    gen_synthetic, parse_swapbug, swap_adjacent_operands, swapbug_label, synthetic_corpus, SyntheticTaskSpec, TaskKind,
};
pub use tokenizer::{tokenize, tokenize_bytes, TokenizedSequence, BYTE_OFFSET, CLS, EOS, MASK, PAD, VOCAB_SIZE};
