use serde::{Deserialize, Serialize};

use crate::data::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape of a BERT-style encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of encoder blocks (L).
    pub layers: usize,
    /// Hidden size (H).
    pub hidden: usize,
    /// Sequence length every input is framed to (S).
    pub max_len: usize,
    /// Attention heads (A); must divide `hidden`.
    pub heads: usize,
    /// Feed-forward inner size (F).
    pub ffn: usize,
    /// Vocabulary size (V).
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    /// Desk-scale profile: four blocks of width 32 over 64 positions.
    pub fn desk() -> Self {
        Self { layers: 4, hidden: 32, max_len: 64, heads: 4, ffn: 64, vocab: VOCAB_SIZE, dropout: 0.1 }
    }

    /// The full-size reference shape (12 × 768 over 512 positions).
    pub fn paper_reference() -> Self {
        Self { layers: 12, hidden: 768, max_len: 512, heads: 12, ffn: 3072, vocab: 50265, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.max_len < 4 {
            return bad(format!("max_len {} leaves no room for CLS, a code token, EOS and PAD", self.max_len));
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.ffn == 0 {
            return bad("ffn size must be positive".into());
        }
        if self.vocab <= crate::data::MASK {
            return bad(format!("vocabulary of {} cannot hold the special tokens", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
