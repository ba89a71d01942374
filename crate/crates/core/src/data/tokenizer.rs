//! Byte-level tokenizer with CLS/EOS/PAD framing.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
/// Byte `b` maps to `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: usize = 4;
pub const VOCAB_SIZE: usize = BYTE_OFFSET + 256;

/// One input framed to exactly `S` positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    /// True for real positions, including CLS and EOS.
    pub attention_mask: Vec<bool>,
    /// True for code bytes only.
    pub code_token_mask: Vec<bool>,
    pub label: usize,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    pub fn eos_position(&self) -> Option<usize> {
        self.ids.iter().position(|&id| id == EOS)
    }

    pub fn code_token_count(&self) -> usize {
        self.code_token_mask.iter().filter(|&&b| b).count()
    }

    /// Checks the framing invariants: CLS first, at most one EOS, PAD only
    /// after EOS, and code positions a subset of attended positions that
    /// excludes every special token.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.ids.len();
        if self.attention_mask.len() != n || self.code_token_mask.len() != n {
            return Err(contract_err("mask lengths differ from sequence length"));
        }
        if n == 0 {
            return Ok(());
        }
        if self.ids[0] != CLS {
            return Err(contract_err("position 0 is not CLS"));
        }
        let eos: Vec<usize> = (0..n).filter(|&i| self.ids[i] == EOS).collect();
        if eos.len() > 1 {
            return Err(contract_err("more than one EOS"));
        }
        let first_pad = self.ids.iter().position(|&id| id == PAD);
        if let Some(p) = first_pad {
            match eos.first() {
                Some(&e) if e < p => {}
                _ => return Err(contract_err("PAD appears without a preceding EOS")),
            }
            if self.ids[p..].iter().any(|&id| id != PAD) {
                return Err(contract_err("non-PAD token after PAD"));
            }
        }
        for i in 0..n {
            let id = self.ids[i];
            let special = id < BYTE_OFFSET;
            if self.code_token_mask[i] && (special || !self.attention_mask[i]) {
                return Err(contract_err(format!("position {i} marked as code but is special or unattended")));
            }
            if !special && !self.code_token_mask[i] {
                return Err(contract_err(format!("byte at position {i} not marked as code")));
            }
            if self.attention_mask[i] != (id != PAD) {
                return Err(contract_err(format!("attention mask wrong at position {i}")));
            }
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, max_len: usize) -> TokenizedSequence {
    tokenize_bytes(text.as_bytes(), max_len)
}

/// Frames `bytes` as `[CLS] bytes [EOS] [PAD]…` of length `max_len`.
///
/// When the bytes do not fit alongside CLS and EOS, the tail is cut so the
/// bytes fill positions `1..max_len` and no EOS is emitted.
pub fn tokenize_bytes(bytes: &[u8], max_len: usize) -> TokenizedSequence {
    let mut ids = Vec::with_capacity(max_len);
    if max_len > 0 {
        ids.push(CLS);
    }
    let room = max_len.saturating_sub(1);
    if bytes.len() + 2 <= max_len {
        ids.extend(bytes.iter().map(|&b| BYTE_OFFSET + b as usize));
        ids.push(EOS);
    } else {
        ids.extend(bytes[..room.min(bytes.len())].iter().map(|&b| BYTE_OFFSET + b as usize));
    }
    ids.resize(max_len, PAD);
    let attention_mask = ids.iter().map(|&id| id != PAD).collect();
    let code_token_mask = ids.iter().map(|&id| id >= BYTE_OFFSET).collect();
    TokenizedSequence { ids, attention_mask, code_token_mask, label: 0 }
}
