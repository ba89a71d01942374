use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fine-tuning hyperparameters. Every run result carries a copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub p_drop: f64,
    pub seeds: Vec<u64>,
    pub max_seq: usize,
}

impl TrainHyper {
    /// B=64, lr=1e-5, 10 epochs, dropout 0.1, seeds 0..9, S=512.
    pub fn paper_reference() -> Self {
        Self { batch_size: 64, learning_rate: 1e-5, epochs: 10, p_drop: 0.1, seeds: (0..10).collect(), max_seq: 512 }
    }

    /// Small-model profile: a larger step size makes up for the tiny
    /// pretraining budget.
    pub fn desk() -> Self {
        Self { batch_size: 32, learning_rate: 1e-3, epochs: 10, p_drop: 0.1, seeds: vec![0, 1, 2], max_seq: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} is not a finite non-negative number", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop {} outside [0, 1)", self.p_drop));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        Ok(())
    }
}
