//! Masked-language-model pretraining.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::EncoderConfig;
use super::model::{encoder_forward, EncoderLayout, Mode};
use crate::data::{batch_indices, tokenize, TokenizedSequence, MASK};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mask_rate() -> f64 {
    0.15
}

impl Default for MlmHyper {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, learning_rate: 1e-3, mask_rate: 0.15, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean masked-token cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    pub masked_positions: usize,
    pub code_positions: usize,
}

impl PretrainReport {
    pub fn masked_fraction(&self) -> f64 {
        self.masked_positions as f64 / self.code_positions.max(1) as f64
    }
}

/// Replaces `round(rate · n_code)` code positions (at least one) with MASK.
/// Returns the masked sequence and the chosen positions in ascending order.
pub fn mask_sequence(seq: &TokenizedSequence, rate: f64, rng: &mut ChaCha8Rng) -> (TokenizedSequence, Vec<usize>) {
    let code: Vec<usize> = (0..seq.ids.len()).filter(|&i| seq.code_token_mask[i]).collect();
    if code.is_empty() {
        return (seq.clone(), Vec::new());
    }
    let k = ((code.len() as f64 * rate).round() as usize).clamp(1, code.len());
    let mut picked: Vec<usize> = sample(rng, code.len(), k).into_iter().map(|i| code[i]).collect();
    picked.sort_unstable();
    let mut masked = seq.clone();
    for &p in &picked {
        masked.ids[p] = MASK;
    }
    (masked, picked)
}

/// Pretrains a fresh encoder on `corpus` by predicting masked bytes through
/// a linear vocabulary head. The head is discarded afterwards.
pub fn mlm_pretrain(
    corpus: &[String],
    config: &EncoderConfig,
    hyper: &MlmHyper,
) -> Result<(Checkpoint, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    let seqs: Vec<TokenizedSequence> = corpus.iter().map(|t| tokenize(t, config.max_len)).collect();
    let init = Checkpoint::init(config, hyper.seed)?;
    let mut params: ParamSet = init.params.clone();
    let mut init_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    init_rng.set_stream(1);
    let head_w = params.insert("mlm.weight", Tensor::randn(&[config.hidden, config.vocab], 0.02, &mut init_rng))?;
    let head_b = params.insert("mlm.bias", Tensor::zeros(&[config.vocab]))?;
    let layout = EncoderLayout::resolve(config, &params)?;

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    dropout_rng.set_stream(2);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    mask_rng.set_stream(3);
    let mut adam = AdamState::new(&params);
    let opt = AdamConfig::with_lr(hyper.learning_rate);
    let mut report = PretrainReport { epoch_losses: Vec::new(), masked_positions: 0, code_positions: 0 };

    for epoch in 0..hyper.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in batch_indices(seqs.len(), hyper.batch_size, hyper.seed, epoch as u64) {
            let mut masked = Vec::with_capacity(idx.len());
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for (b, &i) in idx.iter().enumerate() {
                let (m, picked) = mask_sequence(&seqs[i], hyper.mask_rate, &mut mask_rng);
                report.code_positions += seqs[i].code_token_count();
                report.masked_positions += picked.len();
                for p in picked {
                    rows.push(b * config.max_len + p);
                    targets.push(seqs[i].ids[p]);
                }
                masked.push(m);
            }
            if rows.is_empty() {
                continue;
            }
            let refs: Vec<&TokenizedSequence> = masked.iter().collect();
            let mut g = Graph::new();
            let out = encoder_forward(&mut g, &params, &layout, &refs, Mode::Train, &mut dropout_rng)?;
            let last = *out.layers.last().expect("at least one layer");
            let picked = g.gather_rows(last, &rows)?;
            let w = g.param(&params, head_w);
            let bias = g.param(&params, head_b);
            let logits = g.matmul(picked, w)?;
            let logits = g.add_bias(logits, bias)?;
            let loss = g.cross_entropy(logits, &targets)?;
            params.zero_grad();
            g.backward(loss, &mut params)?;
            adam_step(&mut params, &mut adam, &opt)?;
            loss_sum += g.scalar(loss);
            batches += 1;
        }
        let mean = loss_sum / batches.max(1) as f64;
        log::info!("mlm epoch {} loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    Ok((Checkpoint::from_params(config, &params)?, report))
}
