use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::hyper::TrainHyper;
use crate::combiner::CombinationSpec;
use crate::data::{batch_indices, DatasetSplits, TokenizedSequence};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Graph};
use crate::encoder::{Checkpoint, Mode};
use crate::error::{contract_err, Error, Result};
use crate::stats::{accuracy, weighted_f1};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
    pub valid_f1w: f64,
    /// Wall-clock of the training pass (evaluation excluded).
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: CombinationSpec,
    pub seed: u64,
    /// Encoder blocks in the fine-tuned model.
    pub layers: usize,
    /// 1-based epoch whose snapshot produced the test metrics.
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub test_f1w: f64,
    pub epochs: Vec<EpochRecord>,
    pub num_classes: usize,
    pub test_predictions: Vec<usize>,
    pub hyper: TrainHyper,
}

impl RunResult {
    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len().max(1) as f64
    }

    /// Everything except wall-clock times, for reproducibility checks.
    pub fn same_metrics(&self, other: &RunResult) -> bool {
        let strip = |r: &RunResult| {
            let mut r = r.clone();
            r.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            r
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub f1w: f64,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &Classifier, split: &[TokenizedSequence]) -> Result<Evaluation> {
    let predictions = model.predict(split)?;
    let labels: Vec<usize> = split.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        accuracy: accuracy(&predictions, &labels)?,
        f1w: weighted_f1(&predictions, &labels, model.num_classes())?,
        predictions,
    })
}

/// 1-based epoch with the highest validation accuracy; the earliest wins ties.
pub fn select_best_epoch(records: &[EpochRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| contract_err("no epoch records"))?;
    let mut best = first;
    for r in &records[1..] {
        if r.valid_accuracy > best.valid_accuracy {
            best = r;
        }
    }
    Ok(best.epoch)
}

/// A finished run plus the parameters of its best epoch.
#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub result: RunResult,
    pub best_model: Classifier,
}

pub fn fine_tune(
    ckpt: &Checkpoint,
    spec: &CombinationSpec,
    data: &DatasetSplits,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<RunResult> {
    fine_tune_with_snapshot(ckpt, spec, data, hyper, seed).map(|o| o.result)
}

/// Fine-tunes every parameter (encoder, combiner weights, head) with Adam
/// on cross-entropy, snapshotting whenever validation accuracy improves,
/// and reports test metrics of the best snapshot.
pub fn fine_tune_with_snapshot(
    ckpt: &Checkpoint,
    spec: &CombinationSpec,
    data: &DatasetSplits,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<FineTuneOutcome> {
    hyper.validate()?;
    for (name, split) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if split.is_empty() {
            return Err(Error::Input(format!("{name} split is empty")));
        }
    }
    if hyper.max_seq != ckpt.config.max_len {
        return Err(contract_err(format!(
            "hyper max_seq {} differs from the encoder's {}",
            hyper.max_seq, ckpt.config.max_len
        )));
    }
    if let Some(s) = data.train.iter().chain(&data.valid).chain(&data.test).find(|s| s.len() != hyper.max_seq) {
        return Err(contract_err(format!("data tokenized to {} positions, expected {}", s.len(), hyper.max_seq)));
    }
    let mut model = Classifier::new(ckpt, spec, data.num_classes, hyper.p_drop, seed)?;
    let mut adam = AdamState::new(model.params());
    let opt = AdamConfig::with_lr(hyper.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(11);

    let mut records = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, Classifier)> = None;
    for epoch in 0..hyper.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for idx in batch_indices(data.train.len(), hyper.batch_size, seed, epoch as u64) {
            let batch: Vec<&TokenizedSequence> = idx.iter().map(|&i| &data.train[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let logits = model.logits(&mut g, &batch, Mode::Train, &mut dropout_rng)?;
            let loss = g.cross_entropy(logits, &targets)?;
            model.params_mut().zero_grad();
            g.backward(loss, model.params_mut())?;
            adam_step(model.params_mut(), &mut adam, &opt)?;
            loss_sum += g.scalar(loss) * batch.len() as f64;
        }
        let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let valid = evaluate(&model, &data.valid)?;
        let train_loss = loss_sum / data.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Input(format!("training diverged at epoch {} (loss {train_loss})", epoch + 1)));
        }
        log::debug!(
            "{spec} seed {seed} epoch {}: loss {train_loss:.4} valid acc {:.4} ({seconds:.2}s)",
            epoch + 1,
            valid.accuracy
        );
        if best.as_ref().is_none_or(|(acc, _)| valid.accuracy > *acc) {
            best = Some((valid.accuracy, model.clone()));
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            valid_accuracy: valid.accuracy,
            valid_f1w: valid.f1w,
            seconds,
        });
    }
    let best_epoch = select_best_epoch(&records)?;
    let (_, best_model) = best.expect("at least one epoch ran");
    let test = evaluate(&best_model, &data.test)?;
    let result = RunResult {
        spec: *spec,
        seed,
        layers: ckpt.num_layers(),
        best_epoch,
        test_accuracy: test.accuracy,
        test_f1w: test.f1w,
        epochs: records,
        num_classes: data.num_classes,
        test_predictions: test.predictions,
        hyper: hyper.clone(),
    };
    Ok(FineTuneOutcome { result, best_model })
}
