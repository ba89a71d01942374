//! Fine-tuning an encoder, combiner and classification head end to end.

mod classifier;
mod fine_tune;
mod head;
mod hyper;

pub use classifier::{check_spec, Classifier, HEAD_BIAS, HEAD_WEIGHT, LAYER_WEIGHTS, TOKEN_WEIGHTS};
pub use fine_tune::{
    evaluate, fine_tune, fine_tune_with_snapshot, select_best_epoch, EpochRecord, Evaluation, FineTuneOutcome,
    RunResult,
};
pub use head::{head_forward, ClassifierHead};
pub use hyper::TrainHyper;
