use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combiner::{full_grid, CombinationSpec};
use crate::data::{gen_synthetic, load_dataset, synthetic_corpus, DatasetSplits, SyntheticTaskSpec};
use crate::encoder::{Checkpoint, EncoderConfig, MlmHyper};
use crate::error::{Error, Result};
use crate::trainer::{check_spec, TrainHyper};

/// MLM pretraining settings plus the size of the synthetic corpus drawn when
/// no corpus file is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_corpus_size")]
    pub corpus_size: usize,
    #[serde(default = "default_corpus_seed")]
    pub corpus_seed: u64,
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_corpus_size() -> usize {
    1000
}

fn default_corpus_seed() -> u64 {
    7
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let m = MlmHyper::default();
        Self {
            epochs: m.epochs,
            batch_size: m.batch_size,
            learning_rate: m.learning_rate,
            mask_rate: m.mask_rate,
            seed: m.seed,
            corpus_size: default_corpus_size(),
            corpus_seed: default_corpus_seed(),
        }
    }
}

impl PretrainConfig {
    pub fn mlm(&self) -> MlmHyper {
        MlmHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            mask_rate: self.mask_rate,
            seed: self.seed,
        }
    }
}

/// Where the labelled data comes from: a directory of JSON-lines splits or a
/// synthetic task generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
}

impl DataConfig {
    pub fn synthetic(spec: SyntheticTaskSpec) -> Self {
        Self { dir: None, synthetic: Some(spec) }
    }

    fn validate(&self) -> Result<()> {
        match (&self.dir, &self.synthetic) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config("[data] needs exactly one of `dir` or `synthetic`".into())),
        }
    }

    /// Short label used as the column name of multi-layer report blocks.
    pub fn label(&self) -> String {
        match (&self.dir, &self.synthetic) {
            (Some(dir), _) => {
                dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
            }
            (_, Some(s)) => s.kind.name().to_owned(),
            _ => "data".into(),
        }
    }

    pub fn load(&self, max_len: usize) -> Result<DatasetSplits> {
        self.validate()?;
        match (&self.dir, &self.synthetic) {
            (Some(dir), _) => load_dataset(dir, max_len),
            (_, Some(spec)) => gen_synthetic(spec)?.tokenize(max_len),
            _ => unreachable!("validated above"),
        }
    }

    /// Unlabelled pretraining corpus matching a synthetic task.
    pub fn synthetic_corpus(&self, pretrain: &PretrainConfig) -> Result<Vec<String>> {
        let spec =
            self.synthetic.as_ref().ok_or_else(|| Error::Config("a synthetic corpus needs [data.synthetic]".into()))?;
        Ok(synthetic_corpus(spec.kind, pretrain.corpus_size, pretrain.corpus_seed, spec.max_raw_len))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Specs to run; the full grid for the model's depth when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specs: Option<Vec<CombinationSpec>>,
    /// Default results directory for `grid` when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// One experiment: encoder shape, fine-tuning hyperparameters (including the
/// seed list), data source and the specs to compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: EncoderConfig,
    pub train: TrainHyper,
    pub data: DataConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

impl ExperimentConfig {
    /// The desk profile on the synthetic three-class task.
    pub fn desk() -> Self {
        Self {
            model: EncoderConfig::desk(),
            train: TrainHyper::desk(),
            data: DataConfig::synthetic(SyntheticTaskSpec::new(crate::data::TaskKind::Paren3, 2000, 500, 500, 1)),
            grid: GridConfig::default(),
            pretrain: PretrainConfig { epochs: 30, ..PretrainConfig::default() },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.train.max_seq != self.model.max_len {
            return Err(Error::Config(format!(
                "train.max_seq {} differs from model.max_len {}",
                self.train.max_seq, self.model.max_len
            )));
        }
        let specs = self.specs();
        if !specs.iter().any(CombinationSpec::is_baseline) {
            return Err(Error::Config("grid.specs must include the baseline `i`".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if specs[..i].contains(s) {
                return Err(Error::Config(format!("grid.specs lists `{s}` twice")));
            }
            let layers = match s.layer {
                Some(l) if s.strategy == crate::combiner::Strategy::Xii => {
                    if l >= self.model.layers {
                        return Err(Error::Config(format!(
                            "`{s}` prunes to {l} layers but the model only has {}",
                            self.model.layers
                        )));
                    }
                    l
                }
                _ => self.model.layers,
            };
            check_spec(s, layers).map_err(|e| Error::Config(format!("grid.specs: {e}")))?;
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<CombinationSpec> {
        self.grid.specs.clone().unwrap_or_else(|| full_grid(self.model.layers))
    }

    /// Digest of everything that determines a run's outcome: model shape,
    /// fine-tuning hyperparameters, data source and the pretrained weights.
    /// The spec list is excluded so a grid can be extended in place.
    pub fn fingerprint(&self, ckpt: &Checkpoint) -> Result<String> {
        let mut h = Sha256::new();
        for part in [
            serde_json::to_vec(&self.model)?,
            serde_json::to_vec(&self.train)?,
            serde_json::to_vec(&self.data)?,
            ckpt.to_bytes()?,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(&part);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Checks that a checkpoint has the configured encoder shape.
    pub fn check_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let (a, b) = (&self.model, &ckpt.config);
        if (a.layers, a.hidden, a.max_len, a.heads, a.ffn, a.vocab)
            != (b.layers, b.hidden, b.max_len, b.heads, b.ffn, b.vocab)
        {
            return Err(Error::Config(format!("checkpoint shape {b:?} does not match [model] {a:?}")));
        }
        Ok(())
    }
}
