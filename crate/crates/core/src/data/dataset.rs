//! JSON-lines dataset files (`train.jsonl`, `valid.jsonl`, `test.jsonl`).

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tokenizer::{tokenize, TokenizedSequence};
use crate::error::{Error, Result};

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "valid.jsonl", "test.jsonl"];

/// One labelled raw sample as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

/// Untokenized train/valid/test splits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawDataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Per-class sample counts of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplits {
    pub train: Vec<TokenizedSequence>,
    pub valid: Vec<TokenizedSequence>,
    pub test: Vec<TokenizedSequence>,
    pub num_classes: usize,
    pub class_counts: ClassCounts,
}

fn counts(xs: &[Example], c: usize) -> Vec<usize> {
    let mut out = vec![0; c];
    for x in xs {
        out[x.label] += 1;
    }
    out
}

impl RawDataset {
    pub fn splits(&self) -> [(&'static str, &[Example]); 3] {
        [("train", &self.train), ("valid", &self.valid), ("test", &self.test)]
    }

    /// Writes the three split files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for ((_, split), file) in self.splits().into_iter().zip(SPLIT_FILES) {
            let mut out = std::io::BufWriter::new(fs::File::create(dir.join(file))?);
            for ex in split {
                serde_json::to_writer(&mut out, ex)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut splits = SPLIT_FILES.iter().map(|f| read_jsonl(&dir.join(f)));
        let ds = Self { train: splits.next().unwrap()?, valid: splits.next().unwrap()?, test: splits.next().unwrap()? };
        if ds.train.is_empty() {
            return Err(Error::Dataset { path: dir.join(SPLIT_FILES[0]), message: "no examples".into() });
        }
        Ok(ds)
    }

    /// Number of classes implied by the training labels.
    pub fn num_classes(&self) -> usize {
        self.train.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    /// Tokenizes every split to `max_len` positions after checking that the
    /// validation and test labels fall inside the training label range.
    pub fn tokenize(&self, max_len: usize) -> Result<DatasetSplits> {
        let c = self.num_classes();
        for ((name, split), file) in self.splits().into_iter().zip(SPLIT_FILES) {
            if let Some((i, ex)) = split.iter().enumerate().find(|(_, e)| e.label >= c) {
                return Err(Error::Dataset {
                    path: PathBuf::from(file),
                    message: format!(
                        "{name} example {} has label {} but the training split defines {c} classes",
                        i + 1,
                        ex.label
                    ),
                });
            }
        }
        let train_counts = counts(&self.train, c);
        for (label, _) in train_counts.iter().enumerate().filter(|(_, &n)| n == 0) {
            log::warn!("label {label} never occurs in the training split");
        }
        let tok = |xs: &[Example]| -> Vec<TokenizedSequence> {
            xs.iter().map(|e| tokenize(&e.text, max_len).with_label(e.label)).collect()
        };
        Ok(DatasetSplits {
            train: tok(&self.train),
            valid: tok(&self.valid),
            test: tok(&self.test),
            num_classes: c,
            class_counts: ClassCounts {
                train: train_counts,
                valid: counts(&self.valid, c),
                test: counts(&self.test, c),
            },
        })
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Dataset { path: path.to_path_buf(), message: format!("cannot open: {e}") })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?;
        out.push(ex);
    }
    Ok(out)
}

/// Loads and tokenizes a dataset directory.
pub fn load_dataset(dir: &Path, max_len: usize) -> Result<DatasetSplits> {
    RawDataset::load(dir)?.tokenize(max_len)
}

/// Reads a pretraining corpus: one sequence per line, either a JSON string
/// (so samples may contain newlines), a `{"text": ...}` object, or raw text.
/// Blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Dataset { path: path.to_path_buf(), message: format!("cannot read: {e}") })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let t = line.trim_start();
        let parsed = if t.starts_with('"') {
            serde_json::from_str::<String>(line).map_err(|e| e.to_string())
        } else if t.starts_with('{') {
            serde_json::from_str::<Example>(line).map(|e| e.text).or_else(|_| {
                #[derive(Deserialize)]
                struct Text {
                    text: String,
                }
                serde_json::from_str::<Text>(line).map(|t| t.text).map_err(|e| e.to_string())
            })
        } else {
            Ok(line.to_owned())
        };
        out.push(
            parsed.map_err(|e| Error::Dataset { path: path.to_path_buf(), message: format!("line {}: {e}", i + 1) })?,
        );
    }
    Ok(out)
}

/// Writes one JSON string per line.
pub fn write_corpus(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
