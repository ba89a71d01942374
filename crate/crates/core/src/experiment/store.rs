use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::combiner::CombinationSpec;
use crate::error::{Error, Result};
use crate::trainer::RunResult;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A (spec, seed) run that raised an error instead of producing a result.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub spec: CombinationSpec,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Fingerprint of the config and checkpoint behind every stored result.
    pub config_hash: String,
    /// Blocks of the unpruned encoder.
    pub layers: usize,
    /// Column label for multi-layer report blocks.
    pub dataset: String,
    pub specs: Vec<CombinationSpec>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub failures: Vec<RunFailure>,
}

#[derive(Serialize)]
struct StoredRunRef<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    result: &'a RunResult,
}

#[derive(Deserialize)]
struct StoredRun {
    config_hash: String,
    #[serde(flatten)]
    result: RunResult,
}

/// `<spec>__seed<k>.json`.
pub fn result_file_name(spec: &CombinationSpec, seed: u64) -> String {
    format!("{spec}__seed{seed}.json")
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Input(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// A directory of run results keyed by (spec, seed) plus a manifest.
#[derive(Clone, Debug)]
pub struct ResultsStore {
    dir: PathBuf,
    manifest: Manifest,
    runs: BTreeMap<(CombinationSpec, u64), RunResult>,
}

impl ResultsStore {
    /// Opens `dir` for a grid described by `manifest`, creating it if needed.
    /// An existing manifest with a different fingerprint is an error; the
    /// spec and seed lists are replaced by the new ones and earlier failures
    /// are kept until those runs succeed.
    pub fn create_or_resume(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut manifest = manifest;
        if dir.join(MANIFEST_FILE).exists() {
            let old = read_manifest(dir)?;
            if old.config_hash != manifest.config_hash {
                return Err(Error::Config(format!(
                    "{} holds results of a different config or checkpoint (hash {} vs {}); use a fresh directory",
                    dir.display(),
                    old.config_hash,
                    manifest.config_hash
                )));
            }
            manifest.failures = old.failures;
        }
        let runs = load_runs(dir, &manifest.config_hash)?;
        let store = Self { dir: dir.to_path_buf(), manifest, runs };
        store.write_manifest()?;
        Ok(store)
    }

    /// Opens an existing store read-only; results whose fingerprint differs
    /// from the manifest are rejected.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let runs = load_runs(dir, &manifest.config_hash)?;
        Ok(Self { dir: dir.to_path_buf(), manifest, runs })
    }

    /// An in-memory store, used to build reports from constructed results.
    pub fn in_memory(manifest: Manifest, runs: Vec<RunResult>) -> Self {
        let runs = runs.into_iter().map(|r| ((r.spec, r.seed), r)).collect();
        Self { dir: PathBuf::new(), manifest, runs }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn get(&self, spec: &CombinationSpec, seed: u64) -> Option<&RunResult> {
        self.runs.get(&(*spec, seed))
    }

    pub fn contains(&self, spec: &CombinationSpec, seed: u64) -> bool {
        self.runs.contains_key(&(*spec, seed))
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunResult> {
        self.runs.values()
    }

    /// Results of `spec` for the manifest's seeds, in seed order; `None`
    /// unless every seed is present.
    pub fn runs_for(&self, spec: &CombinationSpec) -> Option<Vec<RunResult>> {
        self.manifest.seeds.iter().map(|&s| self.get(spec, s).cloned()).collect()
    }

    /// Records a finished run on disk and in memory.
    pub fn insert(&mut self, result: RunResult) -> Result<()> {
        let mut bytes = serde_json::to_vec(&StoredRunRef { config_hash: &self.manifest.config_hash, result: &result })?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(result_file_name(&result.spec, result.seed)), &bytes)?;
        self.manifest.failures.retain(|f| !(f.spec == result.spec && f.seed == result.seed));
        self.runs.insert((result.spec, result.seed), result);
        Ok(())
    }

    pub fn record_failure(&mut self, failure: RunFailure) {
        self.manifest.failures.retain(|f| !(f.spec == failure.spec && f.seed == failure.seed));
        self.manifest.failures.push(failure);
        self.manifest.failures.sort_by_key(|f| (f.spec, f.seed));
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), &bytes)
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn load_runs(dir: &Path, hash: &str) -> Result<BTreeMap<(CombinationSpec, u64), RunResult>> {
    let mut runs = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".json") && name.contains("__seed")
        })
        .collect();
    entries.sort();
    for path in entries {
        let text = fs::read_to_string(&path)?;
        let stored: StoredRun =
            serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        if stored.config_hash != hash {
            return Err(Error::Input(format!(
                "{} is stale: produced under config hash {}, manifest has {hash}",
                path.display(),
                stored.config_hash
            )));
        }
        let r = stored.result;
        let expected = result_file_name(&r.spec, r.seed);
        if path.file_name().map(|n| n.to_string_lossy() != expected).unwrap_or(true) {
            return Err(Error::Input(format!("{} holds the result for {expected}", path.display())));
        }
        runs.insert((r.spec, r.seed), r);
    }
    Ok(runs)
}
