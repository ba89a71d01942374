use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::store::{Manifest, ResultsStore, RunFailure};
use crate::combiner::{CombinationSpec, Strategy};
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::trainer::fine_tune;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridOptions {
    /// Concurrent fine-tuning runs; 1 keeps epoch timings free of contention.
    pub jobs: usize,
    /// Stop after this many new runs (the rest stay pending for a resume).
    pub max_runs: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { jobs: 1, max_runs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridSummary {
    /// Runs trained by this invocation.
    pub executed: usize,
    /// Runs already present in the store.
    pub skipped: usize,
    /// Runs still missing because the run limit was reached.
    pub pending: usize,
    /// All recorded failures, including ones from earlier invocations that
    /// were not retried successfully.
    pub failures: Vec<RunFailure>,
}

impl GridSummary {
    pub fn complete(&self) -> bool {
        self.pending == 0 && self.failures.is_empty()
    }
}

/// Fine-tunes every (spec, seed) of the config that the store in `out` does
/// not hold yet. Failed runs are recorded in the manifest and the grid
/// carries on.
pub fn run_grid(config: &ExperimentConfig, ckpt: &Checkpoint, out: &Path, opts: &GridOptions) -> Result<GridSummary> {
    config.validate()?;
    config.check_checkpoint(ckpt)?;
    if opts.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let data = config.data.load(config.train.max_seq)?;
    let specs = config.specs();
    let manifest = Manifest {
        config_hash: config.fingerprint(ckpt)?,
        layers: ckpt.num_layers(),
        dataset: config.data.label(),
        specs: specs.clone(),
        seeds: config.train.seeds.clone(),
        failures: Vec::new(),
    };
    let store = ResultsStore::create_or_resume(out, manifest)?;

    let mut pruned = BTreeMap::new();
    for s in specs.iter().filter(|s| s.strategy == Strategy::Xii) {
        let l = s.layer.expect("validated specs carry a layer");
        if let std::collections::btree_map::Entry::Vacant(e) = pruned.entry(l) {
            e.insert(ckpt.prune(l)?);
        }
    }
    let checkpoint_for = |spec: &CombinationSpec| match (spec.strategy, spec.layer) {
        (Strategy::Xii, Some(l)) => &pruned[&l],
        _ => ckpt,
    };

    let todo: Vec<(CombinationSpec, u64)> = specs
        .iter()
        .flat_map(|s| config.train.seeds.iter().map(move |&seed| (*s, seed)))
        .filter(|(s, seed)| !store.contains(s, *seed))
        .collect();
    let skipped = specs.len() * config.train.seeds.len() - todo.len();
    let limit = opts.max_runs.unwrap_or(usize::MAX).min(todo.len());
    let (now, later) = todo.split_at(limit);
    log::info!("grid: {} runs to do, {skipped} already stored", todo.len());

    let store = Mutex::new(store);
    let run_one = |(spec, seed): &(CombinationSpec, u64)| -> Result<()> {
        let outcome = fine_tune(checkpoint_for(spec), spec, &data, &config.train, *seed);
        let mut store = store.lock().expect("store lock poisoned");
        match outcome {
            Ok(result) => {
                log::info!(
                    "{spec} seed {seed}: test accuracy {:.4}, {:.2}s/epoch",
                    result.test_accuracy,
                    result.mean_epoch_seconds()
                );
                store.insert(result)?;
            }
            Err(e) => {
                log::warn!("{spec} seed {seed} failed: {e}");
                store.record_failure(RunFailure { spec: *spec, seed: *seed, error: e.to_string() });
            }
        }
        store.write_manifest()
    };
    if opts.jobs == 1 {
        now.iter().try_for_each(run_one)?;
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.jobs)))?;
        pool.install(|| now.par_iter().try_for_each(run_one))?;
    }
    let store = store.into_inner().expect("store lock poisoned");
    Ok(GridSummary { executed: now.len(), skipped, pending: later.len(), failures: store.manifest().failures.clone() })
}
