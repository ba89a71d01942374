use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use earlybird::data::{gen_synthetic, read_corpus, write_corpus};
use earlybird::encoder::{mlm_pretrain, Checkpoint};
use earlybird::experiment::{run_grid, write_reports, ExperimentConfig, GridOptions, ResultsStore};
use earlybird::stats::Metric;
use earlybird::{Error, Result};

/// Early-layer combination experiments for transformer code classifiers.
#[derive(Parser)]
#[command(name = "earlybird", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config's synthetic task as JSON-lines splits plus an
    /// unlabelled pretraining corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Directory for train/valid/test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// MLM-pretrain an encoder of the config's shape on a corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every (spec, seed) of the config, resuming a partial store.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Results directory; defaults to `grid.out` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs; 1 keeps epoch timings comparable.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Stop after this many new runs.
        #[arg(long)]
        max_runs: Option<usize>,
    },
    /// Emit heatmap and pruning reports from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "accuracy")]
        metric: Metric,
        /// Output prefix: writes <prefix>_heatmap.{csv,md} and <prefix>_pruning.{csv,md}.
        #[arg(long)]
        out: PathBuf,
    },
}

const PARTIAL_FAILURE: u8 = 2;

fn synth(config: &Path, data: &Path, corpus: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let spec =
        cfg.data.synthetic.as_ref().ok_or_else(|| Error::Config("`synth` needs a [data.synthetic] section".into()))?;
    gen_synthetic(spec)?.save(data)?;
    println!("wrote {}", data.display());
    if let Some(path) = corpus {
        write_corpus(path, &cfg.data.synthetic_corpus(&cfg.pretrain)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn pretrain(config: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let lines = read_corpus(corpus)?;
    let (ckpt, report) = mlm_pretrain(&lines, &cfg.model, &cfg.pretrain.mlm())?;
    ckpt.save(out)?;
    let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("wrote {} ({} sequences, final MLM loss {last:.4})", out.display(), lines.len());
    Ok(())
}

fn grid(config: &Path, ckpt: &Path, out: Option<&Path>, opts: GridOptions) -> Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.grid.out.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set grid.out".into()))?;
    let ckpt = Checkpoint::load(ckpt)?;
    let summary = run_grid(&cfg, &ckpt, &out, &opts)?;
    println!(
        "{} runs executed, {} already stored, {} pending, {} failed",
        summary.executed,
        summary.skipped,
        summary.pending,
        summary.failures.len()
    );
    for f in &summary.failures {
        eprintln!("failed: {} seed {}: {}", f.spec, f.seed, f.error);
    }
    Ok(if summary.failures.is_empty() { 0 } else { PARTIAL_FAILURE })
}

fn report(results: &Path, metric: Metric, out: &Path) -> Result<()> {
    let store = ResultsStore::open(results)?;
    for p in write_reports(&store, metric, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::Synth { config, data, corpus } => synth(&config, &data, corpus.as_deref()).map(|_| 0),
        Command::Pretrain { config, corpus, out } => pretrain(&config, &corpus, &out).map(|_| 0),
        Command::Grid { config, ckpt, out, jobs, max_runs } => {
            grid(&config, &ckpt, out.as_deref(), GridOptions { jobs, max_runs })
        }
        Command::Report { results, metric, out } => report(&results, metric, &out).map(|_| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
