use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::store::ResultsStore;
use crate::combiner::{CombinationSpec, Scope, Strategy};
use crate::error::{Error, Result};
use crate::stats::{compare_to_baseline, format_mmss, format_speedup, speedup, ComparisonResult, Magnitude, Metric};
use crate::trainer::RunResult;

/// A metric difference in percentage points with one decimal and a sign.
pub fn format_diff(diff: f64) -> String {
    let pp = 100.0 * diff;
    // keep exact zeros (including -0.0) positive
    let pp = if pp == 0.0 { 0.0 } else { pp };
    format!("{pp:+.1}")
}

fn magnitude_suffix(m: Magnitude) -> String {
    match m {
        Magnitude::Negligible => String::new(),
        _ => format!(" [{}]", m.tag()),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn csv_line(out: &mut String, fields: &[String]) {
    let line: Vec<String> = fields.iter().map(|f| csv_field(f)).collect();
    out.push_str(&line.join(","));
    out.push('\n');
}

/// One heatmap cell: a spec compared against the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapCell {
    pub spec: CombinationSpec,
    /// Shown as `bsln` instead of a difference.
    pub is_baseline: bool,
    /// `None` when some seeds of the spec have no result.
    pub comparison: Option<ComparisonResult>,
}

impl HeatmapCell {
    /// `+d.d` with a trailing `*` for significant differences, `bsln` for
    /// the baseline position and `n/a` for incomplete runs.
    pub fn text(&self) -> String {
        match (&self.comparison, self.is_baseline) {
            (_, true) => "bsln".into(),
            (None, _) => "n/a".into(),
            (Some(c), _) => format!("{}{}", format_diff(c.mean_diff), if c.significant { "*" } else { "" }),
        }
    }

    fn markdown(&self) -> String {
        match &self.comparison {
            Some(c) if !self.is_baseline => format!("{}{}", self.text(), magnitude_suffix(c.magnitude)),
            _ => self.text(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRow {
    pub strategy: Strategy,
    /// `None` for strategies without a token scope.
    pub scope: Option<Scope>,
    /// Single-layer rows: one entry per layer 1..=L (`None` where the grid
    /// has no such spec). Multi-layer rows: a single entry.
    pub cells: Vec<Option<HeatmapCell>>,
}

impl HeatmapRow {
    pub fn label(&self) -> String {
        let base = format!("({}) {}", self.strategy.roman(), self.strategy.description());
        match self.scope {
            Some(Scope::All) => format!("{base}, all tokens"),
            Some(Scope::Code) => format!("{base}, code tokens"),
            None => base,
        }
    }
}

/// Differences against the baseline for single-layer strategies (one column
/// per layer) and multi-layer strategies (one column for the dataset).
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapReport {
    pub metric: Metric,
    pub layers: usize,
    pub dataset: String,
    pub baseline_mean: f64,
    pub single: Vec<HeatmapRow>,
    pub multi: Vec<HeatmapRow>,
}

const SINGLE_LAYER: [Strategy; 3] = [Strategy::Ii, Strategy::V, Strategy::Ix];
const MULTI_LAYER: [Strategy; 7] =
    [Strategy::Iii, Strategy::Iv, Strategy::Vi, Strategy::Vii, Strategy::Viii, Strategy::X, Strategy::Xi];

fn baseline_runs(store: &ResultsStore) -> Result<Vec<RunResult>> {
    store.runs_for(&CombinationSpec::baseline()).ok_or_else(|| {
        Error::Report(format!("baseline `i` results are missing for some of the seeds {:?}", store.manifest().seeds))
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn comparison(
    store: &ResultsStore,
    base: &[RunResult],
    spec: &CombinationSpec,
    metric: Metric,
) -> Result<Option<ComparisonResult>> {
    match store.runs_for(spec) {
        Some(runs) => compare_to_baseline(base, &runs, metric).map(Some),
        None => Ok(None),
    }
}

fn scopes_for(strategy: Strategy) -> Vec<Option<Scope>> {
    if strategy.uses_scope() {
        vec![Some(Scope::All), Some(Scope::Code)]
    } else {
        vec![None]
    }
}

pub fn emit_heatmap_report(store: &ResultsStore, metric: Metric) -> Result<HeatmapReport> {
    let base = baseline_runs(store)?;
    let m = store.manifest();
    let layers = m.layers;
    let in_grid = |s: &CombinationSpec| m.specs.contains(s);
    let cell = |spec: CombinationSpec, is_baseline: bool| -> Result<HeatmapCell> {
        let comparison = if is_baseline {
            Some(compare_to_baseline(&base, &base, metric)?)
        } else {
            comparison(store, &base, &spec, metric)?
        };
        Ok(HeatmapCell { spec, is_baseline, comparison })
    };

    let mut single = Vec::new();
    for strategy in SINGLE_LAYER {
        for scope in scopes_for(strategy) {
            let mut cells = Vec::with_capacity(layers);
            for l in 1..=layers {
                let spec = CombinationSpec::new(strategy, Some(l), scope.unwrap_or(Scope::All))?;
                let c = if strategy == Strategy::Ii && l == layers {
                    Some(cell(CombinationSpec::baseline(), true)?)
                } else if in_grid(&spec) {
                    Some(cell(spec, false)?)
                } else {
                    None
                };
                cells.push(c);
            }
            if strategy == Strategy::Ii || cells.iter().any(Option::is_some) {
                single.push(HeatmapRow { strategy, scope, cells });
            }
        }
    }
    let mut multi = Vec::new();
    for strategy in MULTI_LAYER {
        for scope in scopes_for(strategy) {
            let spec = CombinationSpec::new(strategy, None, scope.unwrap_or(Scope::All))?;
            if in_grid(&spec) {
                multi.push(HeatmapRow { strategy, scope, cells: vec![Some(cell(spec, false)?)] });
            }
        }
    }
    Ok(HeatmapReport {
        metric,
        layers,
        dataset: m.dataset.clone(),
        baseline_mean: mean(base.iter().map(|r| metric.of(r))),
        single,
        multi,
    })
}

impl HeatmapReport {
    /// Every cell as one CSV record with the underlying comparison.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        csv_line(
            &mut out,
            &["block", "row", "column", "spec", "cell", "mean_diff", "p_value", "significant", "a12", "magnitude"]
                .map(String::from),
        );
        let blocks = [("single", &self.single), ("multi", &self.multi)];
        for (block, rows) in blocks {
            for row in rows {
                for (i, c) in row.cells.iter().enumerate() {
                    let Some(c) = c else { continue };
                    let column = if block == "single" { format!("l={}", i + 1) } else { self.dataset.clone() };
                    let mut fields = vec![block.to_owned(), row.label(), column, c.spec.to_string(), c.text()];
                    match &c.comparison {
                        Some(r) => fields.extend([
                            r.mean_diff.to_string(),
                            r.p_value.to_string(),
                            r.significant.to_string(),
                            r.a12.to_string(),
                            r.magnitude.name().to_owned(),
                        ]),
                        None => fields.extend(std::iter::repeat_n(String::new(), 5)),
                    }
                    csv_line(&mut out, &fields);
                }
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let name = self.metric.name();
        let _ = writeln!(out, "# Difference of mean {name} against the baseline\n");
        let _ = writeln!(
            out,
            "Baseline (CLS, last layer) mean {name}: {:.1}. Cells are percentage points; `*` marks p < 0.05 \
             (Wilcoxon signed-rank), `[S]`/`[M]`/`[L]` the A12 effect size.\n",
            100.0 * self.baseline_mean
        );
        let _ = writeln!(out, "## Single-layer combinations\n");
        let mut header = "| combination |".to_owned();
        let mut rule = "|---|".to_owned();
        for l in 1..=self.layers {
            let _ = write!(header, " l={l} |");
            rule.push_str("---:|");
        }
        let _ = writeln!(out, "{header}\n{rule}");
        for row in &self.single {
            let cells: Vec<String> =
                row.cells.iter().map(|c| c.as_ref().map(HeatmapCell::markdown).unwrap_or_default()).collect();
            let _ = writeln!(out, "| {} | {} |", row.label(), cells.join(" | "));
        }
        if !self.multi.is_empty() {
            let _ = writeln!(out, "\n## Multi-layer combinations\n");
            let _ = writeln!(out, "| combination | {} |\n|---|---:|", self.dataset);
            for row in &self.multi {
                let c = row.cells[0].as_ref().map(HeatmapCell::markdown).unwrap_or_default();
                let _ = writeln!(out, "| {} | {c} |", row.label());
            }
        }
        out
    }
}

/// One row of the pruning trade-off table.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningRow {
    /// Encoder blocks kept.
    pub layers: usize,
    pub spec: CombinationSpec,
    /// `None` when the row's runs are incomplete.
    pub stats: Option<PruningStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningStats {
    /// Mean over seeds of the mean epoch wall-clock.
    pub epoch_seconds: f64,
    pub speedup: f64,
    pub mean_accuracy: f64,
    pub mean_f1w: f64,
    pub accuracy: ComparisonResult,
    pub f1w: ComparisonResult,
}

/// Fine-tuning time and metric change of pruned models against the
/// baseline, from `l = L` (the baseline itself) down to `l = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningReport {
    pub dataset: String,
    pub rows: Vec<PruningRow>,
}

fn epoch_seconds(runs: &[RunResult]) -> f64 {
    mean(runs.iter().map(RunResult::mean_epoch_seconds))
}

pub fn emit_pruning_table(store: &ResultsStore) -> Result<PruningReport> {
    let base = baseline_runs(store)?;
    let m = store.manifest();
    let base_time = epoch_seconds(&base);
    let mut rows = Vec::with_capacity(m.layers);
    for l in (1..=m.layers).rev() {
        let spec = if l == m.layers {
            CombinationSpec::baseline()
        } else {
            CombinationSpec::new(Strategy::Xii, Some(l), Scope::All)?
        };
        let stats = match store.runs_for(&spec) {
            Some(runs) => {
                let t = epoch_seconds(&runs);
                Some(PruningStats {
                    epoch_seconds: t,
                    speedup: speedup(base_time, t)?,
                    mean_accuracy: mean(runs.iter().map(|r| r.test_accuracy)),
                    mean_f1w: mean(runs.iter().map(|r| r.test_f1w)),
                    accuracy: compare_to_baseline(&base, &runs, Metric::Accuracy)?,
                    f1w: compare_to_baseline(&base, &runs, Metric::F1w)?,
                })
            }
            None => None,
        };
        rows.push(PruningRow { layers: l, spec, stats });
    }
    Ok(PruningReport { dataset: m.dataset.clone(), rows })
}

/// `**+d.d**` for significant gains, `-d.d*` for insignificant losses.
fn pruning_delta(c: &ComparisonResult) -> String {
    let d = format_diff(c.mean_diff);
    let text = if c.significant && c.mean_diff > 0.0 {
        format!("**{d}**")
    } else if !c.significant && c.mean_diff < 0.0 {
        format!("{d}*")
    } else {
        d
    };
    format!("{text}{}", magnitude_suffix(c.magnitude))
}

impl PruningReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        csv_line(
            &mut out,
            &[
                "l",
                "spec",
                "time",
                "epoch_seconds",
                "speedup",
                "mean_accuracy",
                "mean_f1w",
                "d_accuracy",
                "p_accuracy",
                "a12_accuracy",
                "magnitude_accuracy",
                "d_f1w",
                "p_f1w",
                "a12_f1w",
                "magnitude_f1w",
            ]
            .map(String::from),
        );
        for row in &self.rows {
            let mut fields = vec![row.layers.to_string(), row.spec.to_string()];
            match &row.stats {
                Some(s) => {
                    fields.extend([
                        format_mmss(s.epoch_seconds),
                        s.epoch_seconds.to_string(),
                        format_speedup(s.speedup),
                        s.mean_accuracy.to_string(),
                        s.mean_f1w.to_string(),
                    ]);
                    for c in [&s.accuracy, &s.f1w] {
                        fields.extend([
                            c.mean_diff.to_string(),
                            c.p_value.to_string(),
                            c.a12.to_string(),
                            c.magnitude.name().to_owned(),
                        ]);
                    }
                }
                None => {
                    fields.push("missing".into());
                    fields.extend(std::iter::repeat_n(String::new(), 12));
                }
            }
            csv_line(&mut out, &fields);
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Pruned models against the baseline ({})\n", self.dataset);
        let _ = writeln!(
            out,
            "Time is the mean one-epoch fine-tuning wall-clock (m:ss). Row l=L is the baseline with absolute \
             metrics; other rows give differences in percentage points. Bold marks significant gains, `*` \
             insignificant losses, `[S]`/`[M]`/`[L]` the A12 effect size.\n"
        );
        let _ = writeln!(out, "| l | Time | Seconds | Speed-up | Acc | F1(w) |\n|---:|---:|---:|---:|---:|---:|");
        let top = self.rows.first().map(|r| r.layers).unwrap_or(0);
        for row in &self.rows {
            match &row.stats {
                Some(s) => {
                    let (acc, f1) = if row.layers == top {
                        (format!("{:.1}", 100.0 * s.mean_accuracy), format!("{:.1}", 100.0 * s.mean_f1w))
                    } else {
                        (pruning_delta(&s.accuracy), pruning_delta(&s.f1w))
                    };
                    let _ = writeln!(
                        out,
                        "| {} | {} | {:.2} | {} | {acc} | {f1} |",
                        row.layers,
                        format_mmss(s.epoch_seconds),
                        s.epoch_seconds,
                        format_speedup(s.speedup)
                    );
                }
                None => {
                    let _ = writeln!(out, "| {} | missing | | | | |", row.layers);
                }
            }
        }
        out
    }
}

/// Writes `<prefix>_heatmap.{csv,md}` and `<prefix>_pruning.{csv,md}`.
pub fn write_reports(store: &ResultsStore, metric: Metric, prefix: &Path) -> Result<Vec<PathBuf>> {
    let heat = emit_heatmap_report(store, metric)?;
    let prune = emit_pruning_table(store)?;
    let name = prefix.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let path = |suffix: &str| prefix.with_file_name(format!("{name}_{suffix}"));
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let files = [
        (path("heatmap.csv"), heat.to_csv()),
        (path("heatmap.md"), heat.to_markdown()),
        (path("pruning.csv"), prune.to_csv()),
        (path("pruning.md"), prune.to_markdown()),
    ];
    let mut written = Vec::new();
    for (p, text) in files {
        fs::write(&p, text)?;
        written.push(p);
    }
    Ok(written)
}
