//! Experiment configs, the resumable results store, the grid runner and
//! report emission.

mod config;
mod grid;
mod report;
mod store;

pub use config::{DataConfig, ExperimentConfig, GridConfig, PretrainConfig};
pub use grid::{run_grid, GridOptions, GridSummary};
pub use report::{
    emit_heatmap_report, emit_pruning_table, format_diff, write_reports, HeatmapCell, HeatmapReport, HeatmapRow,
    PruningReport, PruningRow, PruningStats,
};
pub use store::{result_file_name, write_atomic, Manifest, ResultsStore, RunFailure, MANIFEST_FILE};
