//! Experiment harness: configuration, breadth and depth sweeps with seeded
//! reruns, persisted run records, the training-sufficiency diagnostic,
//! dataset quadrant labels and reports.

mod config;
mod dataset;
mod diagnose;
mod report;
mod run;
mod store;
pub mod synth;

pub use config::{
    DatasetKind, DatasetSpec, ExperimentConfig, GridSpec, SplitSpec, RESULTS_DIR_ENV,
};
pub use dataset::{load_streams, PreparedDataset, SubjectVolume};
pub use diagnose::{
    classify_quadrant, diagnose_cells, interquartile_range, stability_diagnostic,
    stability_of_curves, BreadthClass, DepthClass, QuadrantLabel, QuadrantThresholds,
    StabilityReport, StabilityThresholds, TrainingVerdict,
};
pub use report::{
    box_plot_svg, breadth_table, depth_table, pct, report, stability_table, summary_table, Table,
};
pub use run::{
    derive_seed, replay_manifest, run_breadth_sweep, run_depth_sweep, run_id, run_seed, Cell, Lab,
    LossSummary, PlannedCell, RunRecord, SweepKind, SweepOutcome, SweepPlan,
};
pub use store::{
    checkpoint_name, write_result_rows, Manifest, ManifestRun, ResultsStore, SkippedCell,
    MANIFEST_FORMAT_VERSION, RESULTS_HEADER,
};
