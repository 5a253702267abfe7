//! Training runs, checkpoints, metrics, sweeps and reports.

mod ablate;
mod checkpoint;
mod config;
mod evaluate;
mod gradcheck;
mod metrics;
mod report;
mod train;

pub use ablate::{ablate, PointSummary, Sweep, SweepPoint, SweepReport, SWEEP_COLUMNS};
pub use checkpoint::{Checkpoint, NamedTensor, BTCK_MAGIC, BTCK_VERSION};
pub use config::{DatasetSpec, DiagnosticsConfig, RunConfig};
pub use evaluate::{evaluate, EvaluationReport};
pub use gradcheck::{gradcheck_suite, GradCheckCase, DEFAULT_GRADCHECK_TOL, GRADCHECK_EPS};
pub use metrics::{metrics_csv, parse_metrics_csv, MetricsRecord, METRICS_COLUMNS};
pub use report::{line_chart, report, Series, XAxis};
pub use train::{
    model_from_checkpoint, probe_model, train, train_to_dir, TrainOutcome, Trainer,
    CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};
