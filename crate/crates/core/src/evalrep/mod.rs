//! Metrics, case evaluation, ablations, data-efficiency sweeps and report files.

pub mod ablation;
pub mod case;
pub mod metrics;
pub mod reference;
pub mod report;
pub mod sweep;

pub use ablation::{run_ablation, AblationTable, Experiment, VariantResult};
pub use case::{evaluate_case, routing_violations, train_case, Case, CaseData, CaseEvaluation, Classifier, TrainedRun};
pub use metrics::{compute_index_metrics, compute_metrics, ClassMetrics, MetricsReport};
pub use reference::Reference;
pub use report::{emit_report, Format, ReportSet};
pub use sweep::{data_efficiency_sweep, sweep_subset, SweepCell, SweepResult, SWEEP_CATEGORIES, SWEEP_FRACTIONS};
