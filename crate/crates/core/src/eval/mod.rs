//! Metrics, evaluation reports, label sweeps, run comparison and the
//! synthetic task generator.

pub mod compare;
pub mod harness;
pub mod metrics;
pub mod synthetic;

pub use compare::{compare_runs, ComparisonRow, ComparisonTable};
pub use harness::{
    evaluate, label_sweep_eval, score_instances, EvalReport, ReportMetadata, ScoreRecord,
    TemplateScore, VariantScore,
};
pub use metrics::{accuracy, macro_f1, mean, population_std, Metric};
pub use synthetic::{generate_synthetic, RuleFamily, SyntheticTaskSpec};
