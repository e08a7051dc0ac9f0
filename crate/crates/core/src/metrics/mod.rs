//! Confusion matrices, per-class and macro metrics, and run-comparison statistics.

mod confusion;
mod report;
mod stats;

pub use confusion::{macro_average, overall_accuracy, per_class_metrics, ClassMetrics, ConfusionMatrix, MacroMetrics, OneVsRest};
pub use report::{compare_arms, per_class_csv, render_comparison, ArmSamples, ComparisonRow};
pub use stats::{
    bootstrap_ci, cohens_d, ln_gamma, mean, paired_t_test, regularized_incomplete_beta, sample_std, student_t_two_tailed,
    ConfidenceInterval, TTest,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("matrix has no samples")]
    EmptyMatrix,
    #[error("need at least {min} values, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("differences have zero variance; the t statistic is undefined{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    DegenerateVariance { context: Option<String> },
    #[error("non-finite input value")]
    NonFinite,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
