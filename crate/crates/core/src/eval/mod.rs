//! Metrics, statistics, the α grid search and report rendering.

pub mod grid;
pub mod metrics;
pub mod report;
pub mod stats;

pub use grid::{argmax_trial, grid_search, per_tag_best, simplex_grid, AlphaTrial, GridSummary, TagBest, Target};
pub use metrics::{metric_report, multilabel_report, prediction_counts, ClassScore, MetricReport};
pub use report::{
    analyze_grid, analyze_run, cross_head_correlation, regress_alpha_to_f1, regress_with_reference, CorrelationInput,
    CorrelationTable,
};
pub use stats::{cohens_kappa, midranks, ols, pearson, prediction_distribution_kl, spearman, Divergence, Regression};
