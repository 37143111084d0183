//! Robustness and contamination statistics.

pub mod overlap;
pub mod robustness;

pub use overlap::{
    binomial_cdf, binomial_sf, bonferroni, clopper_pearson, overlap_report, OverlapExample, OverlapReport,
    DEFAULT_CONFIDENCE,
};
pub use robustness::{
    effective_robustness, fit_line, inv_logit, logit, percentile, plot_csv, RobustnessFit, RobustnessPoint,
    DEFAULT_RESAMPLES,
};
