//! Accuracy proxies and the experiment driver.
//!
//! Without full-model inference, accuracy is measured on attention traces:
//! the ground-truth attention mass a keep-set retains, the correlation of the
//! pruned attention with the ground truth, and the cosine similarity of the
//! attention output with and without pruning.

mod metrics;
mod report;
mod run;

pub use metrics::{attention_overlap, output_error, pearson, Cosine};
pub use report::{write_metrics, write_overlap, METRICS_HEADER, OVERLAP_HEADER};
pub use run::{overlap_analysis, run_policy, sweep, LayerMetrics, MetricsRecord, OverlapRecord};
