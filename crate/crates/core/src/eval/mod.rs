//! Downstream evaluation: linear probes, fine-tuning, naive baselines and
//! the metric suite.

pub mod finetune;
pub mod lbfgs;
pub mod metrics;
pub mod naive;
pub mod probe;
pub mod report;

pub use finetune::{finetune, train_head, FinetuneConfig, FinetuneOutcome, HeadModel, Targets};
pub use metrics::{auroc, average_precision, classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
pub use naive::{naive_classify, naive_regress};
pub use probe::{linear_probe_classify, linear_probe_regress, ProbeConfig, ProbeOutcome, StandardScaler};
pub use report::{render_table, MetricReport, Metrics};
