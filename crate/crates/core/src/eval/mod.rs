//! Retrieval metrics and the benchmark harness.

pub mod bench;
pub mod metrics;

pub use bench::{load_cases, run_benchmark, validate_case, BenchOptions, BenchmarkCase, CaseResult, MetricReport};
pub use metrics::{average_precision_at_k, hits_at_k, mean, recall_at_k, recall_subset_at_k, HitsMode};
