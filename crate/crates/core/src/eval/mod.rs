//! Decoding, metrics, representation similarity and the benchmark harness.

pub mod benchmark;
pub mod cka;
pub mod metrics;

pub use benchmark::{
    draw_labeled, metrics_csv, parse_metrics_csv, route_inputs, run_benchmark, subset_hash, Assets, BenchmarkConfig,
    BenchmarkReport, HeldOut, Method, MetricsRow, Route, METRICS_HEADER,
};
pub use cka::{linear_cka, CkaGrid, CkaStage};
pub use metrics::{bleu4, evaluate_projector, greedy_decode, rouge_l, token_accuracy, LabeledSet, Scores};
