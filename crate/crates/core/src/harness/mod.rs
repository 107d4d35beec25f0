//! Experiment orchestration: configuration, adaptation runs with model
//! selection, metrics, significance tests, sweeps, ablations, checkpoints
//! and embedding export.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod export;
pub mod metrics;
pub mod run;
pub mod ttest;

pub use checkpoint::{
    fingerprint_values, round_to_f32, Checkpoint, NamedTensor, FINGERPRINT_TENSOR, FORMAT_VERSION,
    MAGIC,
};
pub use config::{ExperimentConfig, FineTune, Method, ModelConfig, TrainConfig, Variant};
pub use experiments::{
    parse_report, report_tsv, summary_tsv, write_text, ReportRow, REPORT_HEADER, SUMMARY_HEADER,
};
pub use export::{
    embeddings_csv, export_embeddings, write_embeddings, EmbeddingKind, EmbeddingRow, Pca,
};
pub use metrics::{compute_metrics, rank_auc, ClassMetrics, MetricSet};
pub use run::{
    zero_shot_metrics, AdaptedModel, DicopHead, Experiment, Head, PretrainedModel, RunResult,
    SeedResult, ZeroShotPrompts,
};
pub use ttest::{paired_ttest, student_t_upper_tail, TTestResult, SIGNIFICANCE_LEVEL};
