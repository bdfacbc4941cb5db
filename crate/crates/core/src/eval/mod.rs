//! Dataset ingestion, orchestration, metrics and rendering.

pub mod config;
pub mod dataset;
pub mod fixtures;
pub mod metrics;
pub mod overlay;
pub mod pipeline;

pub use dataset::{Dataset, EvalRecord, ImageMeta};
pub use metrics::{aggregate_metrics, iou, overlap, BucketMetrics, MetricsReport, SampleIou};
pub use overlay::render_overlay;
pub use pipeline::{
    process_sample, run_pipeline, write_outputs, Failure, PipelineConfig, PipelineOutput, Prediction,
    RunReport, SampleResult,
};
