//! End-to-end experiment orchestration: config, per-image pipeline, evaluation and reports.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{
    Aggregation, CoarseModelConfig, DataConfig, ExperimentConfig, ModelsConfig, PromptingConfig, SegmenterBackend,
    SegmenterConfig,
};
pub use pipeline::{
    evaluate, prompt_stage, run_pipeline, EvalOptions, ModelFingerprint, PipelineModels, PipelineOutput,
    PipelineSettings, PromptStageOutput, Stage, StageCache, StageFailure,
};
pub use report::{compare_clusterers, render_markdown, ClustererComparison, MetricReport, ReportFormat};
