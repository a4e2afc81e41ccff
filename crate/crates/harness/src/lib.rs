//! Experiment harness: configuration, pipeline stages, evaluation reports and plots.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod plot;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result, Stage};
pub use pipeline::{
    cross_steer, evaluate, run_pipeline, Evaluation, Manifest, PipelineOutput, Run,
};
pub use plot::{landscape, plot_trajectories, plot_verifier_landscape, Landscape};
pub use report::{standard_error, EvalReport};
