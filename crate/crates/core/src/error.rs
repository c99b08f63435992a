use thiserror::Error;

use crate::{
    detect::DetectError, divide::DivideError, ensemble::EnsembleError,
    experiments::ExperimentError, ga::GaError, pipelines::PipelineError, stats::StatsError,
    stream::StreamError,
};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error(transparent)]
    Divide(#[from] DivideError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
