//! Dataset ingestion, evaluation, reports, rank statistics and debug
//! pictures.

mod dataset;
mod eval;
pub mod stats;
pub mod viz;

use thiserror::Error;

pub use dataset::{
    check_case_image, load_dataset, save_dataset, score_case, CaseTags, DatasetRecord, EvalCase,
    ImageSource,
};
pub use eval::{
    case_seed, evaluate, CaseRecord, EvalOutcome, EvalReport, SplitStats, CASE_SEED_STRIDE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("{0}")]
    Io(String),
    #[error("{}", match record {
        Some(i) => format!("dataset record {i}: {message}"),
        None => format!("dataset: {message}"),
    })]
    Schema {
        record: Option<usize>,
        message: String,
    },
    #[error("image: {0}")]
    Image(String),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}
