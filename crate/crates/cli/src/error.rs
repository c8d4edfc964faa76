use thiserror::Error;

use geovid_core::annotation::AnnotationError;
use geovid_core::boosted_trees::BoostError;
use geovid_core::bootstrap::BootstrapError;
use geovid_core::eval::synthetic::SynthError;
use geovid_core::eval::EvalError;
use geovid_core::features::FeatureError;
use geovid_core::frame_store::FrameError;
use geovid_core::inference::InferenceError;
use geovid_core::pipeline::PipelineError;
use geovid_core::segmentation::SegError;

/// Exit codes: 1 stage failure, 2 bad configuration or usage,
/// 3 missing dependency (a required earlier stage has not run).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(PipelineError::Config(_)) => 2,
            CliError::MissingDependency(_) => 3,
            _ => 1,
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
