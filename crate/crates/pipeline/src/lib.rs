//! Experiment plumbing around the reader: synthetic dataset generation,
//! retrieval over a small passage pool, the training loop, checkpointing,
//! and ablation/sweep drivers. The binary in `main.rs` exposes all of it
//! as subcommands.

pub mod config;
pub mod data;
pub mod experiment;
pub mod retrieval;
pub mod synth;
pub mod train;

use kgfuse_core::evalkit::EvalError;
use kgfuse_core::kgstore::KgError;
use kgfuse_core::localgraph::GraphIoError;
use kgfuse_core::reader::ReaderError;
use kgfuse_core::tensor::TensorError;
use kgfuse_core::textproc::TextError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid option {key}: {msg}")]
    Option { key: String, msg: String },
    #[error("dataset generation: {0}")]
    Synth(String),
    #[error("example {index}: {msg}")]
    Example { index: usize, msg: String },
    #[error("retrieval over an empty corpus")]
    EmptyCorpus,
    #[error(
        "non-finite loss {loss} at step {step} (batch {batch:?}, grad norm {grad_norm}); \
         lower the learning rate or extend warmup"
    )]
    NonFiniteLoss {
        loss: f64,
        step: usize,
        batch: Vec<usize>,
        grad_norm: f64,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Reader(#[from] ReaderError),
    #[error(transparent)]
    GraphIo(#[from] GraphIoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}
