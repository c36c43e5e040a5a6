use alloc::string::String;

use crate::diffgraph::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss, step aborted: {0}")]
    NonFiniteLoss(String),
    #[error("all importance weights are zero (no overlap between flow and target)")]
    NoOverlap,
    #[error("annealing iteration {iteration} failed: {source}")]
    Annealing {
        iteration: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}
