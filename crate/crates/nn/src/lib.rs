//! Feed-forward regressor from 55 PL values to `[Ω2P, γ2, Γ12]`.

pub mod adam;
pub mod network;
pub mod sweep;
pub mod train;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: expected width {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("R² undefined for constant target column {column}")]
    UndefinedMetric { column: usize },
    #[error(transparent)]
    Core(#[from] tpa_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub use network::{NetworkConfig, NetworkParams};
pub use train::{evaluate, predict_params, train, Evaluation, History, TrainConfig, TrainedModel};
