//! Energy-aware search over per-layer correlation operators (typical,
//! multiplication-free, binary) and compute modes (digital, compute-in-memory)
//! for small convolutional networks.
//!
//! The pieces, bottom up:
//!
//! * [`tensor`]: an f64 tensor with a reverse-mode tape.
//! * [`operators`]: the three correlation operators and fake quantization.
//! * [`network`]: TOML network descriptions, mixture layers and cost counts.
//! * [`energy`]: per-operation energy tables and the regularizer terms.
//! * [`data`] and [`train`]: datasets, Adam and evaluation.
//! * [`search`]: the search strategies.

pub mod data;
pub mod energy;
pub mod network;
pub mod operators;
pub mod parallel;
pub mod search;
pub mod tensor;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("network: {0}")]
    Network(String),
    #[error("energy table: {0}")]
    Energy(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
