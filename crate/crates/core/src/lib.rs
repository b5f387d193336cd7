//! Energy-aware CNN training: stochastic mini-batch dropping, selective
//! layer update with a recurrent gate, and predictive sign gradients, all
//! measured by a bit-width aware operation ledger.

pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod psg_verify;
pub mod quant;
pub mod slu;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
