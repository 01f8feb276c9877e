pub mod autodiff;
pub mod checkpoint;
mod binio;
pub mod config;
pub mod contrastive;
pub mod diagnostics;
pub mod dtw;
pub mod error;
pub mod exec;
pub mod head;
pub mod matryoshka;
pub mod model;
pub mod params;
pub mod ssm;
pub mod taskgen;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod oracle;

pub use autodiff::{Graph, Var};
pub use error::{MantaError, Result};
pub use exec::Exec;
pub use tensor::Tensor;
