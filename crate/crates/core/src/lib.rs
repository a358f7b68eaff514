//! Attention-variant laboratory on a small reverse-mode autodiff core.
//!
//! Variants differ in which projections exist and what must be cached per
//! decoded token; see [`attention::Variant`].

pub mod attention;
pub mod config;
pub mod diagnostics;
mod error;
pub mod harness;
pub mod kvcache;
pub mod positional;
pub mod report;
pub mod tensor;

pub use attention::{ModelConfig, Variant};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
