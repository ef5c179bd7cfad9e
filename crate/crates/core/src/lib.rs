//! Feature-level speculative decoding on a desk-scale transformer.

pub mod autodiff;
pub mod bench_metrics;
pub mod checkpoint;
pub mod draft_head;
pub mod engine;
pub mod drafting;
pub mod error;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use tensor::Tensor;
