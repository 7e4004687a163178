pub mod checkpoint;
pub mod data;
pub mod depgraph;
pub mod engine;
pub mod importance;
pub mod error;
pub mod eval;
pub mod model;
pub mod real;
pub mod scheduler;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
