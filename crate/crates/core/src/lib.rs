mod binio;
pub mod cli;
pub mod coseg;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod label_space;
pub mod memory_paste;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synthetic;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use label_space::{ClassId, DatasetIndex, Protocol, Taxonomy};
