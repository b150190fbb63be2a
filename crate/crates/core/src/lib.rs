#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod modulation;
pub mod params;
pub mod pipeline;
pub mod recurrence;
pub mod report;
pub mod surgery;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{Binder, GradMap, ParamStore};
pub use tensor::{DType, Element, Gradients, Tape, Tensor, Var};
pub use transformer::{ModelConfig, Target, Tokens, Transformer};
