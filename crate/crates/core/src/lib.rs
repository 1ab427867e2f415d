//! Attention branch networks built on a small reverse-mode autodiff engine.

pub mod abn;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use abn::{AbnModel, AbnOutput, Mechanism, NetworkSpec};
pub use error::{AbnError, Result};
pub use tensor::{Graph, Tensor, Var};
