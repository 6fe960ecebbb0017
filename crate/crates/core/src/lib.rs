//! Sparse hidden-unit interventions for recurrent language models.

pub mod array;
pub mod datagen;
pub mod error;
pub mod graph;
pub mod hard_concrete;
pub mod intervention;
pub mod lstm;
pub mod search;

pub use array::RealArray;
pub use error::{Error, Result};
pub use graph::{finite_difference_check, Evaluation, Gradients, Graph, NodeId};
