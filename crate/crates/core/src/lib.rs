//! Tensorized graph neural networks.
//!
//! CP-decomposition pooling layers with analytic gradients, the dense tensor
//! algebra used to check them, a small message-passing GNN built on top, and
//! a runnable verification harness for the layer's algebraic properties.

pub mod bench;
pub mod cli;
pub mod cp;
pub mod error;
pub mod graph;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod verify;
pub mod train;

pub use error::{Error, Result};
