//! Learning feedforward filters that combine a physical linear-in-parameters
//! model with a neural network, where an orthogonal-projection regularizer
//! keeps the network out of the model's explainable subspace.
//!
//! The crate covers the full loop: reference generation, a nonlinear-friction
//! plant with exact inverse and implicit forward simulation, lifted regressor
//! decomposition, network training under several objectives, and evaluation
//! of the learned filters on fresh references.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod linmodel;
pub mod neuralnet;
pub mod objectives;
pub mod parallel;
pub mod plant;
pub mod signals;
pub mod training;

pub use error::{Error, Result};
