//! Neural network training with neuron-wise discriminant and center
//! losses backed by exponentially forgetting class statistics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
