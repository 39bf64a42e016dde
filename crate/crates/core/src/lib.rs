//! Training kit for spiking networks built on discrete leaky
//! integrate-and-fire dynamics: a small reverse-mode tape, surrogate
//! gradient scaling conventions, membrane-potential window initialization,
//! gradient-health and drift diagnostics, and a sampling lab for the
//! underlying per-neuron Markov chain.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod lif;
pub mod mpinit;
pub mod network;
pub mod runner;
pub mod surrogate;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
