//! Desk-scale vision-and-language navigation, end to end: synthetic
//! environments with panoramic observations, negative-path mining, two-tower
//! alignment/coherence pretraining, transfer into a navigation agent trained
//! by behavioral cloning and policy gradient, and the standard evaluation
//! metrics. Everything is deterministic given one master seed.

pub mod agent;
pub mod envgraph;
pub mod negmine;
pub mod synthdata;
pub mod error;
pub mod auxtasks;
pub mod evalmetrics;
pub mod optim;
pub mod checkpoint;
pub mod encoders;
pub mod nn;
pub mod rngutil;
pub mod cli;
pub mod config;
pub mod fixtures;
pub mod gradcheck;

pub use error::{Error, Result};
