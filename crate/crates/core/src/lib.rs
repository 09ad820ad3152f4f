//! Simulator for decentralized SGD with compressed communication.
//!
//! Nodes on a gossip graph train a shared model by averaging with their
//! neighbors. Five update rules are provided: plain gossip SGD, gossip over
//! naively compressed models, difference compression with exact replicas,
//! extrapolation compression with shrinking-error estimates, and a
//! centralized baseline. Around the engine sit the mixing-matrix builders,
//! the compression operators, synthetic problems, the convergence-theory
//! constants and an analytic network cost model.

pub mod compression;
pub mod config;
pub mod costmodel;
pub mod engine;
pub mod problems;
pub mod theory;
pub mod topology;

pub use compression::{Compression, Compressor};
pub use config::{parse_config, resolve, RunConfig};
pub use engine::{Algorithm, WorldState};
pub use problems::{Problem, ProblemSpec};
pub use topology::{MixingMatrix, TopologySpec};
