//! Multi-agent monocular dense SLAM built on two-view pointmap priors.
//!
//! Each agent tracks its camera against keyframes with canonical, fused
//! pointmaps and keeps a local Sim(3) factor graph. A central server
//! gathers the agents' submaps, closes intra- and inter-agent loops and
//! optimizes one global graph.

pub mod agent;
pub mod codec;
pub mod matching;
pub mod pipeline;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod keyframing;
pub mod pointmap;
pub mod predictor;
pub mod server;
pub mod tracking;

pub use error::{Error, Result};
