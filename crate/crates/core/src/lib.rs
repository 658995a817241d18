//! Multimodal pedestrian trajectory prediction with a social-graph encoder,
//! a temporal transformer and a CVAE head with a residual Gaussian mixture.

pub mod checkpoint;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generative;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod social_graph;
pub mod synth;
pub mod temporal;
pub mod types;

pub use error::{Error, Result};
