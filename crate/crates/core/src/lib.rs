pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod rvq;
pub mod synth;
pub mod tts;
pub use error::{Error, Result};
