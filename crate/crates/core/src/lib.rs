pub mod ablation;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod m3trec;
pub mod metrics;
pub mod nets;
pub mod omta;
pub mod params;
pub mod phantom;
pub mod sampler;
pub mod schedule;
pub mod tabenc;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
