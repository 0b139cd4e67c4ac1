//! Depression detection from multichannel EEG with a spatiotemporal graph
//! network: data pipeline, the four network sectors, training, evaluation
//! and metrics.

pub mod cfe;
pub mod checkpoint;
pub mod config;
pub mod dal;
pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod session;
pub mod sps;
pub mod tes;
pub mod trainer;

pub use config::{Ablation, Ablations, DomainFeature, ModelConfig, TrainConfig};
pub use error::{Error, ErrorKind, Result};
pub use model::{Model, Prediction};
