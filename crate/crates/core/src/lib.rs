pub mod ann;
pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod event_io;
pub mod graph;
pub mod head;
pub mod layer_spec;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod profile;
pub mod quant;
pub mod snn;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Real, Tensor};
