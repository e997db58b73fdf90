//! Recursive contour-saliency blending network for salient object detection:
//! data pipeline, model, losses, training loop and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod refinement;
pub mod sfe;
pub mod supervision;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use config::Config;
pub use model::Model;
pub use tensor::{Float, Tensor};
