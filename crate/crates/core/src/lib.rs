//! Surrogate model for stamped-part forming feasibility.
//!
//! Designs are sampled from a bounded parameter space, run through a
//! deterministic synthetic forming solver, rasterised into input and target
//! images, and learned by a residual squeeze-excitation U-Net that predicts
//! thinning and displacement fields for unseen designs.

pub mod config;
pub mod dataset;
pub mod error;
pub mod fqt;
pub mod geometry;
pub mod interp;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod raster_input;
pub mod raster_target;
pub mod reconstruct;
pub mod study;
pub mod tensor;
pub mod train;

pub use config::PipelineConfig;
pub use dataset::{DataSettings, Dataset, Sample};
pub use error::{Error, Result};
pub use fqt::Container;
pub use interp::GridSpec;
pub use nn::{NetConfig, ResSeUNet};
pub use oracle::FormingResult;
pub use params::{ParameterBounds, ParameterVector};
pub use pipeline::Predictor;
pub use tensor::Tensor;
pub use train::{TargetKind, TrainConfig, Trainer};
