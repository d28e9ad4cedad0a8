//! Shared fixtures for the pipeline benchmarks.

use formcast_core::config::PipelineConfig;
use formcast_core::dataset::{DataSettings, Dataset};
use formcast_core::nn::ResSeUNet;
use formcast_core::params::{ParameterBounds, ParameterVector};
use formcast_core::train::TargetKind;

/// Resolution the service runs at.
pub const RES: usize = 64;

pub fn settings() -> DataSettings {
    DataSettings {
        resolution: RES,
        ..DataSettings::default()
    }
}

pub fn midpoint() -> ParameterVector {
    ParameterVector::midpoint(&ParameterBounds::default())
}

/// Untrained thinning network at the reference architecture.
pub fn thinning_net() -> ResSeUNet<f32> {
    ResSeUNet::new(PipelineConfig::reference(RES).net_for(TargetKind::Thinning), 0).expect("reference net builds")
}

pub fn samples(n: usize) -> Dataset {
    Dataset::generate(n, &settings(), 0).expect("dataset generates")
}
