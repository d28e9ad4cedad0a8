//! Pipeline configuration file. Every key is required; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DataSettings;
use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::train::{TargetKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Design-of-experiments sampling and per-sample cloud/mesh seeds.
    pub doe: u64,
    /// Weight init, split and batch shuffling.
    pub train: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSettings,
    /// Thinning network; the displacement network differs only in its
    /// output channels.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub seeds: Seeds,
}

impl PipelineConfig {
    pub fn reference(resolution: usize) -> Self {
        Self {
            data: DataSettings {
                resolution,
                ..DataSettings::default()
            },
            net: NetConfig::reference(resolution, 1),
            train: TrainConfig::default(),
            seeds: Seeds { doe: 0, train: 0 },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<()> {
        self.data.bounds.check()?;
        self.data.thresholds.check()?;
        self.data.grid()?;
        if self.net.resolution != self.data.resolution {
            return Err(Error::Architecture(format!(
                "network resolution {} differs from data resolution {}",
                self.net.resolution, self.data.resolution
            )));
        }
        self.net_for(TargetKind::Thinning).plan()?;
        self.net_for(TargetKind::Displacement).plan()?;
        Ok(())
    }

    /// Changes data and network resolution together.
    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.data.resolution = resolution;
        self.net.resolution = resolution;
        self
    }

    pub fn net_for(&self, kind: TargetKind) -> NetConfig {
        let mut c = self.net.clone();
        c.out_channels = kind.channels();
        if let Some(last) = c.decoder.last_mut() {
            last.out_channels = kind.channels();
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips() {
        let c = PipelineConfig::reference(64);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn missing_key_rejected() {
        let mut v = serde_json::to_value(PipelineConfig::reference(64)).unwrap();
        v["data"].as_object_mut().unwrap().remove("oracle");
        let err = PipelineConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("oracle"), "{err}");
        let mut v = serde_json::to_value(PipelineConfig::reference(64)).unwrap();
        v.as_object_mut().unwrap().remove("seeds");
        assert!(PipelineConfig::from_json(&v.to_string()).is_err());
        // Optional values are still required keys.
        let mut v = serde_json::to_value(PipelineConfig::reference(64)).unwrap();
        v["train"].as_object_mut().unwrap().remove("target_loss");
        let err = PipelineConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("target_loss"), "{err}");
        v["train"]["target_loss"] = serde_json::Value::Null;
        assert!(PipelineConfig::from_json(&v.to_string()).is_ok());
    }

    #[test]
    fn unknown_nested_key_rejected() {
        for path in [
            &["data", "oracle"][..],
            &["net"],
            &["train", "adam"],
            &["data", "bounds"],
        ] {
            let mut v = serde_json::to_value(PipelineConfig::reference(64)).unwrap();
            let mut node = &mut v;
            for k in path {
                node = &mut node[*k];
            }
            node["surplus"] = serde_json::json!(1);
            let err = PipelineConfig::from_json(&v.to_string()).unwrap_err();
            assert!(err.to_string().contains("surplus"), "{path:?}: {err}");
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut c = PipelineConfig::reference(64);
        c.net.resolution = 128;
        assert!(c.check().is_err());
        assert!(c.with_resolution(128).check().is_ok());
    }

    #[test]
    fn displacement_variant() {
        let c = PipelineConfig::reference(32);
        let d = c.net_for(TargetKind::Displacement);
        assert_eq!(d.out_channels, 3);
        assert_eq!(d.decoder.last().unwrap().out_channels, 3);
    }
}
