//! Samples, dataset generation and the on-disk dataset layout
//! (`manifest.json` plus one FQT file per sample under `samples/`).

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fqt::Container;
use crate::geometry::HEIGHT_SCALE_MM;
use crate::interp::GridSpec;
use crate::oracle::{simulate, OracleConfig};
use crate::params::{lhs_sample, ParameterBounds, ParameterVector};
use crate::raster_input::{build_input, order_checksum, INPUT_CHANNELS};
use crate::raster_target::{assemble_targets, ClipThresholds};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything that determines how a design becomes a training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub resolution: usize,
    pub bounds: ParameterBounds,
    pub oracle: OracleConfig,
    pub thresholds: ClipThresholds,
    pub cloud_spacing_mm: f64,
    pub mesh_spacing_mm: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            resolution: 64,
            bounds: ParameterBounds::default(),
            oracle: OracleConfig::default(),
            thresholds: ClipThresholds::default(),
            cloud_spacing_mm: 5.0,
            mesh_spacing_mm: 5.0,
        }
    }
}

impl DataSettings {
    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.resolution)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub params: ParameterVector,
    /// `[4, n, n]`
    pub input: Tensor<f32>,
    /// `[1, n, n]`
    pub thinning: Tensor<f32>,
    /// `[3, n, n]`
    pub displacement: Tensor<f32>,
    pub mask: Vec<f32>,
    pub flagged: bool,
}

/// Runs the die rasterizer, the oracle and target preparation for one design.
pub fn make_sample(id: String, pv: &ParameterVector, settings: &DataSettings, seed: u64) -> Result<Sample> {
    let grid = settings.grid()?;
    let input = build_input(pv, &settings.bounds, grid, settings.cloud_spacing_mm, seed)?;
    let result = simulate(pv, &settings.bounds, &settings.oracle, settings.mesh_spacing_mm, seed)?;
    let mask: Vec<f64> = input.mask.iter().map(|&m| f64::from(m)).collect();
    let targets = assemble_targets(&result, &mask, grid, &settings.thresholds)?;
    Ok(Sample {
        id,
        params: *pv,
        input: input.data,
        thinning: targets.thinning,
        displacement: targets.displacement,
        mask: input.mask,
        flagged: targets.flagged,
    })
}

/// Samples for a list of designs, built in parallel; sample `i` uses seed `seed + i`.
pub fn make_samples(
    designs: &[ParameterVector],
    settings: &DataSettings,
    seed: u64,
    prefix: &str,
) -> Result<Vec<Sample>> {
    designs
        .par_iter()
        .enumerate()
        .map(|(i, pv)| make_sample(format!("{prefix}{i:05}"), pv, settings, seed.wrapping_add(i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub height_scale_mm: f64,
    pub displacement_scale_mm: f64,
    pub scalar_floor: f64,
    pub input_channels: Vec<String>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            height_scale_mm: HEIGHT_SCALE_MM,
            displacement_scale_mm: HEIGHT_SCALE_MM,
            scalar_floor: 0.1,
            input_channels: INPUT_CHANNELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub params: ParameterVector,
    pub flagged: bool,
    pub input_checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub grid: GridSpec,
    pub bounds: ParameterBounds,
    pub normalization: Normalization,
    pub clip_thresholds: ClipThresholds,
    pub oracle_config: OracleConfig,
    pub cloud_spacing_mm: f64,
    pub mesh_spacing_mm: f64,
    pub seed: u64,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn settings(&self) -> DataSettings {
        DataSettings {
            resolution: self.grid.n,
            bounds: self.bounds,
            oracle: self.oracle_config,
            thresholds: self.clip_thresholds,
            cloud_spacing_mm: self.cloud_spacing_mm,
            mesh_spacing_mm: self.mesh_spacing_mm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Latin-hypercube designs run through the full preparation pipeline.
    pub fn generate(n: usize, settings: &DataSettings, seed: u64) -> Result<Self> {
        let designs = lhs_sample(n, &settings.bounds, seed)?;
        let samples = make_samples(&designs, settings, seed, "s")?;
        Self::from_samples(samples, settings, seed)
    }

    pub fn from_samples(samples: Vec<Sample>, settings: &DataSettings, seed: u64) -> Result<Self> {
        let grid = settings.grid()?;
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", s.id)));
            }
            if s.input.dims() != [4, grid.n, grid.n] {
                return Err(Error::Dataset(format!(
                    "sample `{}` is not on the {}x{} grid",
                    s.id, grid.n, grid.n
                )));
            }
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            grid,
            bounds: settings.bounds,
            normalization: Normalization::default(),
            clip_thresholds: settings.thresholds,
            oracle_config: settings.oracle,
            cloud_spacing_mm: settings.cloud_spacing_mm,
            mesh_spacing_mm: settings.mesh_spacing_mm,
            seed,
            samples: samples
                .iter()
                .map(|s| SampleEntry {
                    id: s.id.clone(),
                    params: s.params,
                    flagged: s.flagged,
                    input_checksum: order_checksum(&INPUT_CHANNELS, &s.input),
                })
                .collect(),
        };
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("samples"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        for s in &self.samples {
            let n = self.manifest.grid.n;
            let mut c = Container::new();
            c.push("input", s.input.clone());
            c.push("thinning", s.thinning.clone());
            c.push("displacement", s.displacement.clone());
            c.push("mask", Tensor::new(&[1, n, n], s.mask.clone())?);
            c.json = Some(serde_json::json!({ "id": s.id, "params": s.params }));
            c.write(dir.join("samples").join(format!("{}.fqt", s.id)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::Dataset(format!("{} is not a dataset directory", dir.display())));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!("manifest version {}", manifest.version)));
        }
        let n = manifest.grid.n;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for e in &manifest.samples {
            let mut c = Container::read(dir.join("samples").join(format!("{}.fqt", e.id)))?;
            let input = c.take("input")?;
            if input.dims() != [4, n, n] {
                return Err(Error::Dataset(format!(
                    "sample `{}` input dims {:?}",
                    e.id,
                    input.dims()
                )));
            }
            if order_checksum(&INPUT_CHANNELS, &input) != e.input_checksum {
                return Err(Error::Dataset(format!(
                    "sample `{}` fails its channel-order checksum",
                    e.id
                )));
            }
            samples.push(Sample {
                id: e.id.clone(),
                params: e.params,
                input,
                thinning: c.take("thinning")?,
                displacement: c.take("displacement")?,
                mask: c.take("mask")?.into_data(),
                flagged: e.flagged,
            });
        }
        Ok(Self { manifest, samples })
    }
}
