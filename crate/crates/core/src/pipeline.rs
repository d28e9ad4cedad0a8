//! End-to-end prediction for one design: geometry, input rasters, both
//! networks and the reconstruction summary.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DataSettings;
use crate::error::{Error, Result};
use crate::fqt::Container;
use crate::interp::GridSpec;
use crate::nn::ResSeUNet;
use crate::params::ParameterVector;
use crate::raster_input::build_input;
use crate::reconstruct::{as_formed_mesh, summarize, DEFAULT_WINDOW};
use crate::tensor::Tensor;
use crate::train::{TargetKind, Trainer};

/// Seed of the die point cloud used at prediction time.
pub const PREDICT_CLOUD_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub max_thinning: f64,
    pub mean_thinning: f64,
    pub max_wrinkle_height_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub grid: GridSpec,
    /// `[1, n, n]`, zero outside the mask.
    pub thinning: Tensor<f32>,
    /// `[3, n, n]` normalised displacements, zero outside the mask.
    pub displacement: Tensor<f32>,
    pub mask: Vec<f32>,
    pub summary: PredictSummary,
    pub wrinkle_height: Vec<f64>,
}

/// In-mask max and mean of a `[1, n, n]` thinning image.
pub fn thinning_stats(thinning: &Tensor<f32>, mask: &[f32]) -> Result<(f64, f64)> {
    let vals: Vec<f64> = thinning
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&v, _)| f64::from(v))
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyRequest("mask selects no pixels"));
    }
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((max, vals.iter().sum::<f64>() / vals.len() as f64))
}

fn apply_mask(t: &mut Tensor<f32>, mask: &[f32]) {
    let per = mask.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v *= mask[i % per];
    }
}

pub struct Predictor {
    pub thinning: ResSeUNet<f32>,
    pub displacement: ResSeUNet<f32>,
    pub settings: DataSettings,
    pub model_id: String,
    pub window: usize,
}

impl Predictor {
    pub fn new(
        thinning: ResSeUNet<f32>,
        displacement: ResSeUNet<f32>,
        settings: DataSettings,
        model_id: String,
    ) -> Result<Self> {
        if thinning.config().out_channels != 1 || displacement.config().out_channels != 3 {
            return Err(Error::Architecture(format!(
                "expected 1- and 3-channel networks, got {} and {}",
                thinning.config().out_channels,
                displacement.config().out_channels
            )));
        }
        let (a, b) = (thinning.config().resolution, displacement.config().resolution);
        if a != b || a != settings.resolution {
            return Err(Error::Architecture(format!(
                "network resolutions {a} and {b} with data resolution {}",
                settings.resolution
            )));
        }
        let window = DEFAULT_WINDOW.min(if a % 2 == 1 { a } else { a - 1 });
        Ok(Self {
            thinning,
            displacement,
            settings,
            model_id,
            window,
        })
    }

    /// Loads both checkpoints; the model id is derived from their bytes.
    pub fn load(thinning: &Path, displacement: &Path, settings: DataSettings) -> Result<Self> {
        let mut ids = Vec::new();
        let mut nets = Vec::new();
        for (path, kind) in [
            (thinning, TargetKind::Thinning),
            (displacement, TargetKind::Displacement),
        ] {
            let bytes = std::fs::read(path)?;
            ids.push(format!("{:x}", Sha256::digest(&bytes))[..12].to_string());
            let t = Trainer::from_checkpoint(Container::from_bytes(&bytes)?)?;
            if t.kind != kind {
                return Err(Error::Architecture(format!(
                    "{} holds a {:?} network, expected {:?}",
                    path.display(),
                    t.kind,
                    kind
                )));
            }
            nets.push(t.net);
        }
        let displacement_net = nets.pop().expect("two networks");
        let thinning_net = nets.pop().expect("two networks");
        Self::new(
            thinning_net,
            displacement_net,
            settings,
            format!("t-{}.d-{}", ids[0], ids[1]),
        )
    }

    pub fn grid(&self) -> Result<GridSpec> {
        self.settings.grid()
    }

    pub fn predict(&self, pv: &ParameterVector) -> Result<Prediction> {
        let grid = self.grid()?;
        let input = build_input(
            pv,
            &self.settings.bounds,
            grid,
            self.settings.cloud_spacing_mm,
            PREDICT_CLOUD_SEED,
        )?;
        let x = Tensor::stack(&[&input.data])?;
        let n = grid.n;
        let mut thinning = self.thinning.predict(&x)?.reshape(&[1, n, n])?;
        let mut displacement = self.displacement.predict(&x)?.reshape(&[3, n, n])?;
        apply_mask(&mut thinning, &input.mask);
        apply_mask(&mut displacement, &input.mask);
        let (max_thinning, mean_thinning) = thinning_stats(&thinning, &input.mask)?;
        let mesh = as_formed_mesh(&displacement, &thinning, &input.mask, grid)?;
        let (wrinkle_height, rs) = summarize(&mesh, pv, self.window)?;
        Ok(Prediction {
            grid,
            thinning,
            displacement,
            mask: input.mask,
            summary: PredictSummary {
                max_thinning,
                mean_thinning,
                max_wrinkle_height_mm: rs.max_wrinkle_height_mm,
            },
            wrinkle_height,
        })
    }
}

impl Prediction {
    /// Thinning, displacement and mask as one FQT container.
    pub fn to_container(&self) -> Result<Container> {
        let n = self.grid.n;
        let mut c = Container::new();
        c.push("thinning", self.thinning.clone());
        c.push("displacement", self.displacement.clone());
        c.push("mask", Tensor::new(&[1, n, n], self.mask.clone())?);
        Ok(c)
    }
}
