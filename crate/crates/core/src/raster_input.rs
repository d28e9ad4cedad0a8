//! Input images: die height, blank mask and the three process scalars
//! painted onto the mask.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{blank_outline, die_point_cloud, Polygon, HEIGHT_SCALE_MM};
use crate::interp::{GridSpec, RasterPlan};
use crate::params::{Param, ParameterBounds, ParameterVector};
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: [&str; 4] = ["die_height", "t_spacer", "t_init", "speed"];

/// Die heights interpolated from a scattered cloud, divided by the height scale.
pub fn rasterize_die(cloud: &[[f64; 3]], grid: GridSpec) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::DegeneratePoints("empty die cloud".into()));
    }
    let xy: Vec<[f64; 2]> = cloud.iter().map(|p| [p[0], p[1]]).collect();
    let z: Vec<f64> = cloud.iter().map(|p| p[2] / HEIGHT_SCALE_MM).collect();
    RasterPlan::new(&xy, grid)?.apply(&z)
}

/// 1 where the pixel centre lies inside (or on) the polygon, else 0.
pub fn rasterize_blank(polygon: &Polygon, grid: GridSpec) -> Vec<f64> {
    let n = grid.n;
    let mut out = vec![0.0; grid.len()];
    for r in 0..n {
        for c in 0..n {
            let [x, y] = grid.center(r, c);
            if polygon.contains(x, y) {
                out[r * n + c] = 1.0;
            }
        }
    }
    out
}

/// `mask * (0.1 + 0.9 * unit(value))` for spacer, temperature and speed.
pub fn scalar_channels(mask: &[f64], pv: &ParameterVector, bounds: &ParameterBounds) -> Result<[Vec<f64>; 3]> {
    let mut out: [Vec<f64>; 3] = Default::default();
    for (k, p) in [Param::TSpacer, Param::TInit, Param::Speed].into_iter().enumerate() {
        let v = bounds.scalar_norm(p, pv.get(p))?;
        out[k] = mask.iter().map(|m| m * v).collect();
    }
    Ok(out)
}

/// Four-channel network input with its blank mask.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack {
    pub grid: GridSpec,
    /// `[4, n, n]`, channels in [`INPUT_CHANNELS`] order.
    pub data: Tensor<f32>,
    pub mask: Vec<f32>,
    /// Digest of channel names and contents in stacking order.
    pub order_checksum: String,
}

pub fn order_checksum(names: &[&str], data: &Tensor<f32>) -> String {
    let per = data.len() / names.len().max(1);
    let mut h = Sha256::new();
    for (k, name) in names.iter().enumerate() {
        h.update(name.as_bytes());
        h.update([0u8]);
        let mut inner = Sha256::new();
        for v in &data.data()[k * per..(k + 1) * per] {
            inner.update(v.to_le_bytes());
        }
        h.update(inner.finalize());
    }
    format!("{:x}", h.finalize())
}

pub fn assemble_input(grid: GridSpec, die: &[f64], scalars: &[Vec<f64>; 3], mask: &[f64]) -> Result<InputStack> {
    let len = grid.len();
    if die.len() != len || mask.len() != len || scalars.iter().any(|s| s.len() != len) {
        return Err(Error::Shape(format!(
            "input images do not match a {0}x{0} grid",
            grid.n
        )));
    }
    let mut data = Vec::with_capacity(4 * len);
    data.extend(die.iter().map(|&v| v as f32));
    for s in scalars {
        data.extend(s.iter().map(|&v| v as f32));
    }
    let data = Tensor::new(&[4, grid.n, grid.n], data)?;
    Ok(InputStack {
        grid,
        order_checksum: order_checksum(&INPUT_CHANNELS, &data),
        data,
        mask: mask.iter().map(|&v| v as f32).collect(),
    })
}

impl InputStack {
    /// Confirms channels are still in the order they were stacked in.
    pub fn verify_order(&self) -> Result<()> {
        if order_checksum(&INPUT_CHANNELS, &self.data) == self.order_checksum {
            Ok(())
        } else {
            Err(Error::Format("input channel order checksum mismatch".into()))
        }
    }
}

/// Full input preparation for one design.
pub fn build_input(
    pv: &ParameterVector,
    bounds: &ParameterBounds,
    grid: GridSpec,
    cloud_spacing: f64,
    cloud_seed: u64,
) -> Result<InputStack> {
    pv.validate(bounds).into_result()?;
    let cloud = die_point_cloud(pv, cloud_spacing, cloud_seed)?;
    let die = rasterize_die(&cloud, grid)?;
    let outline = blank_outline(pv)?;
    let mask = rasterize_blank(&outline.polygon, grid);
    let scalars = scalar_channels(&mask, pv, bounds)?;
    assemble_input(grid, &die, &scalars, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rounded_quarter;

    #[test]
    fn constant_cloud() {
        let grid = GridSpec::new(16).unwrap();
        let cloud = [
            [0.0, 0.0, 60.0],
            [740.0, 0.0, 60.0],
            [0.0, 740.0, 60.0],
            [740.0, 740.0, 60.0],
        ];
        let img = rasterize_die(&cloud, grid).unwrap();
        assert!(img.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(rasterize_die(&[], grid).is_err());
    }

    #[test]
    fn full_frame_outline_is_all_ones() {
        let grid = GridSpec::new(16).unwrap();
        let o = rounded_quarter(740.0, 0.0).unwrap();
        assert!(rasterize_blank(&o.polygon, grid).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scalar_channel_levels() {
        let b = ParameterBounds::default();
        let pv = ParameterVector::midpoint(&b)
            .with(Param::TInit, 350.0)
            .with(Param::Speed, 500.0);
        let mask = vec![1.0, 0.0, 1.0];
        let [_, t, s] = scalar_channels(&mask, &pv, &b).unwrap();
        assert_eq!(t, vec![0.1, 0.0, 0.1]);
        assert_eq!(s, vec![1.0, 0.0, 1.0]);
        assert!(scalar_channels(&mask, &pv.with(Param::Speed, 10.0), &b).is_err());
    }

    #[test]
    fn permuted_channels_fail_checksum() {
        let b = ParameterBounds::default();
        let pv = ParameterVector::midpoint(&b).with(Param::TInit, 400.0);
        let stack = build_input(&pv, &b, GridSpec::new(32).unwrap(), 10.0, 0).unwrap();
        stack.verify_order().unwrap();
        assert_eq!(stack.data.dims(), &[4, 32, 32]);
        let mut swapped = stack.clone();
        let per = 32 * 32;
        let (a, rest) = swapped.data.data_mut().split_at_mut(2 * per);
        a[per..].swap_with_slice(&mut rest[..per]);
        assert!(swapped.verify_order().is_err());
    }

    #[test]
    fn mismatched_images_rejected() {
        let grid = GridSpec::new(8).unwrap();
        let ok = vec![0.0; 64];
        let short = vec![0.0; 63];
        let scalars = [ok.clone(), ok.clone(), ok.clone()];
        assert!(assemble_input(grid, &short, &scalars, &ok).is_err());
    }
}
