//! Target images from a forming result: elemental thinning averaged to the
//! nodes and outlier-clipped, nodal displacements, all interpolated at the
//! undeformed node positions and masked by the blank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HEIGHT_SCALE_MM;
use crate::interp::{GridSpec, RasterPlan};
use crate::oracle::FormingResult;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipThresholds {
    /// Largest plausible thinning.
    pub c1: f64,
    /// Largest plausible thickening, stored negative.
    pub c2: f64,
}

impl Default for ClipThresholds {
    fn default() -> Self {
        Self { c1: 0.40, c2: -0.40 }
    }
}

impl ClipThresholds {
    pub fn check(&self) -> Result<()> {
        if self.c1 > 0.0 && self.c2 < 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "clip thresholds need c1 > 0 > c2, got c1={} c2={}",
                self.c1, self.c2
            )))
        }
    }
}

/// Mean of the values of all elements sharing each node.
pub fn elemental_to_nodal(values: &[f64], elements: &[[usize; 4]], n_nodes: usize) -> Result<Vec<f64>> {
    if values.len() != elements.len() {
        return Err(Error::Connectivity(format!(
            "{} element values for {} elements",
            values.len(),
            elements.len()
        )));
    }
    let mut sum = vec![0.0; n_nodes];
    let mut count = vec![0u32; n_nodes];
    for (e, v) in elements.iter().zip(values) {
        for &i in e {
            if i >= n_nodes {
                return Err(Error::Connectivity(format!("element references node {i} of {n_nodes}")));
            }
            sum[i] += v;
            count[i] += 1;
        }
    }
    if let Some(orphan) = count.iter().position(|&c| c == 0) {
        return Err(Error::Connectivity(format!("node {orphan} belongs to no element")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Percentile of sorted data with linear interpolation between ranks.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Flags a field whose extremes exceed the thresholds and, if flagged,
/// clips both tails at the 0.5th and 99.5th percentiles.
pub fn detect_and_clip(field: &[f64], thresholds: &ClipThresholds) -> Result<(Vec<f64>, bool)> {
    if field.is_empty() {
        return Err(Error::EmptyRequest("clipping an empty field"));
    }
    let max = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let flagged = max > thresholds.c1 || min < thresholds.c2;
    if !flagged {
        return Ok((field.to_vec(), false));
    }
    let mut sorted = field.to_vec();
    sorted.sort_by(f64::total_cmp);
    let upper = percentile_sorted(&sorted, 99.5);
    let lower = percentile_sorted(&sorted, 0.5);
    Ok((field.iter().map(|v| v.clamp(lower, upper)).collect(), true))
}

/// Undeformed coordinates `d0 = d - delta`.
pub fn undeform(d: &[[f64; 3]], delta: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if d.len() != delta.len() {
        return Err(Error::Shape(format!(
            "{} positions, {} displacements",
            d.len(),
            delta.len()
        )));
    }
    Ok(d.iter()
        .zip(delta)
        .map(|(p, q)| [p[0] - q[0], p[1] - q[1], p[2] - q[2]])
        .collect())
}

/// Interpolates nodal fields given at `positions` onto the grid and masks them.
pub fn grid_interpolate(
    positions: &[[f64; 2]],
    fields: &[&[f64]],
    mask: &[f64],
    grid: GridSpec,
) -> Result<Vec<Vec<f64>>> {
    if mask.len() != grid.len() {
        return Err(Error::Shape(format!(
            "mask of {} pixels for a {}x{} grid",
            mask.len(),
            grid.n,
            grid.n
        )));
    }
    let plan = RasterPlan::new(positions, grid)?;
    fields
        .iter()
        .map(|f| Ok(plan.apply(f)?.iter().zip(mask).map(|(v, m)| v * m).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetStack {
    pub grid: GridSpec,
    /// `[1, n, n]` thinning fraction.
    pub thinning: Tensor<f32>,
    /// `[3, n, n]` displacement components divided by the height scale.
    pub displacement: Tensor<f32>,
    pub mask: Vec<f32>,
    pub flagged: bool,
}

/// Thinning and displacement targets for one forming result.
///
/// Flagged thinning fields are clipped at their percentiles and then held to
/// `[c2, c1]`; displacements are never clipped.
pub fn assemble_targets(
    result: &FormingResult,
    mask: &[f64],
    grid: GridSpec,
    thresholds: &ClipThresholds,
) -> Result<TargetStack> {
    thresholds.check()?;
    result.check()?;
    let nodal = elemental_to_nodal(&result.elemental_thinning, &result.elements, result.nodes_final.len())?;
    let (clipped, flagged) = detect_and_clip(&nodal, thresholds)?;
    let thinning: Vec<f64> = clipped.iter().map(|v| v.clamp(thresholds.c2, thresholds.c1)).collect();
    let d0 = undeform(&result.nodes_final, &result.displacements)?;
    let xy: Vec<[f64; 2]> = d0.iter().map(|p| [p[0], p[1]]).collect();
    let comp = |k: usize| -> Vec<f64> { result.displacements.iter().map(|d| d[k] / HEIGHT_SCALE_MM).collect() };
    let (dx, dy, dz) = (comp(0), comp(1), comp(2));
    let images = grid_interpolate(&xy, &[&thinning, &dx, &dy, &dz], mask, grid)?;
    let n = grid.n;
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    let mut disp = Vec::with_capacity(3 * grid.len());
    for img in &images[1..] {
        disp.extend(to32(img));
    }
    Ok(TargetStack {
        grid,
        thinning: Tensor::new(&[1, n, n], to32(&images[0]))?,
        displacement: Tensor::new(&[3, n, n], disp)?,
        mask: mask.iter().map(|&m| m as f32).collect(),
        flagged,
    })
}
