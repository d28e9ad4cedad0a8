//! As-formed surfaces from displacement images, wrinkle-height fields and
//! the FQM text mesh format.
//!
//! FQM has one record per line: `n <id> <x> <y> <z>` for nodes and
//! `e <id> <n1> <n2> <n3> <n4>` for quads. Ids are 1-based.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fqt::Container;
use crate::geometry::{DieProfile, FLANGE_WIDTH, HEIGHT_SCALE_MM};
use crate::interp::GridSpec;
use crate::metrics::{bilinear, count_peaks};
use crate::oracle::FormingResult;
use crate::params::ParameterVector;
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW: usize = 15;

/// Smallest peak rise, mm, counted as a wrinkle along the corner arc.
pub const WRINKLE_MIN_RISE_MM: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct AsFormedMesh {
    pub grid: GridSpec,
    /// Deformed positions, mm.
    pub vertices: Vec<[f64; 3]>,
    /// Source pixel (`r * n + c`) of each vertex.
    pub pixels: Vec<usize>,
    pub faces: Vec<[usize; 4]>,
    pub thinning: Vec<f64>,
}

/// Moves every in-mask pixel centre by its un-normalised displacement.
pub fn as_formed_mesh(
    displacement: &Tensor<f32>,
    thinning: &Tensor<f32>,
    mask: &[f32],
    grid: GridSpec,
) -> Result<AsFormedMesh> {
    let n = grid.n;
    if displacement.dims() != [3, n, n] || thinning.len() != grid.len() || mask.len() != grid.len() {
        return Err(Error::Shape(format!(
            "displacement {:?}, thinning {:?} and a mask of {} on a {n}x{n} grid",
            displacement.dims(),
            thinning.dims(),
            mask.len()
        )));
    }
    let len = grid.len();
    let d = displacement.data();
    let mut index = vec![usize::MAX; len];
    let mut vertices = Vec::new();
    let mut pixels = Vec::new();
    let mut values = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if mask[i] <= 0.0 {
                continue;
            }
            let [x, y] = grid.center(r, c);
            let s = HEIGHT_SCALE_MM;
            index[i] = vertices.len();
            vertices.push([
                x + f64::from(d[i]) * s,
                y + f64::from(d[len + i]) * s,
                f64::from(d[2 * len + i]) * s,
            ]);
            pixels.push(i);
            values.push(f64::from(thinning.data()[i]));
        }
    }
    if vertices.is_empty() {
        return Err(Error::EmptyRequest("mask selects no pixels"));
    }
    let mut faces = Vec::new();
    for r in 0..n - 1 {
        for c in 0..n - 1 {
            let q = [r * n + c, r * n + c + 1, (r + 1) * n + c + 1, (r + 1) * n + c];
            if q.iter().all(|&i| index[i] != usize::MAX) {
                faces.push(q.map(|i| index[i]));
            }
        }
    }
    Ok(AsFormedMesh {
        grid,
        vertices,
        pixels,
        faces,
        thinning: values,
    })
}

impl AsFormedMesh {
    /// Vertex heights on the pixel grid, 0 outside the mask.
    pub fn z_image(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.grid.len()];
        for (v, &p) in self.vertices.iter().zip(&self.pixels) {
            z[p] = v[2];
        }
        z
    }

    /// Pixels whose deformed position lies in the flange plane, at least one
    /// pixel pitch outside the die-radius tangent line.
    pub fn flange_band(&self, pv: &ParameterVector) -> Vec<bool> {
        let profile = DieProfile::new(pv);
        let limit = profile.flange_start() + self.grid.pitch();
        let mut band = vec![false; self.grid.len()];
        for (v, &p) in self.vertices.iter().zip(&self.pixels) {
            band[p] = profile.signed_distance(v[0], v[1]) > limit;
        }
        band
    }

    pub fn to_fqm(&self) -> String {
        write_fqm(&self.vertices, &self.faces)
    }
}

/// `z` minus its moving average over a `window x window` box of band pixels,
/// re-centred so the band mean is zero; 0 outside the band.
pub fn wrinkle_height(z: &[f64], band: &[bool], n: usize, window: usize) -> Result<Vec<f64>> {
    if z.len() != n * n || band.len() != n * n {
        return Err(Error::Shape(format!(
            "{} heights and {} band flags on a {n}x{n} grid",
            z.len(),
            band.len()
        )));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window {window} must be odd and at least 3"
        )));
    }
    if window > n {
        return Err(Error::InvalidArgument(format!(
            "window {window} exceeds the {n}-pixel grid"
        )));
    }
    // summed-area tables of band heights and band counts
    let w = n + 1;
    let mut sum = vec![0.0; w * w];
    let mut cnt = vec![0.0; w * w];
    for r in 0..n {
        for c in 0..n {
            let (v, k) = if band[r * n + c] {
                (z[r * n + c], 1.0)
            } else {
                (0.0, 0.0)
            };
            let i = (r + 1) * w + c + 1;
            sum[i] = v + sum[i - 1] + sum[i - w] - sum[i - w - 1];
            cnt[i] = k + cnt[i - 1] + cnt[i - w] - cnt[i - w - 1];
        }
    }
    let h = window / 2;
    let boxed = |t: &[f64], r: usize, c: usize| {
        let (r0, r1) = (r.saturating_sub(h), (r + h + 1).min(n));
        let (c0, c1) = (c.saturating_sub(h), (c + h + 1).min(n));
        t[r1 * w + c1] - t[r0 * w + c1] - t[r1 * w + c0] + t[r0 * w + c0]
    };
    let mut out = vec![0.0; n * n];
    let mut total = 0.0;
    let mut members = 0usize;
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if band[i] {
                out[i] = z[i] - boxed(&sum, r, c) / boxed(&cnt, r, c);
                total += out[i];
                members += 1;
            }
        }
    }
    if members > 0 {
        let mean = total / members as f64;
        for (o, &b) in out.iter_mut().zip(band) {
            if b {
                *o -= mean;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSummary {
    pub max_thinning: f64,
    pub mean_thinning: f64,
    pub max_wrinkle_height_mm: f64,
    pub wrinkle_count: usize,
}

/// Deviation sampled along a quarter arc about the plan-corner centre, at
/// half a flange width inside the blank's corner edge.
pub fn corner_arc_profile(deviation: &[f64], grid: GridSpec, pv: &ParameterVector, points: usize) -> Vec<f64> {
    let profile = DieProfile::new(pv);
    let c = profile.corner_center();
    let radius = pv.r_plan + pv.h_design + 0.5 * FLANGE_WIDTH;
    (0..points)
        .map(|k| {
            let th = std::f64::consts::FRAC_PI_2 * k as f64 / (points - 1) as f64;
            let [r, col] = grid.to_pixel(c + radius * th.cos(), c + radius * th.sin());
            bilinear(deviation, grid.n, r, col)
        })
        .collect()
}

/// Mesh, wrinkle-height field and scalar summary for one prediction.
pub fn summarize(mesh: &AsFormedMesh, pv: &ParameterVector, window: usize) -> Result<(Vec<f64>, ReconstructSummary)> {
    let n = mesh.grid.n;
    let band = mesh.flange_band(pv);
    let dev = wrinkle_height(&mesh.z_image(), &band, n, window)?;
    let max_thinning = mesh.thinning.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_thinning = mesh.thinning.iter().sum::<f64>() / mesh.thinning.len() as f64;
    let max_wrinkle = dev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let arc = corner_arc_profile(&dev, mesh.grid, pv, 181);
    Ok((
        dev,
        ReconstructSummary {
            max_thinning,
            mean_thinning,
            max_wrinkle_height_mm: max_wrinkle,
            wrinkle_count: count_peaks(&arc, WRINKLE_MIN_RISE_MM),
        },
    ))
}

pub fn write_fqm(nodes: &[[f64; 3]], elements: &[[usize; 4]]) -> String {
    let mut s = String::with_capacity(40 * nodes.len() + 30 * elements.len());
    for (i, p) in nodes.iter().enumerate() {
        let _ = writeln!(s, "n {} {} {} {}", i + 1, p[0], p[1], p[2]);
    }
    for (i, e) in elements.iter().enumerate() {
        let _ = writeln!(s, "e {} {} {} {} {}", i + 1, e[0] + 1, e[1] + 1, e[2] + 1, e[3] + 1);
    }
    s
}

/// Node positions and 0-based quad connectivity.
pub type QuadMesh = (Vec<[f64; 3]>, Vec<[usize; 4]>);

pub fn read_fqm(text: &str) -> Result<QuadMesh> {
    let bad = |line: usize, what: &str| Error::Format(format!("FQM line {}: {what}", line + 1));
    let mut nodes = Vec::new();
    let mut elements = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut f = line.split_whitespace();
        let Some(tag) = f.next() else { continue };
        let id: usize = f
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(ln, "missing id"))?;
        let rest: Vec<&str> = f.collect();
        match (tag, rest.len()) {
            ("n", 3) => {
                if id != nodes.len() + 1 {
                    return Err(bad(ln, "node ids must be consecutive from 1"));
                }
                let mut p = [0.0; 3];
                for (k, v) in rest.iter().enumerate() {
                    p[k] = v.parse().map_err(|_| bad(ln, "bad coordinate"))?;
                }
                nodes.push(p);
            }
            ("e", 4) => {
                if id != elements.len() + 1 {
                    return Err(bad(ln, "element ids must be consecutive from 1"));
                }
                let mut e = [0usize; 4];
                for (k, v) in rest.iter().enumerate() {
                    let j: usize = v.parse().map_err(|_| bad(ln, "bad node reference"))?;
                    e[k] = j.checked_sub(1).ok_or_else(|| bad(ln, "node reference 0"))?;
                }
                elements.push(e);
            }
            _ => return Err(bad(ln, "unknown record")),
        }
    }
    if let Some(e) = elements.iter().find(|e| e.iter().any(|&j| j >= nodes.len())) {
        return Err(Error::Connectivity(format!(
            "FQM element {e:?} references a missing node"
        )));
    }
    Ok((nodes, elements))
}

/// FQM mesh of the final nodes plus an FQT sidecar with elemental thinning
/// and nodal displacements.
pub fn export_forming_result(result: &FormingResult) -> Result<(String, Container)> {
    result.check()?;
    let mut c = Container::new();
    let thin: Vec<f32> = result.elemental_thinning.iter().map(|&v| v as f32).collect();
    c.push("elemental_thinning", Tensor::new(&[thin.len()], thin)?);
    let disp: Vec<f32> = result.displacements.iter().flat_map(|d| d.map(|v| v as f32)).collect();
    c.push("displacements", Tensor::new(&[result.displacements.len(), 3], disp)?);
    Ok((write_fqm(&result.nodes_final, &result.elements), c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(16).unwrap()
    }

    #[test]
    fn zero_displacement_is_flat() {
        let g = grid();
        let d = Tensor::zeros(&[3, 16, 16]);
        let t = Tensor::zeros(&[1, 16, 16]);
        let mut mask = vec![0.0f32; 256];
        for r in 0..4 {
            for c in 0..5 {
                mask[r * 16 + c] = 1.0;
            }
        }
        let m = as_formed_mesh(&d, &t, &mask, g).unwrap();
        assert_eq!(m.vertices.len(), 20);
        assert_eq!(m.faces.len(), 3 * 4);
        assert!(m.vertices.iter().all(|v| v[2] == 0.0));
        assert_eq!(m.vertices[6], [g.center(1, 1)[0], g.center(1, 1)[1], 0.0]);
        assert!(as_formed_mesh(&d, &t, &[0.0; 256], g).is_err());
    }

    #[test]
    fn uniform_dz_lifts_plane() {
        let g = grid();
        let mut d = Tensor::zeros(&[3, 16, 16]);
        d.data_mut()[512..].fill(10.0 / 120.0);
        let m = as_formed_mesh(&d, &Tensor::zeros(&[1, 16, 16]), &[1.0; 256], g).unwrap();
        assert!(m.vertices.iter().all(|v| (v[2] - 10.0).abs() < 1e-5));
        assert_eq!(m.faces.len(), 15 * 15);
    }

    #[test]
    fn constant_z_has_no_wrinkles() {
        let band = vec![true; 256];
        let dev = wrinkle_height(&[3.0; 256], &band, 16, 5).unwrap();
        assert!(dev.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_checks() {
        let band = vec![true; 64];
        assert!(wrinkle_height(&[0.0; 64], &band, 8, 4).is_err());
        assert!(wrinkle_height(&[0.0; 64], &band, 8, 1).is_err());
        assert!(wrinkle_height(&[0.0; 64], &band, 8, 9).is_err());
    }

    #[test]
    fn fqm_round_trip() {
        let nodes = vec![[0.0, 0.0, 0.0], [1.5, 0.0, -2.25], [1.5, 1.0, 1e-9], [0.1, 1.0, 3.0]];
        let elements = vec![[0, 1, 2, 3]];
        let text = write_fqm(&nodes, &elements);
        assert!(text.starts_with("n 1 0 0 0\n"));
        assert!(text.ends_with("e 1 1 2 3 4\n"));
        assert_eq!(read_fqm(&text).unwrap(), (nodes, elements));
        assert!(read_fqm("n 1 0 0 0\ne 1 1 2 3 4\n").is_err());
        assert!(read_fqm("x 1 0 0 0\n").is_err());
    }
}
