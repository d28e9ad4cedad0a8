//! Pixel grid and scattered-data interpolation onto it.
//!
//! Values are interpolated linearly over a Delaunay triangulation of the
//! scattered positions; pixels outside the convex hull take the value of
//! the nearest node.

use delaunator::{triangulate, Point};
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FRAME_MM;

/// Square pixel grid over the physical frame. Pixel `(r, c)` is centred at
/// `x = (c + 0.5) * pitch`, `y = (r + 0.5) * pitch` and stored at `r * n + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub frame_mm: f64,
}

impl GridSpec {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 {
            return Err(Error::InvalidArgument(format!(
                "grid of {n} pixels per side (minimum 8)"
            )));
        }
        Ok(Self { n, frame_mm: FRAME_MM })
    }

    pub fn pitch(&self) -> f64 {
        self.frame_mm / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn center(&self, r: usize, c: usize) -> [f64; 2] {
        let p = self.pitch();
        [(c as f64 + 0.5) * p, (r as f64 + 0.5) * p]
    }

    /// Fractional pixel coordinates `(row, col)` of a physical point.
    pub fn to_pixel(&self, x: f64, y: f64) -> [f64; 2] {
        let p = self.pitch();
        [y / p - 0.5, x / p - 0.5]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Stencil {
    Triangle([usize; 3], [f64; 3]),
    Nearest(usize),
}

/// Reusable mapping from scattered nodes to grid pixels.
#[derive(Clone, Debug)]
pub struct RasterPlan {
    grid: GridSpec,
    /// Original node index -> canonical node index.
    canonical: Vec<usize>,
    group_size: Vec<usize>,
    stencils: Vec<Stencil>,
    hull_pixels: usize,
}

impl RasterPlan {
    /// Triangulates `points` and assigns every pixel a stencil.
    ///
    /// Points are put in a canonical order first, so the result does not
    /// depend on how the caller enumerates them; coincident points share
    /// one node whose value is their mean.
    pub fn new(points: &[[f64; 2]], grid: GridSpec) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::DegeneratePoints(format!("{} points", points.len())));
        }
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::DegeneratePoints("non-finite coordinate".into()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a][0]
                .total_cmp(&points[b][0])
                .then(points[a][1].total_cmp(&points[b][1]))
        });
        let mut canonical = vec![0; points.len()];
        let mut unique: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        let mut group_size = Vec::with_capacity(points.len());
        for &i in &order {
            if unique.last() != Some(&points[i]) {
                unique.push(points[i]);
                group_size.push(0);
            }
            canonical[i] = unique.len() - 1;
            *group_size.last_mut().expect("pushed above") += 1;
        }
        let pts: Vec<Point> = unique.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
        let tri = triangulate(&pts);
        if tri.triangles.is_empty() {
            return Err(Error::DegeneratePoints("all points are collinear".into()));
        }

        let n = grid.n;
        let pitch = grid.pitch();
        let mut stencils: Vec<Option<Stencil>> = vec![None; grid.len()];
        for t in tri.triangles.chunks_exact(3) {
            let [a, b, c] = [unique[t[0]], unique[t[1]], unique[t[2]]];
            let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
            if det.abs() < 1e-300 {
                continue;
            }
            let lo_x = a[0].min(b[0]).min(c[0]);
            let hi_x = a[0].max(b[0]).max(c[0]);
            let lo_y = a[1].min(b[1]).min(c[1]);
            let hi_y = a[1].max(b[1]).max(c[1]);
            let c0 = pixel_lo(lo_x, pitch);
            let c1 = pixel_hi(hi_x, pitch, n);
            let r0 = pixel_lo(lo_y, pitch);
            let r1 = pixel_hi(hi_y, pitch, n);
            for r in r0..r1 {
                for col in c0..c1 {
                    let slot = &mut stencils[r * n + col];
                    if slot.is_some() {
                        continue;
                    }
                    let [x, y] = grid.center(r, col);
                    let l0 = ((b[1] - c[1]) * (x - c[0]) + (c[0] - b[0]) * (y - c[1])) / det;
                    let l1 = ((c[1] - a[1]) * (x - c[0]) + (a[0] - c[0]) * (y - c[1])) / det;
                    let l2 = 1.0 - l0 - l1;
                    const TOL: f64 = -1e-12;
                    if l0 >= TOL && l1 >= TOL && l2 >= TOL {
                        *slot = Some(Stencil::Triangle([t[0], t[1], t[2]], [l0, l1, l2]));
                    }
                }
            }
        }

        let hull_pixels = stencils.iter().filter(|s| s.is_some()).count();
        let stencils = if hull_pixels < grid.len() {
            let tree = RTree::bulk_load(
                unique
                    .iter()
                    .enumerate()
                    .map(|(i, p)| GeomWithData::new(*p, i))
                    .collect(),
            );
            stencils
                .into_iter()
                .enumerate()
                .map(|(k, s)| {
                    s.unwrap_or_else(|| {
                        let p = grid.center(k / n, k % n);
                        let nearest = tree.nearest_neighbor(&p).expect("tree is non-empty");
                        Stencil::Nearest(nearest.data)
                    })
                })
                .collect()
        } else {
            stencils.into_iter().map(|s| s.expect("all pixels covered")).collect()
        };

        Ok(Self {
            grid,
            canonical,
            group_size,
            stencils,
            hull_pixels,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn node_count(&self) -> usize {
        self.canonical.len()
    }

    /// Pixels whose centre lies inside the triangulated hull.
    pub fn hull_pixels(&self) -> usize {
        self.hull_pixels
    }

    /// Interpolates one nodal field (indexed like the construction points).
    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.canonical.len() {
            return Err(Error::Shape(format!(
                "{} values for {} nodes",
                values.len(),
                self.canonical.len()
            )));
        }
        let mut merged = vec![0.0; self.group_size.len()];
        for (v, &k) in values.iter().zip(&self.canonical) {
            merged[k] += v;
        }
        for (m, &g) in merged.iter_mut().zip(&self.group_size) {
            if g > 1 {
                *m /= g as f64;
            }
        }
        Ok(self
            .stencils
            .iter()
            .map(|s| match *s {
                Stencil::Triangle(ix, w) => w[0] * merged[ix[0]] + w[1] * merged[ix[1]] + w[2] * merged[ix[2]],
                Stencil::Nearest(i) => merged[i],
            })
            .collect())
    }
}

fn pixel_lo(v: f64, pitch: f64) -> usize {
    ((v / pitch - 0.5).ceil().max(0.0)) as usize
}

fn pixel_hi(v: f64, pitch: f64, n: usize) -> usize {
    let hi = (v / pitch - 0.5).floor();
    if hi < 0.0 {
        0
    } else {
        ((hi as usize) + 1).min(n)
    }
}
