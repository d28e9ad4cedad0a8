//! Quarter-model die surface and blank outline.
//!
//! Coordinates are millimetres with the punch centre at the origin; only the
//! quadrant `x, y >= 0` is modelled. Heights are a single-valued function of
//! the signed distance `s` to the rounded-square punch plan (negative inside).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterVector;

/// Half-width of the punch plan.
pub const PUNCH_HALF_WIDTH: f64 = 500.0;
/// Flange width used to size the blank.
pub const FLANGE_WIDTH: f64 = 50.0;
/// Horizontal width of the straight wall between the fillets.
pub const WALL_BAND: f64 = 2.0;
/// Side of the square physical frame shared by all samples.
pub const FRAME_MM: f64 = 740.0;
/// Largest design height; heights and displacements are divided by this.
pub const HEIGHT_SCALE_MM: f64 = 120.0;
/// Largest arc step when discretizing circular arcs.
const ARC_STEP_DEG: f64 = 1.0;

/// Piecewise die height as a function of signed distance to the punch plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DieProfile {
    pub r_die: f64,
    pub r_punch: f64,
    pub r_plan: f64,
    pub h_design: f64,
    pub w_wall: f64,
    pub half_width: f64,
}

impl DieProfile {
    pub fn new(pv: &ParameterVector) -> Self {
        Self {
            r_die: pv.r_die,
            r_punch: pv.r_punch,
            r_plan: pv.r_plan,
            h_design: pv.h_design,
            w_wall: WALL_BAND,
            half_width: PUNCH_HALF_WIDTH,
        }
    }

    /// Both coordinates of the centre of the plan corner arc.
    pub fn corner_center(&self) -> f64 {
        self.half_width - self.r_plan
    }

    /// Width of the band `|s| <= r_die + r_punch + w_wall` around the plan outline.
    pub fn band_half_width(&self) -> f64 {
        self.r_die + self.r_punch + self.w_wall
    }

    /// Signed distance where the flange plane begins.
    pub fn flange_start(&self) -> f64 {
        self.w_wall + self.r_die
    }

    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let c = self.corner_center();
        let qx = x.abs() - c;
        let qy = y.abs() - c;
        let outside = qx.max(0.0).hypot(qy.max(0.0));
        let inside = qx.max(qy).min(0.0);
        outside + inside - self.r_plan
    }

    /// Unit vector pointing towards the punch plan (negative distance gradient).
    pub fn inward(&self, x: f64, y: f64) -> [f64; 2] {
        let c = self.corner_center();
        let qx = x.abs() - c;
        let qy = y.abs() - c;
        let (gx, gy) = if qx > 0.0 && qy > 0.0 {
            let r = qx.hypot(qy);
            (qx / r, qy / r)
        } else if qx > qy {
            (1.0, 0.0)
        } else {
            (0.0, 1.0)
        };
        [-gx * x.signum(), -gy * y.signum()]
    }

    pub fn height_at(&self, s: f64) -> f64 {
        let (rp, rd, w, h) = (self.r_punch, self.r_die, self.w_wall, self.h_design);
        if s <= -rp {
            h
        } else if s <= 0.0 {
            let t = s + rp;
            h - rp + (rp * rp - t * t).max(0.0).sqrt()
        } else if s <= w {
            let top = h - rp;
            top + (rd - top) * s / w
        } else if s <= w + rd {
            let t = s - w - rd;
            rd - (rd * rd - t * t).max(0.0).sqrt()
        } else {
            0.0
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height_at(self.signed_distance(x, y))
    }

    /// Stations along the quarter outline: positions shared by every offset
    /// curve, so nodes on neighbouring contour levels line up along normals.
    /// Spacing is at most `step` on curves offset by up to `max_offset`.
    pub fn stations(&self, step: f64, max_offset: f64) -> Vec<Station> {
        let c = self.corner_center().max(0.0);
        let straight = (c / step).ceil().max(1.0) as usize;
        let radius = (self.r_plan + max_offset).max(0.0);
        let arc = ((std::f64::consts::FRAC_PI_2 * radius / step).ceil() as usize).max(1);
        let mut out = Vec::with_capacity(2 * straight + arc + 1);
        out.extend((0..straight).map(|k| Station::Top(c * k as f64 / straight as f64)));
        out.extend((0..arc).map(|j| Station::Arc(std::f64::consts::FRAC_PI_2 * (1.0 - j as f64 / arc as f64))));
        out.extend((0..=straight).map(|k| Station::Side(c * (1.0 - k as f64 / straight as f64))));
        out
    }

    /// Point at signed distance `s` along the normal through a station.
    pub fn station_point(&self, station: Station, s: f64) -> [f64; 2] {
        let c = self.corner_center();
        let radius = (self.r_plan + s).max(0.0);
        match station {
            Station::Top(x) => [x, c + radius],
            Station::Arc(phi) => [c + radius * phi.cos(), c + radius * phi.sin()],
            Station::Side(y) => [c + radius, y],
        }
    }

    /// Points of the quarter offset curve at signed distance `s`, spaced at
    /// most `step` apart, restricted to the frame.
    pub fn offset_curve(&self, s: f64, step: f64) -> Vec<[f64; 2]> {
        self.stations(step, s.max(0.0))
            .into_iter()
            .map(|st| self.station_point(st, s))
            .filter(|p| in_frame(p[0], p[1]))
            .collect()
    }
}

/// Position along the quarter outline: abscissa on the top edge, polar
/// angle on the corner arc, or ordinate on the side edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Station {
    Top(f64),
    Arc(f64),
    Side(f64),
}

pub fn in_frame(x: f64, y: f64) -> bool {
    (0.0..=FRAME_MM).contains(&x) && (0.0..=FRAME_MM).contains(&y)
}

/// Closed polygon; the ring repeats its first vertex at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    ring: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(ring: Vec<[f64; 2]>) -> Result<Self> {
        if ring.len() < 4 {
            return Err(Error::DegenerateOutline(format!("{} ring vertices", ring.len())));
        }
        if ring.first() != ring.last() {
            return Err(Error::DegenerateOutline("polygon ring is not closed".into()));
        }
        Ok(Self { ring })
    }

    pub fn ring(&self) -> &[[f64; 2]] {
        &self.ring
    }

    pub fn shoelace_area(&self) -> f64 {
        0.5 * self
            .ring
            .windows(2)
            .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
            .sum::<f64>()
            .abs()
    }

    /// Even-odd containment; points on an edge count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for w in self.ring.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            if on_segment(x, y, x0, y0, x1, y1) {
                return true;
            }
            if (y0 > y) != (y1 > y) {
                let xc = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
                if x < xc {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn on_segment(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> bool {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        ((x - x0) * dx + (y - y0) * dy) / len2
    } else {
        0.0
    };
    if !(0.0..=1.0).contains(&t) {
        return false;
    }
    let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
    px * px + py * py <= 1e-18
}

/// Quarter blank: a square of half-length `L_blank * a` with one corner
/// rounded at radius `r_blank * b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlankOutline {
    pub half_length: f64,
    pub corner_radius: f64,
    pub polygon: Polygon,
}

/// Unscaled blank half-length and corner radius: `(W + H + F, r_plan + H + F)`.
pub fn blank_dims(pv: &ParameterVector) -> (f64, f64) {
    (
        PUNCH_HALF_WIDTH + pv.h_design + FLANGE_WIDTH,
        pv.r_plan + pv.h_design + FLANGE_WIDTH,
    )
}

pub fn blank_outline(pv: &ParameterVector) -> Result<BlankOutline> {
    let (l_blank, r_blank) = blank_dims(pv);
    rounded_quarter(l_blank * pv.a_scale, r_blank * pv.b_scale)
}

pub fn rounded_quarter(half_length: f64, corner_radius: f64) -> Result<BlankOutline> {
    let (la, rb) = (half_length, corner_radius);
    if !(la > 0.0 && rb >= 0.0 && rb < la) {
        return Err(Error::DegenerateOutline(format!(
            "corner radius {rb} mm must lie in [0, {la}) mm"
        )));
    }
    if la > FRAME_MM {
        return Err(Error::DegenerateOutline(format!(
            "half-length {la} mm exceeds the {FRAME_MM} mm frame"
        )));
    }
    let mut ring = vec![[0.0, 0.0], [la, 0.0]];
    if rb > 0.0 {
        let c = la - rb;
        let segments = (90.0 / ARC_STEP_DEG).ceil() as usize;
        for k in 0..=segments {
            let phi = std::f64::consts::FRAC_PI_2 * k as f64 / segments as f64;
            ring.push([c + rb * phi.cos(), c + rb * phi.sin()]);
        }
    } else {
        ring.push([la, la]);
    }
    ring.push([0.0, la]);
    ring.push([0.0, 0.0]);
    Ok(BlankOutline {
        half_length: la,
        corner_radius: rb,
        polygon: Polygon::new(ring)?,
    })
}

impl BlankOutline {
    /// Area of the exact rounded square (before arc discretization).
    pub fn exact_area(&self) -> f64 {
        let (la, rb) = (self.half_length, self.corner_radius);
        la * la - rb * rb + std::f64::consts::FRAC_PI_4 * rb * rb
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polygon.contains(x, y)
    }
}

/// Scattered die nodes: a jittered grid at `spacing`, refined to
/// `spacing / 2` within the fillet band, plus nodes on contour levels of the
/// two fillets and wall so the steep profile is resolved.
pub fn die_point_cloud(pv: &ParameterVector, spacing: f64, seed: u64) -> Result<Vec<[f64; 3]>> {
    if !(spacing > 0.0 && spacing < FRAME_MM) {
        return Err(Error::InvalidArgument(format!(
            "point spacing {spacing} mm must be positive and below the frame size"
        )));
    }
    let profile = DieProfile::new(pv);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = profile.band_half_width();
    let strip = (
        -profile.r_punch - 0.25 * spacing,
        profile.flange_start() + 0.25 * spacing,
    );
    let mut xy: Vec<[f64; 2]> = Vec::new();

    let mut scatter = |step: f64, keep: &dyn Fn(f64) -> bool, xy: &mut Vec<[f64; 2]>| {
        let m = (FRAME_MM / step).ceil() as usize;
        let pitch = FRAME_MM / m as f64;
        for i in 0..=m {
            for j in 0..=m {
                let edge_i = i == 0 || i == m;
                let edge_j = j == 0 || j == m;
                let jx = if edge_i {
                    0.0
                } else {
                    rng.gen_range(-0.25..0.25) * pitch
                };
                let jy = if edge_j {
                    0.0
                } else {
                    rng.gen_range(-0.25..0.25) * pitch
                };
                let (x, y) = (i as f64 * pitch + jx, j as f64 * pitch + jy);
                let s = profile.signed_distance(x, y);
                if keep(s) && !(s > strip.0 && s < strip.1) {
                    xy.push([x, y]);
                }
            }
        }
    };
    scatter(spacing, &|s: f64| s.abs() > band, &mut xy);
    scatter(0.5 * spacing, &|s: f64| s.abs() <= band, &mut xy);

    let mut levels = Vec::new();
    for k in 0..=9 {
        let a = (10.0 * k as f64).to_radians();
        levels.push(-profile.r_punch + profile.r_punch * a.sin());
        levels.push(profile.flange_start() - profile.r_die * a.cos());
    }
    levels.sort_by(f64::total_cmp);
    levels.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let stations = profile.stations(0.5 * spacing, profile.flange_start());
    for s in levels {
        xy.extend(
            stations
                .iter()
                .map(|&st| profile.station_point(st, s))
                .filter(|p| in_frame(p[0], p[1])),
        );
    }

    Ok(xy.into_iter().map(|[x, y]| [x, y, profile.height(x, y)]).collect())
}
