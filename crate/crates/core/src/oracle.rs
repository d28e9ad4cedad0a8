//! Deterministic synthetic forming solver.
//!
//! Produces a quad mesh of the quarter blank with final positions,
//! displacements and elemental thinning. The response is closed-form: draw-in
//! decays away from the punch outline, the formed height follows the die
//! surface, and thinning is a Gaussian band around the punch fillet scaled by
//! process factors, with hoop thickening in the corner flange and sinusoidal
//! flange wrinkles above a spacer threshold.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{blank_outline, DieProfile};
use crate::params::{ParameterBounds, ParameterVector};

/// Blank thickness, mm.
pub fn blank_thickness() -> f64 {
    2.0
}

/// Coefficients of the synthetic response.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Draw-in gain `k_d`.
    pub draw_in_gain: f64,
    /// Peak thinning at the reference punch radius.
    pub peak_thinning: f64,
    pub reference_punch_radius: f64,
    /// Corner amplification `c_c`.
    pub corner_gain: f64,
    /// Hoop thickening magnitude in the corner flange.
    pub hoop_thickening: f64,
    /// Wrinkle amplitude per mm of excess spacer gap.
    pub wrinkle_gain: f64,
    /// Spacer gap above the blank thickness tolerated before wrinkling, mm.
    pub wrinkle_clearance: f64,
    pub wrinkle_count: f64,
    /// Radial length over which wrinkles grow to full amplitude, mm.
    pub wrinkle_ramp: f64,
    /// Sidewall thinning per mm of wrinkle amplitude.
    pub sidewall_gain: f64,
    /// Thinning magnitude above which values saturate smoothly towards 1.
    pub saturation_knee: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            draw_in_gain: 0.25,
            peak_thinning: 0.18,
            reference_punch_radius: 15.0,
            corner_gain: 0.8,
            hoop_thickening: 0.12,
            wrinkle_gain: 0.9,
            wrinkle_clearance: 0.5,
            wrinkle_count: 12.0,
            wrinkle_ramp: 50.0,
            sidewall_gain: 0.05,
            saturation_knee: 0.8,
        }
    }
}

/// Temperature factor: 0.6 at 350 degC, 1.4 at 500 degC.
pub fn temperature_factor(t_init: f64) -> f64 {
    0.6 + 0.8 * (t_init - 350.0) / 150.0
}

/// Speed factor: 1.3 at 50 mm/s, 0.7 at 500 mm/s.
pub fn speed_factor(speed: f64) -> f64 {
    1.3 - 0.6 * (speed - 50.0) / 450.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormingResult {
    pub nodes_final: Vec<[f64; 3]>,
    pub displacements: Vec<[f64; 3]>,
    pub elements: Vec<[usize; 4]>,
    /// Positive for thinning, negative for thickening.
    pub elemental_thinning: Vec<f64>,
}

impl FormingResult {
    pub fn max_thinning(&self) -> f64 {
        self.elemental_thinning
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest out-of-die height of any node, mm.
    pub fn wrinkle_amplitude(&self, pv: &ParameterVector) -> f64 {
        let profile = DieProfile::new(pv);
        self.nodes_final
            .iter()
            .map(|p| (p[2] - profile.height(p[0], p[1])).abs())
            .fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<()> {
        if self.nodes_final.len() != self.displacements.len() {
            return Err(Error::Connectivity(format!(
                "{} final nodes, {} displacements",
                self.nodes_final.len(),
                self.displacements.len()
            )));
        }
        if self.elements.len() != self.elemental_thinning.len() {
            return Err(Error::Connectivity(format!(
                "{} elements, {} thinning values",
                self.elements.len(),
                self.elemental_thinning.len()
            )));
        }
        let n = self.nodes_final.len();
        if let Some(e) = self.elements.iter().find(|e| e.iter().any(|&i| i >= n)) {
            return Err(Error::Connectivity(format!(
                "element {e:?} references a node beyond {n}"
            )));
        }
        Ok(())
    }
}

/// Smooth, strictly monotone saturation keeping values inside `(-1, 1)`.
fn saturate(v: f64, knee: f64) -> f64 {
    let m = v.abs();
    if m <= knee {
        v
    } else {
        let room = 1.0 - knee;
        v.signum() * (knee + room * ((m - knee) / room).tanh())
    }
}

struct Response<'a> {
    pv: &'a ParameterVector,
    cfg: &'a OracleConfig,
    profile: DieProfile,
    process: f64,
    wrinkle_amp: f64,
}

impl<'a> Response<'a> {
    fn new(pv: &'a ParameterVector, cfg: &'a OracleConfig) -> Self {
        Self {
            pv,
            cfg,
            profile: DieProfile::new(pv),
            process: temperature_factor(pv.t_init) * speed_factor(pv.speed),
            wrinkle_amp: cfg.wrinkle_gain * (pv.t_spacer - blank_thickness() - cfg.wrinkle_clearance).max(0.0),
        }
    }

    /// Polar angle about the plan-corner centre.
    fn angle(&self, x: f64, y: f64) -> f64 {
        let c = self.profile.corner_center();
        (y - c).atan2(x - c)
    }

    /// `sin(2 theta)` inside the corner quadrant, zero along the straight edges.
    fn corner_proximity(&self, x: f64, y: f64) -> f64 {
        let c = self.profile.corner_center();
        if x >= c && y >= c {
            (2.0 * self.angle(x, y)).sin().max(0.0)
        } else {
            0.0
        }
    }

    fn wrinkle(&self, x: f64, y: f64, s0: f64) -> f64 {
        if self.wrinkle_amp == 0.0 {
            return 0.0;
        }
        let ramp = ((s0 - self.profile.flange_start()) / self.cfg.wrinkle_ramp).clamp(0.0, 1.0);
        self.wrinkle_amp * (self.cfg.wrinkle_count * self.angle(x, y)).sin() * ramp
    }

    fn node(&self, x0: f64, y0: f64) -> ([f64; 3], [f64; 3]) {
        let h = self.pv.h_design;
        let s0 = self.profile.signed_distance(x0, y0);
        let g = if s0 > 0.0 {
            self.cfg.draw_in_gain * h * self.process * (-s0 / h).exp()
        } else {
            0.0
        };
        let u = self.profile.inward(x0, y0);
        let (dx, dy) = (g * u[0], g * u[1]);
        let (x, y) = (x0 + dx, y0 + dy);
        let z = self.profile.height(x, y) + self.wrinkle(x0, y0, s0);
        ([x, y, z], [dx, dy, z])
    }

    fn thinning(&self, x0: f64, y0: f64) -> f64 {
        let p = &self.profile;
        let cfg = self.cfg;
        let s0 = p.signed_distance(x0, y0);
        let t_pk = cfg.peak_thinning * (cfg.reference_punch_radius / p.r_punch).sqrt();
        let s_pk = -0.5 * p.r_punch;
        let sigma = p.r_punch + p.r_die;
        let prox = self.corner_proximity(x0, y0);
        let band = t_pk * (-((s0 - s_pk) / sigma).powi(2)).exp() * self.process * (1.0 + cfg.corner_gain * prox);
        let flange_kernel = prox * ((s0 - p.flange_start()) / crate::geometry::FLANGE_WIDTH).clamp(0.0, 1.0);
        let mut t = band - cfg.hoop_thickening * flange_kernel;
        if self.wrinkle_amp > 0.0 && s0 > 0.0 && s0 < p.r_die {
            let phase = 0.5 * (1.0 + (cfg.wrinkle_count * self.angle(x0, y0)).sin());
            t += cfg.sidewall_gain * self.wrinkle_amp * phase;
        }
        saturate(t, cfg.saturation_knee)
    }
}

/// Runs the synthetic solver on a mesh of nominal element size `spacing` mm,
/// refined 2x within the fillet band. The seed permutes node and element
/// enumeration.
pub fn simulate(
    pv: &ParameterVector,
    bounds: &ParameterBounds,
    cfg: &OracleConfig,
    spacing: f64,
    seed: u64,
) -> Result<FormingResult> {
    pv.validate(bounds).into_result()?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("mesh spacing {spacing} mm")));
    }
    let outline = blank_outline(pv)?;
    let response = Response::new(pv, cfg);
    let profile = response.profile;
    let band = profile.band_half_width();
    let m = (outline.half_length / spacing).ceil() as i64;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "mesh spacing {spacing} mm is coarser than the blank"
        )));
    }

    // Node keys are integer coordinates in half-spacing units.
    let half = 0.5 * spacing;
    let pos = |k: (i64, i64)| (k.0 as f64 * half, k.1 as f64 * half);
    let inside = |k: (i64, i64)| {
        let (x, y) = pos(k);
        outline.contains(x, y)
    };
    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let mut keys: Vec<(i64, i64)> = Vec::new();
    let mut elements_k: Vec<[usize; 4]> = Vec::new();
    let mut id = |k: (i64, i64), keys: &mut Vec<(i64, i64)>| {
        *index.entry(k).or_insert_with(|| {
            keys.push(k);
            keys.len() - 1
        })
    };
    for i in 0..m {
        for j in 0..m {
            let corners = [
                (2 * i, 2 * j),
                (2 * i + 2, 2 * j),
                (2 * i + 2, 2 * j + 2),
                (2 * i, 2 * j + 2),
            ];
            if !corners.iter().all(|&k| inside(k)) {
                continue;
            }
            let refine = corners.iter().any(|&k| {
                let (x, y) = pos(k);
                profile.signed_distance(x, y).abs() <= band
            });
            if refine {
                for (a, b) in [(0, 0), (1, 0), (1, 1), (0, 1)] {
                    let (bi, bj) = (2 * i + a, 2 * j + b);
                    let q = [(bi, bj), (bi + 1, bj), (bi + 1, bj + 1), (bi, bj + 1)];
                    elements_k.push(q.map(|k| id(k, &mut keys)));
                }
            } else {
                elements_k.push(corners.map(|k| id(k, &mut keys)));
            }
        }
    }
    if elements_k.is_empty() {
        return Err(Error::InvalidArgument("no mesh cell fits inside the blank".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut node_order: Vec<usize> = (0..keys.len()).collect();
    node_order.shuffle(&mut rng);
    let mut relabel = vec![0; keys.len()];
    for (new, &old) in node_order.iter().enumerate() {
        relabel[old] = new;
    }
    let mut element_order: Vec<usize> = (0..elements_k.len()).collect();
    element_order.shuffle(&mut rng);

    let mut nodes_final = Vec::with_capacity(keys.len());
    let mut displacements = Vec::with_capacity(keys.len());
    for &old in &node_order {
        let (x0, y0) = pos(keys[old]);
        let (p, d) = response.node(x0, y0);
        nodes_final.push(p);
        displacements.push(d);
    }
    let mut elements = Vec::with_capacity(elements_k.len());
    let mut elemental_thinning = Vec::with_capacity(elements_k.len());
    for &e in &element_order {
        let quad = elements_k[e];
        let (mut cx, mut cy) = (0.0, 0.0);
        for &k in &quad {
            let (x, y) = pos(keys[k]);
            cx += 0.25 * x;
            cy += 0.25 * y;
        }
        elements.push(quad.map(|k| relabel[k]));
        elemental_thinning.push(response.thinning(cx, cy));
    }
    Ok(FormingResult {
        nodes_final,
        displacements,
        elements,
        elemental_thinning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;

    fn mid() -> ParameterVector {
        ParameterVector::midpoint(&ParameterBounds::default())
    }

    #[test]
    fn blank_thickness_constant() {
        assert_eq!(blank_thickness(), 2.0);
    }

    #[test]
    fn saturation_is_monotone_and_bounded() {
        let mut prev = -10.0f64;
        for k in -300..=300 {
            let v = saturate(k as f64 * 0.01, 0.8);
            assert!(v > prev - 1e-15 && v.abs() < 1.0);
            prev = v;
        }
        assert_eq!(saturate(0.5, 0.8), 0.5);
    }

    #[test]
    fn process_factors_at_bounds() {
        assert!((temperature_factor(350.0) - 0.6).abs() < 1e-12);
        assert!((temperature_factor(500.0) - 1.4).abs() < 1e-12);
        assert!((speed_factor(50.0) - 1.3).abs() < 1e-12);
        assert!((speed_factor(500.0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn small_spacer_has_no_wrinkles() {
        let b = ParameterBounds::default();
        let pv = mid().with(Param::TSpacer, 2.0);
        let r = simulate(&pv, &b, &OracleConfig::default(), 10.0, 0).unwrap();
        assert!(r.wrinkle_amplitude(&pv) < 1e-9);
    }

    #[test]
    fn mesh_is_consistent_and_flat_when_undeformed() {
        let b = ParameterBounds::default();
        let r = simulate(&mid(), &b, &OracleConfig::default(), 10.0, 5).unwrap();
        r.check().unwrap();
        for (p, d) in r.nodes_final.iter().zip(&r.displacements) {
            assert_eq!(p[2] - d[2], 0.0);
        }
        assert!(r.elemental_thinning.iter().all(|t| t.is_finite() && t.abs() <= 1.0));
    }

    #[test]
    fn invalid_parameters_rejected() {
        let b = ParameterBounds::default();
        assert!(simulate(&mid().with(Param::TInit, 600.0), &b, &OracleConfig::default(), 10.0, 0).is_err());
        assert!(simulate(&mid(), &b, &OracleConfig::default(), 0.0, 0).is_err());
    }
}
