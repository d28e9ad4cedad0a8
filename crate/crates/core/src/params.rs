//! The nine-parameter design space, its validation, and Latin-hypercube sampling.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum height of the straight wall between the two fillets, mm.
pub const WALL_MARGIN_MM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    RDie,
    RPunch,
    RPlan,
    HDesign,
    AScale,
    BScale,
    TSpacer,
    TInit,
    Speed,
}

impl Param {
    pub const ALL: [Param; 9] = [
        Param::RDie,
        Param::RPunch,
        Param::RPlan,
        Param::HDesign,
        Param::AScale,
        Param::BScale,
        Param::TSpacer,
        Param::TInit,
        Param::Speed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::RDie => "r_die",
            Param::RPunch => "r_punch",
            Param::RPlan => "r_plan",
            Param::HDesign => "h_design",
            Param::AScale => "a_scale",
            Param::BScale => "b_scale",
            Param::TSpacer => "t_spacer",
            Param::TInit => "t_init",
            Param::Speed => "speed",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Param::AScale | Param::BScale => "",
            Param::TInit => "degC",
            Param::Speed => "mm/s",
            _ => "mm",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One design: die geometry, blank scaling and process conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub r_die: f64,
    pub r_punch: f64,
    pub r_plan: f64,
    pub h_design: f64,
    pub a_scale: f64,
    pub b_scale: f64,
    pub t_spacer: f64,
    pub t_init: f64,
    pub speed: f64,
}

impl ParameterVector {
    pub fn from_array(v: [f64; 9]) -> Self {
        Self {
            r_die: v[0],
            r_punch: v[1],
            r_plan: v[2],
            h_design: v[3],
            a_scale: v[4],
            b_scale: v[5],
            t_spacer: v[6],
            t_init: v[7],
            speed: v[8],
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.r_die,
            self.r_punch,
            self.r_plan,
            self.h_design,
            self.a_scale,
            self.b_scale,
            self.t_spacer,
            self.t_init,
            self.speed,
        ]
    }

    pub fn get(&self, p: Param) -> f64 {
        self.to_array()[p.index()]
    }

    pub fn set(&mut self, p: Param, value: f64) {
        let mut a = self.to_array();
        a[p.index()] = value;
        *self = Self::from_array(a);
    }

    pub fn with(mut self, p: Param, value: f64) -> Self {
        self.set(p, value);
        self
    }

    /// The four die-shape parameters, used to tell geometries apart.
    pub fn geometry_key(&self) -> [u64; 4] {
        [self.r_die, self.r_punch, self.r_plan, self.h_design].map(f64::to_bits)
    }

    /// Checks ranges and the wall-existence rule.
    pub fn validate(&self, bounds: &ParameterBounds) -> ValidityReport {
        let mut violations = Vec::new();
        for p in Param::ALL {
            let v = self.get(p);
            let (lo, hi) = bounds.get(p);
            if !(v >= lo && v <= hi) {
                violations.push(Violation {
                    constraint: format!("{p} out of range"),
                    fields: vec![p],
                    detail: format!("{v} not in [{lo}, {hi}]"),
                });
            }
        }
        if !wall_ok(self) {
            violations.push(Violation {
                constraint: "wall constraint".into(),
                fields: vec![Param::HDesign, Param::RDie, Param::RPunch],
                detail: format!(
                    "h_design {} < r_die {} + r_punch {} + {WALL_MARGIN_MM}",
                    self.h_design, self.r_die, self.r_punch
                ),
            });
        }
        ValidityReport { violations }
    }

    pub fn midpoint(bounds: &ParameterBounds) -> Self {
        Self::from_array(std::array::from_fn(|i| {
            let (lo, hi) = bounds.get(Param::ALL[i]);
            0.5 * (lo + hi)
        }))
    }
}

fn wall_ok(pv: &ParameterVector) -> bool {
    pv.h_design >= pv.r_die + pv.r_punch + WALL_MARGIN_MM
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: String,
    /// Parameters involved in the violated constraint.
    pub fields: Vec<Param>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub violations: Vec<Violation>,
}

impl ValidityReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidParameters(
                self.violations
                    .into_iter()
                    .map(|v| format!("{}: {}", v.constraint, v.detail))
                    .collect(),
            ))
        }
    }
}

/// Closed interval per parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterBounds {
    pub r_die: (f64, f64),
    pub r_punch: (f64, f64),
    pub r_plan: (f64, f64),
    pub h_design: (f64, f64),
    pub a_scale: (f64, f64),
    pub b_scale: (f64, f64),
    pub t_spacer: (f64, f64),
    pub t_init: (f64, f64),
    pub speed: (f64, f64),
}

impl Default for ParameterBounds {
    fn default() -> Self {
        Self {
            r_die: (5.0, 25.0),
            r_punch: (5.0, 25.0),
            r_plan: (60.0, 120.0),
            h_design: (60.0, 120.0),
            a_scale: (0.9, 1.1),
            b_scale: (0.1, 1.1),
            t_spacer: (2.0, 10.0),
            t_init: (350.0, 500.0),
            speed: (50.0, 500.0),
        }
    }
}

impl ParameterBounds {
    pub fn get(&self, p: Param) -> (f64, f64) {
        match p {
            Param::RDie => self.r_die,
            Param::RPunch => self.r_punch,
            Param::RPlan => self.r_plan,
            Param::HDesign => self.h_design,
            Param::AScale => self.a_scale,
            Param::BScale => self.b_scale,
            Param::TSpacer => self.t_spacer,
            Param::TInit => self.t_init,
            Param::Speed => self.speed,
        }
    }

    pub fn check(&self) -> Result<()> {
        for p in Param::ALL {
            let (lo, hi) = self.get(p);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "bounds for {p}: [{lo}, {hi}] is not an interval"
                )));
            }
        }
        Ok(())
    }

    /// Affine map of every coordinate onto `[0, 1]`.
    pub fn to_unit(&self, pv: &ParameterVector) -> Result<[f64; 9]> {
        let mut out = [0.0; 9];
        for p in Param::ALL {
            let (lo, hi) = self.get(p);
            let v = pv.get(p);
            if !(v >= lo && v <= hi) {
                return Err(Error::OutOfRange {
                    name: p.name(),
                    value: v,
                    lower: lo,
                    upper: hi,
                });
            }
            out[p.index()] = (v - lo) / (hi - lo);
        }
        Ok(out)
    }

    pub fn from_unit(&self, u: &[f64; 9]) -> ParameterVector {
        ParameterVector::from_array(std::array::from_fn(|i| {
            let (lo, hi) = self.get(Param::ALL[i]);
            lo + u[i] * (hi - lo)
        }))
    }

    /// `0.1 + 0.9 * unit`, the encoding of scalar inputs on the blank mask.
    pub fn scalar_norm(&self, p: Param, value: f64) -> Result<f64> {
        let (lo, hi) = self.get(p);
        if !(value >= lo && value <= hi) {
            return Err(Error::OutOfRange {
                name: p.name(),
                value,
                lower: lo,
                upper: hi,
            });
        }
        Ok(0.1 + 0.9 * (value - lo) / (hi - lo))
    }
}

const REPAIR_ATTEMPTS: usize = 64;

/// Latin-hypercube design: each coordinate's range is cut into `n` strata
/// and every stratum holds exactly one sample, jittered uniformly inside it.
///
/// Samples breaking the wall rule are repaired by redrawing the offending
/// coordinates inside their own strata.
pub fn lhs_sample(n: usize, bounds: &ParameterBounds, seed: u64) -> Result<Vec<ParameterVector>> {
    if n == 0 {
        return Err(Error::EmptyRequest("Latin-hypercube sample of size 0"));
    }
    bounds.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata: Vec<Vec<usize>> = Param::ALL
        .iter()
        .map(|_| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            perm
        })
        .collect();
    let place = |p: Param, k: usize, u: f64| {
        let (lo, hi) = bounds.get(p);
        lo + (k as f64 + u) / n as f64 * (hi - lo)
    };
    let mut out: Vec<ParameterVector> = (0..n)
        .map(|i| ParameterVector::from_array(std::array::from_fn(|d| place(Param::ALL[d], strata[d][i], rng.gen()))))
        .collect();
    let h_stratum: Vec<usize> = strata[Param::HDesign.index()].clone();
    for i in 0..n {
        let mut attempts = 0;
        while !wall_ok(&out[i]) && attempts < REPAIR_ATTEMPTS {
            out[i].h_design = place(Param::HDesign, h_stratum[i], rng.gen());
            attempts += 1;
        }
    }
    // Redraws failed: exchange design heights with a partner whose stratum
    // fits, which keeps every stratum occupied exactly once.
    for i in 0..n {
        if wall_ok(&out[i]) {
            continue;
        }
        let partner = (0..n).find(|&j| {
            let (a, b) = (
                out[i].with(Param::HDesign, out[j].h_design),
                out[j].with(Param::HDesign, out[i].h_design),
            );
            j != i && wall_ok(&a) && wall_ok(&b)
        });
        match partner {
            Some(j) => {
                let h = out[i].h_design;
                out[i].h_design = out[j].h_design;
                out[j].h_design = h;
            }
            None => {
                return Err(Error::InvalidArgument(format!(
                    "sample {i}: wall constraint cannot be met by in-stratum repair"
                )))
            }
        }
    }
    Ok(out)
}

/// A design of experiments as exported to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoeRun {
    pub seed: u64,
    pub n: usize,
    pub bounds: ParameterBounds,
    pub samples: Vec<ParameterVector>,
}

impl DoeRun {
    pub fn generate(n: usize, bounds: ParameterBounds, seed: u64) -> Result<Self> {
        let samples = lhs_sample(n, &bounds, seed)?;
        Ok(Self {
            seed,
            n,
            bounds,
            samples,
        })
    }
}
