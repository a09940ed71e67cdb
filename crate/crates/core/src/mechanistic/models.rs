use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Which macrokinetic model a parameter vector or dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "MMK")]
    Mmk,
    #[serde(rename = "ECOLI")]
    Ecoli,
}

const MMK_PARAMS: &[&str] = &["Vmax", "Km", "S0", "P0"];
const ECOLI_PARAMS: &[&str] = &[
    "qs_max", "Ks", "qs_crit", "Kia", "Yas", "qa_max", "Ka", "Kis", "Yxs_ox", "Yxs_of", "Yxa", "Yos", "Yoa", "kLa",
    "X0", "S0", "A0", "DOT0",
];

/// Oxygen-uptake scaling: DOT saturation 100 % over c* = 0.0084 g/L.
pub const TAU_O: f64 = 100.0 / 0.0084;
/// Upper bound of dissolved oxygen tension, in percent of saturation.
pub const DOT_MAX: f64 = 100.0;

impl ModelKind {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Mmk => MMK_PARAMS,
            ModelKind::Ecoli => ECOLI_PARAMS,
        }
    }

    /// Parameters that are initial conditions (allowed to be zero).
    pub fn is_initial_condition(self, name: &str) -> bool {
        match self {
            ModelKind::Mmk => matches!(name, "S0" | "P0"),
            ModelKind::Ecoli => matches!(name, "X0" | "S0" | "A0" | "DOT0"),
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            ModelKind::Mmk => 2,
            ModelKind::Ecoli => 4,
        }
    }

    /// Observed channels as `(name, unit)`; channel `c` is state component `c`.
    pub fn channels(self) -> &'static [(&'static str, &'static str)] {
        match self {
            ModelKind::Mmk => &[("A", "g/L"), ("P", "g/L")],
            ModelKind::Ecoli => &[("X", "g/L"), ("S", "g/L"), ("A", "g/L"), ("DOT", "%")],
        }
    }

    pub fn n_channels(self) -> usize {
        self.channels().len()
    }

    /// Short lowercase identifier used for directories and CLI flags.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Mmk => "mmk",
            ModelKind::Ecoli => "ecoli",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Mmk => "MMK",
            ModelKind::Ecoli => "E. coli",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mmk" => Some(ModelKind::Mmk),
            "ecoli" | "e.coli" | "e_coli" => Some(ModelKind::Ecoli),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Mmk => "MMK",
            ModelKind::Ecoli => "ECOLI",
        })
    }
}

/// Parameter vector of one model, initial conditions included, stored in
/// the canonical order of [`ModelKind::param_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct MechanisticParams {
    kind: ModelKind,
    values: Vec<f64>,
}

impl MechanisticParams {
    pub fn new(kind: ModelKind, values: Vec<f64>) -> Result<Self> {
        let p = Self { kind, values };
        p.validate()?;
        Ok(p)
    }

    pub fn from_map(kind: ModelKind, map: &IndexMap<String, f64>) -> Result<Self> {
        let names = kind.param_names();
        if let Some(extra) = map.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(CoreError::Validation(format!("unknown {kind} parameter `{extra}`")));
        }
        let values = names
            .iter()
            .map(|n| {
                map.get(*n)
                    .copied()
                    .ok_or_else(|| CoreError::Validation(format!("missing {kind} parameter `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kind, values)
    }

    pub fn to_map(&self) -> IndexMap<String, f64> {
        self.names()
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.to_string(), *v))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.kind.param_names();
        if self.values.len() != names.len() {
            return Err(CoreError::Validation(format!(
                "{} expects {} parameters, got {}",
                self.kind,
                names.len(),
                self.values.len()
            )));
        }
        for (n, v) in names.iter().zip(&self.values) {
            let ok = if self.kind.is_initial_condition(n) {
                *v >= 0.0
            } else {
                *v > 0.0
            };
            if !v.is_finite() || !ok {
                return Err(CoreError::Validation(format!(
                    "{} parameter {n} = {v} is invalid",
                    self.kind
                )));
            }
        }
        if self.kind == ModelKind::Ecoli && self.get("DOT0") > DOT_MAX {
            return Err(CoreError::Validation(format!(
                "DOT0 = {} exceeds {DOT_MAX}",
                self.get("DOT0")
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn names(&self) -> &'static [&'static str] {
        self.kind.param_names()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value of a named parameter. Panics on names foreign to the model.
    pub fn get(&self, name: &str) -> f64 {
        let i = self
            .names()
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("{} has no parameter {name}", self.kind));
        self.values[i]
    }

    /// Initial state vector.
    pub fn initial_state(&self) -> Vec<f64> {
        match self.kind {
            ModelKind::Mmk => vec![self.get("S0"), self.get("P0")],
            ModelKind::Ecoli => vec![self.get("X0"), self.get("S0"), self.get("A0"), self.get("DOT0")],
        }
    }
}

impl fmt::Display for MechanisticParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.kind)?;
        for (i, (n, v)) in self.names().iter().zip(&self.values).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{n}={v}")?;
        }
        f.write_str("}")
    }
}

/// Michaelis–Menten substrate-to-product conversion.
#[derive(Clone, Copy, Debug)]
pub struct MmkKinetics {
    pub vmax: f64,
    pub km: f64,
}

impl MmkKinetics {
    pub fn from_params(p: &MechanisticParams) -> Self {
        Self {
            vmax: p.get("Vmax"),
            km: p.get("Km"),
        }
    }

    #[inline]
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let rate = self.vmax * y[0] / (self.km + y[0]);
        dy[0] = -rate;
        dy[1] = rate;
    }
}

/// Derivatives of the substrate/product state `(S, P)`.
pub fn mmk_rhs(state: [f64; 2], params: &MechanisticParams) -> [f64; 2] {
    let mut dy = [0.0; 2];
    MmkKinetics::from_params(params).rhs(&state, &mut dy);
    dy
}

/// Batch overflow-metabolism model on `(X, S, A, DOT)`.
#[derive(Clone, Copy, Debug)]
pub struct EcoliKinetics {
    pub qs_max: f64,
    pub ks: f64,
    pub qs_crit: f64,
    pub kia: f64,
    pub yas: f64,
    pub qa_max: f64,
    pub ka: f64,
    pub kis: f64,
    pub yxs_ox: f64,
    pub yxs_of: f64,
    pub yxa: f64,
    pub yos: f64,
    pub yoa: f64,
    pub kla: f64,
}

impl EcoliKinetics {
    pub fn from_params(p: &MechanisticParams) -> Self {
        Self {
            qs_max: p.get("qs_max"),
            ks: p.get("Ks"),
            qs_crit: p.get("qs_crit"),
            kia: p.get("Kia"),
            yas: p.get("Yas"),
            qa_max: p.get("qa_max"),
            ka: p.get("Ka"),
            kis: p.get("Kis"),
            yxs_ox: p.get("Yxs_ox"),
            yxs_of: p.get("Yxs_of"),
            yxa: p.get("Yxa"),
            yos: p.get("Yos"),
            yoa: p.get("Yoa"),
            kla: p.get("kLa"),
        }
    }

    #[inline]
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        let (x, s, a, dot) = (y[0], y[1], y[2], y[3]);
        let qs = self.qs_max * s / (s + self.ks) / (1.0 + a / self.kia);
        let qs_of = (qs - self.qs_crit).max(0.0);
        let qs_ox = qs - qs_of;
        let qa_c = self.qa_max * a / (a + self.ka) * self.kis / (self.kis + qs);
        let mu = self.yxs_ox * qs_ox + self.yxs_of * qs_of + self.yxa * qa_c;
        dy[0] = mu * x;
        dy[1] = -qs * x;
        dy[2] = (self.yas * qs_of - qa_c) * x;
        dy[3] = self.kla * (DOT_MAX - dot) - TAU_O * (self.yos * qs_ox + self.yoa * qa_c) * x;
    }
}

/// Derivatives of `(X, S, A, DOT)`.
pub fn ecoli_rhs(state: [f64; 4], params: &MechanisticParams) -> [f64; 4] {
    let mut dy = [0.0; 4];
    EcoliKinetics::from_params(params).rhs(&state, &mut dy);
    dy
}

/// Independent uniform prior per parameter. An interval with `lo == hi`
/// pins the parameter to that value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorRepr", into = "PriorRepr")]
pub struct PriorSpec {
    kind: ModelKind,
    bounds: Vec<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRepr {
    kind: ModelKind,
    intervals: IndexMap<String, [f64; 2]>,
}

impl TryFrom<PriorRepr> for PriorSpec {
    type Error = CoreError;

    fn try_from(r: PriorRepr) -> Result<Self> {
        let names = r.kind.param_names();
        if let Some(extra) = r.intervals.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(CoreError::Validation(format!(
                "unknown {} prior parameter `{extra}`",
                r.kind
            )));
        }
        let bounds = names
            .iter()
            .map(|n| {
                r.intervals
                    .get(*n)
                    .map(|b| (b[0], b[1]))
                    .ok_or_else(|| CoreError::Validation(format!("prior is missing `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        PriorSpec::new(r.kind, bounds)
    }
}

impl From<PriorSpec> for PriorRepr {
    fn from(p: PriorSpec) -> Self {
        PriorRepr {
            kind: p.kind,
            intervals: p
                .kind
                .param_names()
                .iter()
                .zip(&p.bounds)
                .map(|(n, (lo, hi))| (n.to_string(), [*lo, *hi]))
                .collect(),
        }
    }
}

impl PriorSpec {
    pub fn new(kind: ModelKind, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let names = kind.param_names();
        if bounds.len() != names.len() {
            return Err(CoreError::Validation(format!(
                "{kind} prior needs {} intervals, got {}",
                names.len(),
                bounds.len()
            )));
        }
        for (n, (lo, hi)) in names.iter().zip(&bounds) {
            let positive = !kind.is_initial_condition(n);
            let lo_ok = if positive { *lo > 0.0 } else { *lo >= 0.0 };
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo_ok) {
                return Err(CoreError::Validation(format!(
                    "invalid prior interval for {n}: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { kind, bounds })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn interval(&self, name: &str) -> Option<(f64, f64)> {
        let i = self.kind.param_names().iter().position(|n| *n == name)?;
        Some(self.bounds[i])
    }

    /// Indices of parameters with a non-degenerate interval.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.bounds.len())
            .filter(|&i| self.bounds[i].0 < self.bounds[i].1)
            .collect()
    }

    /// Default priors for each model.
    pub fn default_for(kind: ModelKind) -> Self {
        let bounds = match kind {
            ModelKind::Mmk => vec![(0.5, 2.0), (0.1, 1.0), (0.5, 2.0), (0.0, 0.0)],
            ModelKind::Ecoli => vec![
                (0.8, 1.6),     // qs_max
                (0.02, 0.1),    // Ks
                (0.5, 1.2),     // qs_crit
                (1.0, 5.0),     // Kia
                (0.3, 0.6),     // Yas
                (0.1, 0.3),     // qa_max
                (0.05, 0.2),    // Ka
                (0.5, 2.0),     // Kis
                (0.45, 0.55),   // Yxs_ox
                (0.1, 0.25),    // Yxs_of
                (0.2, 0.4),     // Yxa
                (0.4, 0.6),     // Yos
                (0.5, 0.8),     // Yoa
                (100.0, 300.0), // kLa
                (0.1, 0.3),     // X0
                (4.0, 8.0),     // S0
                (0.0, 0.0),     // A0
                (100.0, 100.0), // DOT0
            ],
        };
        Self::new(kind, bounds).expect("default prior is valid")
    }
}

/// Draws every parameter independently and uniformly from its interval.
pub fn sample_params<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> MechanisticParams {
    let values = prior
        .bounds
        .iter()
        .map(|&(lo, hi)| {
            let u: f64 = rng.random();
            if lo == hi {
                lo
            } else {
                lo + u * (hi - lo)
            }
        })
        .collect();
    MechanisticParams::new(prior.kind, values).expect("prior samples satisfy parameter invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mmk(vmax: f64, km: f64) -> MechanisticParams {
        MechanisticParams::new(ModelKind::Mmk, vec![vmax, km, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn mmk_half_saturation() {
        let d = mmk_rhs([0.5, 0.1], &mmk(2.0, 0.5));
        assert_eq!(d, [-1.0, 1.0]);
    }

    #[test]
    fn mmk_exhausted_substrate() {
        let d = mmk_rhs([0.0, 1.0], &mmk(1.5, 0.4));
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
    }

    fn ecoli_params() -> MechanisticParams {
        let prior = PriorSpec::default_for(ModelKind::Ecoli);
        let mid: Vec<f64> = prior.bounds().iter().map(|(l, h)| 0.5 * (l + h)).collect();
        MechanisticParams::new(ModelKind::Ecoli, mid).unwrap()
    }

    #[test]
    fn ecoli_no_substrate_only_oxygen_transfer() {
        let p = ecoli_params();
        let d = ecoli_rhs([2.0, 0.0, 0.0, 40.0], &p);
        assert_eq!(&d[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(d[3], p.get("kLa") * 60.0);
    }

    #[test]
    fn ecoli_saturated_without_biomass_is_fixed_point() {
        let d = ecoli_rhs([0.0, 5.0, 0.5, 100.0], &ecoli_params());
        assert_eq!(d[3], 0.0);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn ecoli_below_critical_uptake_consumes_acetate() {
        let p = ecoli_params();
        let k = EcoliKinetics::from_params(&p);
        // tiny glucose keeps qs far below qs_crit
        let y = [1.0, 1e-4, 0.8, 50.0];
        let qs = k.qs_max * y[1] / (y[1] + k.ks) / (1.0 + y[2] / k.kia);
        assert!(qs < k.qs_crit);
        let d = ecoli_rhs(y, &p);
        assert!(d[2] < 0.0);
    }

    #[test]
    fn params_roundtrip_through_map_and_reject_unknown() {
        let p = ecoli_params();
        assert_eq!(MechanisticParams::from_map(ModelKind::Ecoli, &p.to_map()).unwrap(), p);
        let mut m = p.to_map();
        m.insert("bogus".into(), 1.0);
        assert!(MechanisticParams::from_map(ModelKind::Ecoli, &m).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(MechanisticParams::new(ModelKind::Mmk, vec![0.0, 1.0, 1.0, 0.0]).is_err());
        assert!(MechanisticParams::new(ModelKind::Mmk, vec![1.0, 1.0, f64::NAN, 0.0]).is_err());
        assert!(MechanisticParams::new(ModelKind::Mmk, vec![1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn prior_json_roundtrip_and_validation() {
        let p = PriorSpec::default_for(ModelKind::Mmk);
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"Vmax\":[0.5,2.0]"), "{s}");
        assert_eq!(serde_json::from_str::<PriorSpec>(&s).unwrap(), p);
        let bad = s.replace("[0.5,2.0]", "[2.0,0.5]");
        assert!(serde_json::from_str::<PriorSpec>(&bad).is_err());
        assert!(PriorSpec::new(ModelKind::Mmk, vec![(0.0, 1.0), (0.1, 1.0), (0.5, 2.0), (0.0, 0.0)]).is_err());
    }
}
