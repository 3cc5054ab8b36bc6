//! Declarative scenario files: a TOML schema for models, states, worldlines
//! and measurement events, with strict validation and canonical
//! serialization.
//!
//! The schema stays deliberately small — named states, named single-factor
//! operators, rotation or explicit-vector bases — because every bundled
//! study fits in it and unknown fields are rejected rather than ignored.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dynamics::{NonlinearKind, NonlinearModel, NonlinearTerm};
use crate::hilbert::{
    bell_state, c, embed, sigma_x, sigma_y, sigma_z, Basis, LinearOperator, StateVector, C64,
};
use crate::prescriptions::{MeasurementEvent, Scenario};
use crate::spacetime::{in_future_cone, ConeConvention, Event, Worldline};
use crate::{Error, Result};

/// Normalization slips beyond this are surfaced as warnings when loading
/// amplitude lists.
pub const NORMALIZATION_WARN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// Integrator step; event times must sit on the step grid.
    pub dt: f64,
    /// 1 counts the light-cone boundary as inside (default), 0 does not.
    #[serde(default = "default_theta0")]
    pub lightcone_theta0: u8,
    pub preparation: EventSpec,
    pub initial_state: StateSpec,
    pub model: ModelSpec,
    pub worldlines: Vec<WorldlineSpec>,
    #[serde(default)]
    pub events: Vec<MeasurementSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub everett: Option<EverettSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSpec>,
}

fn default_theta0() -> u8 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub t: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSpec {
    /// `(|00⟩ + |11⟩)/√2`; requires two qubit factors.
    Bell,
    /// `(|0…0⟩ + |1…1⟩)/√2` over all qubit factors.
    Ghz,
    /// One named ket per factor: `"up"`, `"down"`, `"plus"`, `"minus"`, or
    /// a level index.
    Product { kets: Vec<String> },
    /// Explicit amplitudes over the joint space; normalized on load with a
    /// warning when the correction exceeds [`NORMALIZATION_WARN`].
    Amplitudes {
        re: Vec<f64>,
        #[serde(default)]
        im: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    /// Linear per-factor Hamiltonian pieces, summed per factor.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub h: Vec<HSpec>,
    /// Two-factor product terms, summed into one joint interaction.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interaction: Vec<InteractionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nonlinear: Vec<NonlinearSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HSpec {
    pub subsystem: usize,
    pub operator: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    pub subsystems: [usize; 2],
    pub left: String,
    pub right: String,
    pub strength: f64,
}

// No deny_unknown_fields here: it cannot coexist with the flattened kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSpec {
    pub subsystem: usize,
    pub lambda: f64,
    #[serde(flatten)]
    pub kind: NonlinearKindSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearKindSpec {
    /// `V = λ⟨Ô⟩M̂` with named factor-local operators.
    ExpectationFeedback { observable: String, response: String },
    /// `V = λ·diag(wₖ·pₖ)` over the factor's levels.
    OnsiteCubic { weights: Vec<f64> },
    /// Softened self-gravity on the factor's level grid.
    SelfGravity {
        mass: f64,
        softening: f64,
        positions: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldlineSpec {
    /// A detector at rest.
    Static { x: f64 },
    /// Piecewise-linear waypoints `[t, x]`, clamped outside their span.
    Path { waypoints: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub label: String,
    pub t: f64,
    pub x: f64,
    /// Absent for a whole-system measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsystem: Option<usize>,
    pub basis: BasisSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisSpec {
    /// `"z"` (level basis, any dimension) or `"x"` (equatorial, qubits).
    Named { named: String },
    /// Qubit basis `{cos θ|0⟩ + e^{iφ} sin θ|1⟩, …}`; `phase` defaults to 0.
    Angle {
        angle: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase: Option<f64>,
    },
    /// Basis whose first vector is the given state, completed
    /// deterministically.
    Vector {
        re: Vec<f64>,
        #[serde(default)]
        im: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EverettSpec {
    /// Anchor time of the universal boundary; must not postdate the
    /// preparation.
    pub t: f64,
    pub re: Vec<f64>,
    #[serde(default)]
    pub im: Vec<f64>,
}

/// Spatial lattice geometry for region maps; independent of the integrator
/// step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub sites: usize,
    pub origin: f64,
    pub spacing: f64,
    pub bins: usize,
    pub bin_dt: f64,
}

impl LatticeSpec {
    pub fn site_positions(&self) -> Vec<f64> {
        (0..self.sites)
            .map(|k| self.origin + k as f64 * self.spacing)
            .collect()
    }
}

/// A parsed and validated scenario, keeping the declarative form for
/// canonical re-serialization.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub file: ScenarioFile,
    pub warnings: Vec<String>,
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<LoadedScenario> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let mut warnings = Vec::new();
    let scenario = file.to_scenario(&mut warnings)?;
    scenario.validate()?;
    check_preparation_cone(&scenario)?;
    Ok(LoadedScenario {
        scenario,
        file,
        warnings,
    })
}

/// Canonical text form: serializing the same file twice is byte-identical,
/// and parsing the output reproduces the scenario exactly.
pub fn canonical_toml(file: &ScenarioFile) -> Result<String> {
    toml::to_string(file).map_err(|e| Error::Schema(e.to_string()))
}

/// Stricter than the engine's time-order check: the preparation must be
/// able to influence every measurement under the scenario's convention.
/// Re-run after overriding the cone convention.
pub fn check_preparation_cone(scenario: &Scenario) -> Result<()> {
    for m in &scenario.measurements {
        if !in_future_cone(&scenario.preparation, &m.event, scenario.convention) {
            return Err(Error::Acausal(format!(
                "measurement '{}' at (t={}, x={}) lies outside the future light cone of the \
                 preparation at (t={}, x={})",
                m.label, m.event.t, m.event.x, scenario.preparation.t, scenario.preparation.x
            )));
        }
    }
    Ok(())
}

impl ScenarioFile {
    pub fn to_scenario(&self, warnings: &mut Vec<String>) -> Result<Scenario> {
        let dims = &self.model.dims;
        if dims.is_empty() {
            return Err(Error::Schema("model.dims must not be empty".into()));
        }
        let convention = match self.lightcone_theta0 {
            1 => ConeConvention::InclusiveBoundary,
            0 => ConeConvention::ExclusiveBoundary,
            other => {
                return Err(Error::Schema(format!(
                    "lightcone_theta0 must be 0 or 1, got {other}"
                )));
            }
        };
        let model = self.model.build()?;
        let initial_state = self.initial_state.build(dims, "initial_state", warnings)?;
        if self.worldlines.len() != dims.len() {
            return Err(Error::Schema(format!(
                "{} worldlines for {} factors",
                self.worldlines.len(),
                dims.len()
            )));
        }
        let worldlines = self
            .worldlines
            .iter()
            .map(WorldlineSpec::build)
            .collect::<Result<Vec<_>>>()?;
        let measurements = self
            .events
            .iter()
            .map(|m| m.build(dims, warnings))
            .collect::<Result<Vec<_>>>()?;
        let everett = match &self.everett {
            Some(spec) => {
                let state = amplitudes_to_state(
                    dims,
                    &spec.re,
                    &spec.im,
                    "everett boundary",
                    warnings,
                )?;
                Some((state, spec.t))
            }
            None => None,
        };
        Ok(Scenario {
            model,
            initial_state,
            preparation: Event::new(self.preparation.t, self.preparation.x),
            worldlines,
            measurements,
            dt: self.dt,
            convention,
            everett,
        })
    }
}

impl ModelSpec {
    fn build(&self) -> Result<NonlinearModel> {
        let mut model = NonlinearModel::new(self.dims.clone())?;
        let mut factor_h: BTreeMap<usize, LinearOperator> = BTreeMap::new();
        for spec in &self.h {
            let f = spec.subsystem;
            if f >= self.dims.len() {
                return Err(Error::Schema(format!(
                    "h entry targets factor {f}, but the model has {} factors",
                    self.dims.len()
                )));
            }
            let op = named_operator(&spec.operator, self.dims[f])?
                .scale(c(spec.strength, 0.0));
            let entry = match factor_h.remove(&f) {
                Some(acc) => acc.add(&op)?,
                None => op,
            };
            factor_h.insert(f, entry);
        }
        for (f, h) in factor_h {
            model = model.with_factor_h(f, h)?;
        }
        if !self.interaction.is_empty() {
            let mut joint = LinearOperator::zero(self.dims.clone())?;
            for spec in &self.interaction {
                let [a, b] = spec.subsystems;
                if a == b {
                    return Err(Error::Schema(
                        "interaction subsystems must differ".into(),
                    ));
                }
                for f in [a, b] {
                    if f >= self.dims.len() {
                        return Err(Error::Schema(format!(
                            "interaction targets factor {f}, but the model has {} factors",
                            self.dims.len()
                        )));
                    }
                }
                let left = embed(&named_operator(&spec.left, self.dims[a])?, a, &self.dims)?;
                let right = embed(&named_operator(&spec.right, self.dims[b])?, b, &self.dims)?;
                joint = joint.add(&left.compose(&right)?.scale(c(spec.strength, 0.0)))?;
            }
            model = model.with_interaction(joint)?;
        }
        for spec in &self.nonlinear {
            let f = spec.subsystem;
            if f >= self.dims.len() {
                return Err(Error::Schema(format!(
                    "nonlinear term targets factor {f}, but the model has {} factors",
                    self.dims.len()
                )));
            }
            let dim = self.dims[f];
            let kind = match &spec.kind {
                NonlinearKindSpec::ExpectationFeedback {
                    observable,
                    response,
                } => NonlinearKind::WeinbergExpectation {
                    observable: named_operator(observable, dim)?,
                    response: named_operator(response, dim)?,
                },
                NonlinearKindSpec::OnsiteCubic { weights } => {
                    NonlinearKind::OnSiteCubic {
                        weights: weights.clone(),
                    }
                }
                NonlinearKindSpec::SelfGravity {
                    mass,
                    softening,
                    positions,
                } => NonlinearKind::SchroedingerNewton1D {
                    mass: *mass,
                    softening: *softening,
                    positions: positions.clone(),
                },
            };
            model = model.with_term(NonlinearTerm {
                subsystem: f,
                lambda: spec.lambda,
                kind,
            })?;
        }
        Ok(model)
    }
}

/// Factor-local operators addressable by name in scenario files.
pub fn named_operator(name: &str, dim: usize) -> Result<LinearOperator> {
    match name {
        "sx" | "sy" | "sz" => {
            if dim != 2 {
                return Err(Error::Schema(format!(
                    "operator '{name}' needs a two-level factor, got dimension {dim}"
                )));
            }
            Ok(match name {
                "sx" => sigma_x(),
                "sy" => sigma_y(),
                _ => sigma_z(),
            })
        }
        // Level number: diag(0, 1, …, d−1).
        "n" => {
            let mut m = ndarray::Array2::<C64>::zeros((dim, dim));
            for k in 0..dim {
                m[(k, k)] = c(k as f64, 0.0);
            }
            LinearOperator::new(vec![dim], m)
        }
        // Open-chain hopping: Σ |k⟩⟨k+1| + |k+1⟩⟨k|.
        "hopping" => {
            let mut m = ndarray::Array2::<C64>::zeros((dim, dim));
            for k in 0..dim.saturating_sub(1) {
                m[(k, k + 1)] = c(1.0, 0.0);
                m[(k + 1, k)] = c(1.0, 0.0);
            }
            LinearOperator::new(vec![dim], m)
        }
        other => Err(Error::Schema(format!(
            "unknown operator '{other}'; expected sx, sy, sz, n, or hopping"
        ))),
    }
}

impl StateSpec {
    fn build(
        &self,
        dims: &[usize],
        what: &str,
        warnings: &mut Vec<String>,
    ) -> Result<StateVector> {
        match self {
            StateSpec::Bell => {
                if dims != [2, 2] {
                    return Err(Error::Schema(format!(
                        "{what}: the bell state needs dims = [2, 2], got {dims:?}"
                    )));
                }
                Ok(bell_state())
            }
            StateSpec::Ghz => {
                if dims.len() < 2 || dims.iter().any(|&d| d != 2) {
                    return Err(Error::Schema(format!(
                        "{what}: the ghz state needs at least two qubit factors, got {dims:?}"
                    )));
                }
                let total: usize = dims.iter().product();
                let mut amps = Array1::<C64>::zeros(total);
                let w = c(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                amps[0] = w;
                amps[total - 1] = w;
                StateVector::new(dims.to_vec(), amps)
            }
            StateSpec::Product { kets } => {
                if kets.len() != dims.len() {
                    return Err(Error::Schema(format!(
                        "{what}: {} kets for {} factors",
                        kets.len(),
                        dims.len()
                    )));
                }
                let mut factors = Vec::with_capacity(dims.len());
                for (ket, &dim) in kets.iter().zip(dims) {
                    factors.push(named_ket(ket, dim)?);
                }
                let refs: Vec<&StateVector> = factors.iter().collect();
                crate::hilbert::tensor_states(&refs)
            }
            StateSpec::Amplitudes { re, im } => {
                amplitudes_to_state(dims, re, im, what, warnings)
            }
        }
    }
}

fn named_ket(name: &str, dim: usize) -> Result<StateVector> {
    let w = std::f64::consts::FRAC_1_SQRT_2;
    match name {
        "up" => StateVector::basis_state(vec![dim], 0),
        "down" | "plus" | "minus" if dim != 2 => Err(Error::Schema(format!(
            "ket '{name}' needs a two-level factor, got dimension {dim}"
        ))),
        "down" => StateVector::basis_state(vec![dim], 1),
        "plus" => StateVector::new(vec![2], ndarray::arr1(&[c(w, 0.0), c(w, 0.0)])),
        "minus" => StateVector::new(vec![2], ndarray::arr1(&[c(w, 0.0), c(-w, 0.0)])),
        other => match other.parse::<usize>() {
            Ok(level) if level < dim => StateVector::basis_state(vec![dim], level),
            Ok(level) => Err(Error::Schema(format!(
                "ket level {level} out of range for dimension {dim}"
            ))),
            Err(_) => Err(Error::Schema(format!(
                "unknown ket '{other}'; expected up, down, plus, minus, or a level index"
            ))),
        },
    }
}

fn amplitudes_to_state(
    dims: &[usize],
    re: &[f64],
    im: &[f64],
    what: &str,
    warnings: &mut Vec<String>,
) -> Result<StateVector> {
    let total: usize = dims.iter().product();
    if re.len() != total || (!im.is_empty() && im.len() != total) {
        return Err(Error::Schema(format!(
            "{what}: {} real / {} imaginary amplitudes for total dimension {total}",
            re.len(),
            im.len()
        )));
    }
    let amps: Array1<C64> = (0..total)
        .map(|k| c(re[k], im.get(k).copied().unwrap_or(0.0)))
        .collect();
    let raw = StateVector::new(dims.to_vec(), amps)?;
    let norm = raw.norm();
    if norm < 1e-12 {
        return Err(Error::Schema(format!(
            "{what}: amplitudes are numerically zero and cannot be normalized"
        )));
    }
    if (norm - 1.0).abs() > NORMALIZATION_WARN {
        warnings.push(format!(
            "{what}: amplitudes had norm {norm:.9}; normalized on load"
        ));
    }
    raw.unit()
}

impl WorldlineSpec {
    fn build(&self) -> Result<Worldline> {
        match self {
            WorldlineSpec::Static { x } => Ok(Worldline::static_at(*x)),
            WorldlineSpec::Path { waypoints } => Worldline::new(
                waypoints
                    .iter()
                    .map(|&(t, x)| Event::new(t, x))
                    .collect(),
            ),
        }
    }
}

impl MeasurementSpec {
    fn build(&self, dims: &[usize], warnings: &mut Vec<String>) -> Result<MeasurementEvent> {
        if let Some(f) = self.subsystem {
            if f >= dims.len() {
                return Err(Error::Schema(format!(
                    "measurement '{}' targets factor {f}, but the model has {} factors",
                    self.label,
                    dims.len()
                )));
            }
        }
        let dim = match self.subsystem {
            Some(f) => dims[f],
            None => dims.iter().product(),
        };
        let basis = match &self.basis {
            BasisSpec::Named { named } => match named.as_str() {
                "z" => Basis::computational(self.subsystem, dim),
                "x" => {
                    if dim != 2 {
                        return Err(Error::Schema(format!(
                            "measurement '{}': the x basis needs a two-level space, got \
                             dimension {dim}",
                            self.label
                        )));
                    }
                    Basis::rotation(self.subsystem, std::f64::consts::FRAC_PI_4)
                }
                other => {
                    return Err(Error::Schema(format!(
                        "measurement '{}': unknown basis '{other}'; expected z or x",
                        self.label
                    )));
                }
            },
            BasisSpec::Angle { angle, phase } => {
                if dim != 2 {
                    return Err(Error::Schema(format!(
                        "measurement '{}': angle bases need a two-level space, got \
                         dimension {dim}",
                        self.label
                    )));
                }
                let p = phase.unwrap_or(0.0);
                if p == 0.0 {
                    Basis::rotation(self.subsystem, *angle)
                } else {
                    let v = ndarray::arr1(&[
                        c(angle.cos(), 0.0),
                        c(p.cos(), p.sin()) * angle.sin(),
                    ]);
                    Basis::from_state(self.subsystem, &v)?
                }
            }
            BasisSpec::Vector { re, im } => {
                if re.len() != dim || (!im.is_empty() && im.len() != dim) {
                    return Err(Error::Schema(format!(
                        "measurement '{}': {} real / {} imaginary amplitudes for \
                         dimension {dim}",
                        self.label,
                        re.len(),
                        im.len()
                    )));
                }
                let state =
                    amplitudes_to_state(&[dim], re, im, &format!("basis of '{}'", self.label), warnings)?;
                Basis::from_state(self.subsystem, state.amps())?
            }
        };
        Ok(MeasurementEvent {
            label: self.label.clone(),
            event: Event::new(self.t, self.x),
            basis,
        })
    }
}
