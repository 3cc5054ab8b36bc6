//! Measurement prescriptions for non-linear models.
//!
//! All prescriptions share one evaluation engine and differ only in how the
//! boundary condition labelling each propagator is assigned and in what
//! order measurements are processed:
//!
//! * **SQM** — couplings scaled to zero, initial state as boundary; plain
//!   linear quantum mechanics, the λ → 0 reference for everything else.
//! * **Preselection** — the initial state at the preparation time labels
//!   every propagator, on every branch.
//! * **Everett** — like preselection but the boundary may be an earlier
//!   "universal" state; with no override it is *identical* to preselection.
//! * **Postselection** — each outcome tuple is conditioned on its own future
//!   boundary, the product of per-factor final outcomes; probabilities are
//!   normalized once at the distribution level.
//! * **Collapse** — sequential global update: after each measurement the
//!   normalized branch state becomes the boundary, instantaneously and
//!   everywhere. Depends on the processing order of spacelike measurements.
//! * **Causal conditional** — each factor's boundary at a given point is
//!   conditioned on exactly the outcomes whose future light cone contains
//!   that point, so the update spreads at the speed of light.

pub mod engine;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dynamics::NonlinearModel;
use crate::hilbert::{Basis, StateVector};
use crate::spacetime::{boosted_time, ConeConvention, Event, Worldline};
use crate::{Error, Result};

/// One projective measurement: where it happens, what it measures.
#[derive(Debug, Clone)]
pub struct MeasurementEvent {
    pub label: String,
    pub event: Event,
    /// Basis of the measured factor, or of the whole system when the
    /// basis's `subsystem` is `None`.
    pub basis: Basis,
}

impl MeasurementEvent {
    pub fn subsystem(&self) -> Option<usize> {
        self.basis.subsystem()
    }

    pub fn outcomes(&self) -> usize {
        self.basis.len()
    }
}

/// A complete experimental arrangement: model, initial data, geometry and
/// measurements.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: NonlinearModel,
    pub initial_state: StateVector,
    /// Spacetime point where the initial state is prepared.
    pub preparation: Event,
    /// One worldline per tensor factor.
    pub worldlines: Vec<Worldline>,
    /// Measurements ordered by lab time.
    pub measurements: Vec<MeasurementEvent>,
    /// Integration step for every propagator solve.
    pub dt: f64,
    pub convention: ConeConvention,
    /// Optional universal boundary `(state, time)` for the Everett
    /// prescription; `None` means the preparation data.
    pub everett: Option<(StateVector, f64)>,
}

impl Scenario {
    /// Checks the internal consistency every prescription relies on:
    /// matching dimensions, normalized initial data, lab-time-ordered
    /// measurements sitting on their factor's worldline, and measurement
    /// times aligned with the integration grid anchored at the preparation.
    pub fn validate(&self) -> Result<()> {
        let dims = self.model.dims();
        if self.worldlines.len() != dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} worldlines for {} tensor factors",
                self.worldlines.len(),
                dims.len()
            )));
        }
        if self.initial_state.dims() != dims {
            return Err(Error::DimensionMismatch(
                "initial state dimensions do not match the model".into(),
            ));
        }
        if !self.initial_state.is_normalized(1e-6) {
            return Err(Error::NotNormalized {
                norm: self.initial_state.norm(),
                tol: 1e-6,
            });
        }
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(Error::Config(format!(
                "integration step must be positive, got {}",
                self.dt
            )));
        }
        let mut prev_t = f64::NEG_INFINITY;
        for m in &self.measurements {
            if m.event.t < prev_t - 1e-12 {
                return Err(Error::Config(
                    "measurements must be listed in lab-time order".into(),
                ));
            }
            prev_t = m.event.t;
            if m.event.t < self.preparation.t - 1e-12 {
                return Err(Error::Acausal(format!(
                    "measurement '{}' at t = {} precedes the preparation at t = {}",
                    m.label, m.event.t, self.preparation.t
                )));
            }
            let steps = (m.event.t - self.preparation.t) / self.dt;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "measurement '{}' at t = {} is not aligned with the integration grid",
                    m.label, m.event.t
                )));
            }
            match m.basis.subsystem() {
                Some(j) => {
                    if j >= dims.len() {
                        return Err(Error::IndexOutOfRange(format!(
                            "measurement '{}' targets factor {j} of {}",
                            m.label,
                            dims.len()
                        )));
                    }
                    if m.basis.dim() != dims[j] {
                        return Err(Error::DimensionMismatch(format!(
                            "measurement '{}' basis dimension {} does not match factor {j}",
                            m.label,
                            m.basis.dim()
                        )));
                    }
                    let on_track = self.worldlines[j].position(m.event.t);
                    if (m.event.x - on_track).abs() > 1e-9 {
                        return Err(Error::Config(format!(
                            "measurement '{}' at x = {} is off factor {j}'s worldline (x = {on_track})",
                            m.label, m.event.x
                        )));
                    }
                }
                None => {
                    if m.basis.dim() != self.model.total_dim() {
                        return Err(Error::DimensionMismatch(format!(
                            "whole-system measurement '{}' basis dimension {} does not match the model",
                            m.label,
                            m.basis.dim()
                        )));
                    }
                    for (j, w) in self.worldlines.iter().enumerate() {
                        if (m.event.x - w.position(m.event.t)).abs() > 1e-9 {
                            return Err(Error::Config(format!(
                                "whole-system measurement '{}' is off factor {j}'s worldline",
                                m.label
                            )));
                        }
                    }
                }
            }
        }
        if let Some((state, t)) = &self.everett {
            if state.dims() != dims {
                return Err(Error::DimensionMismatch(
                    "universal boundary dimensions do not match the model".into(),
                ));
            }
            if !state.is_normalized(1e-6) {
                return Err(Error::NotNormalized {
                    norm: state.norm(),
                    tol: 1e-6,
                });
            }
            if *t > self.preparation.t + 1e-12 {
                return Err(Error::Acausal(
                    "universal boundary must not follow the preparation".into(),
                ));
            }
            let steps = (self.preparation.t - t) / self.dt;
            if (steps - steps.round()).abs() > 1e-6 {
                return Err(Error::Config(
                    "universal boundary time is not aligned with the integration grid".into(),
                ));
            }
        }
        Ok(())
    }

    /// Lab time of the last measurement (preparation time when there is
    /// none).
    pub fn final_time(&self) -> f64 {
        self.measurements
            .last()
            .map_or(self.preparation.t, |m| m.event.t)
    }

    /// Measurement indices in the requested processing order. Lab order is
    /// the listed order; a boosted order sorts by the measurement times seen
    /// from a frame with the given rapidity, ties resolved by lab order.
    pub fn processing_order(&self, order: ProcessingOrder) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.measurements.len()).collect();
        if let ProcessingOrder::Boosted(rapidity) = order {
            idx.sort_by(|&a, &b| {
                let ta = boosted_time(&self.measurements[a].event, rapidity);
                let tb = boosted_time(&self.measurements[b].event, rapidity);
                ta.partial_cmp(&tb).unwrap().then(a.cmp(&b))
            });
        }
        idx
    }
}

/// The available measurement prescriptions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prescription {
    Sqm,
    Preselection,
    Everett,
    Postselection,
    Collapse,
    CausalConditional,
}

impl Prescription {
    pub const ALL: [Prescription; 6] = [
        Prescription::Sqm,
        Prescription::Preselection,
        Prescription::Everett,
        Prescription::Postselection,
        Prescription::Collapse,
        Prescription::CausalConditional,
    ];
}

impl fmt::Display for Prescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Prescription::Sqm => "sqm",
            Prescription::Preselection => "preselection",
            Prescription::Everett => "everett",
            Prescription::Postselection => "postselection",
            Prescription::Collapse => "collapse",
            Prescription::CausalConditional => "causal",
        };
        write!(f, "{name}")
    }
}

impl FromStr for Prescription {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqm" => Ok(Prescription::Sqm),
            "preselection" => Ok(Prescription::Preselection),
            "everett" => Ok(Prescription::Everett),
            "postselection" => Ok(Prescription::Postselection),
            "collapse" => Ok(Prescription::Collapse),
            "causal" | "causal-conditional" => Ok(Prescription::CausalConditional),
            other => Err(Error::Config(format!("unknown prescription '{other}'"))),
        }
    }
}

/// Order in which the engine walks the measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessingOrder {
    /// Lab-frame time order (the listed order).
    Lab,
    /// Time order in a frame boosted with the given rapidity.
    Boosted(f64),
}

/// Joint probabilities over outcome tuples, indexed by outcome per
/// measurement in listed order. Complete: every tuple appears, including
/// zero-probability ones.
#[derive(Debug, Clone)]
pub struct OutcomeDistribution {
    labels: Vec<String>,
    outcome_counts: Vec<usize>,
    probs: BTreeMap<Vec<usize>, f64>,
    normalizer: f64,
}

impl OutcomeDistribution {
    fn assemble(
        labels: Vec<String>,
        outcome_counts: Vec<usize>,
        raw: BTreeMap<Vec<usize>, f64>,
        normalizer: f64,
    ) -> Self {
        let probs = raw
            .into_iter()
            .map(|(k, p)| (k, (p / normalizer).max(0.0)))
            .collect();
        Self {
            labels,
            outcome_counts,
            probs,
            normalizer,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn outcome_counts(&self) -> &[usize] {
        &self.outcome_counts
    }

    /// The weight the raw branch amplitudes summed to before the final
    /// division (1 except for postselection).
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn prob(&self, tuple: &[usize]) -> f64 {
        self.probs.get(tuple).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, f64)> {
        self.probs.iter().map(|(k, &p)| (k, p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Marginal distribution over the given measurement indices (in the
    /// given order).
    pub fn marginal(&self, keep: &[usize]) -> Result<BTreeMap<Vec<usize>, f64>> {
        for &k in keep {
            if k >= self.outcome_counts.len() {
                return Err(Error::IndexOutOfRange(format!(
                    "marginal over measurement {k} of {}",
                    self.outcome_counts.len()
                )));
            }
        }
        let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for (tuple, p) in &self.probs {
            let key: Vec<usize> = keep.iter().map(|&k| tuple[k]).collect();
            *out.entry(key).or_insert(0.0) += p;
        }
        Ok(out)
    }

    /// Total variation distance `½ Σ |p − q|`; distributions must share the
    /// same outcome structure.
    pub fn total_variation(&self, other: &OutcomeDistribution) -> Result<f64> {
        if self.outcome_counts != other.outcome_counts {
            return Err(Error::DimensionMismatch(
                "total variation requires matching outcome structures".into(),
            ));
        }
        let mut sum = 0.0;
        for (tuple, p) in &self.probs {
            sum += (p - other.prob(tuple)).abs();
        }
        Ok(0.5 * sum)
    }
}

/// A conditioned boundary state: the (unnormalized) chain state induced by
/// the given outcomes, its anchor time, and which measurements condition it.
#[derive(Debug, Clone)]
pub struct ConditionalState {
    pub state: StateVector,
    pub anchor: f64,
    pub conditioned_on: Vec<usize>,
}

/// Outcome distribution under the given prescription, lab processing order.
pub fn distribution(scenario: &Scenario, prescription: Prescription) -> Result<OutcomeDistribution> {
    distribution_with_order(scenario, prescription, ProcessingOrder::Lab)
}

/// Outcome distribution with an explicit processing order.
pub fn distribution_with_order(
    scenario: &Scenario,
    prescription: Prescription,
    order: ProcessingOrder,
) -> Result<OutcomeDistribution> {
    engine::run(scenario, prescription, order)
}

pub fn sqm_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::Sqm)
}

pub fn preselection_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::Preselection)
}

pub fn everett_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::Everett)
}

pub fn postselection_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::Postselection)
}

pub fn collapse_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::Collapse)
}

pub fn causal_conditional_distribution(scenario: &Scenario) -> Result<OutcomeDistribution> {
    distribution(scenario, Prescription::CausalConditional)
}

/// The boundary state a prescription assigns at `(subsystem, t)` given the
/// listed `(measurement, outcome)` pairs. For conditioned prescriptions the
/// pairs must cover every measurement the boundary depends on; pairs the
/// boundary does not depend on are ignored.
pub fn conditional_state(
    scenario: &Scenario,
    prescription: Prescription,
    given: &[(usize, usize)],
    subsystem: usize,
    t: f64,
) -> Result<ConditionalState> {
    engine::conditional_state(scenario, prescription, given, subsystem, t)
}
