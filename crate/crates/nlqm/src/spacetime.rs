//! 1+1-dimensional event geometry with `c = 1`.
//!
//! Squared intervals use the `(+,−)` signature, `Δs² = Δt² − Δx²`, so
//! timelike separations are positive. The light-cone boundary is counted as
//! *inside* the cone by default (`θ(0) = 1`); the convention is explicit in
//! every membership query so configurations can flip it.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A point in 1+1-dimensional spacetime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub x: f64,
}

impl Event {
    pub fn new(t: f64, x: f64) -> Self {
        Self { t, x }
    }
}

/// Causal character of an event pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CausalRelation {
    Timelike,
    Spacelike,
    Lightlike,
}

/// Whether the light-cone boundary itself counts as inside the cone.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeConvention {
    /// `θ(0) = 1`: lightlike separation is inside the cone (default).
    #[default]
    InclusiveBoundary,
    /// `θ(0) = 0`: only strictly timelike separation is inside.
    ExclusiveBoundary,
}

/// `Δs² = (Δt)² − (Δx)²` between two events.
pub fn interval_squared(a: &Event, b: &Event) -> f64 {
    let dt = b.t - a.t;
    let dx = b.x - a.x;
    dt * dt - dx * dx
}

/// True when `probe` lies in the future light cone of `source`.
pub fn in_future_cone(source: &Event, probe: &Event, convention: ConeConvention) -> bool {
    if probe.t < source.t {
        return false;
    }
    let s2 = interval_squared(source, probe);
    match convention {
        ConeConvention::InclusiveBoundary => s2 >= 0.0,
        ConeConvention::ExclusiveBoundary => s2 > 0.0 && probe.t > source.t,
    }
}

/// Classifies the separation of an (unordered) event pair.
pub fn classify(a: &Event, b: &Event) -> CausalRelation {
    let s2 = interval_squared(a, b);
    if s2 > 0.0 {
        CausalRelation::Timelike
    } else if s2 < 0.0 {
        CausalRelation::Spacelike
    } else {
        CausalRelation::Lightlike
    }
}

/// Coordinate time of an event in the frame boosted by `rapidity`.
pub fn boosted_time(event: &Event, rapidity: f64) -> f64 {
    event.t * rapidity.cosh() - event.x * rapidity.sinh()
}

/// Coordinates of an event in the frame boosted by `rapidity`.
pub fn boost(event: &Event, rapidity: f64) -> Event {
    let ch = rapidity.cosh();
    let sh = rapidity.sinh();
    Event {
        t: event.t * ch - event.x * sh,
        x: -event.t * sh + event.x * ch,
    }
}

/// Boosts a list of events; errors when the boost velocity is not
/// sub-luminal (`|tanh(rapidity)| < 1` always holds for finite rapidity, so
/// the check guards against non-finite input).
pub fn boost_reorder(events: &[Event], rapidity: f64) -> Result<Vec<Event>> {
    if !rapidity.is_finite() {
        return Err(Error::Config(format!(
            "boost rapidity must be finite, got {rapidity}"
        )));
    }
    Ok(events.iter().map(|e| boost(e, rapidity)).collect())
}

/// A piecewise-linear worldline through waypoints `(t, x)`, constant before
/// the first and after the last waypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worldline {
    waypoints: Vec<Event>,
}

impl Worldline {
    /// Builds a worldline; waypoints must be strictly time-ordered and every
    /// leg must be sub-luminal or luminal (`|Δx/Δt| ≤ 1`, small slack for
    /// rounding).
    pub fn new(waypoints: Vec<Event>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Config("worldline needs at least one waypoint".into()));
        }
        for pair in waypoints.windows(2) {
            let dt = pair[1].t - pair[0].t;
            let dx = (pair[1].x - pair[0].x).abs();
            if dt <= 0.0 {
                return Err(Error::Config(
                    "worldline waypoints must be strictly time-ordered".into(),
                ));
            }
            if dx > dt * (1.0 + 1e-12) {
                return Err(Error::Acausal(format!(
                    "worldline leg from ({}, {}) to ({}, {}) is superluminal",
                    pair[0].t, pair[0].x, pair[1].t, pair[1].x
                )));
            }
        }
        Ok(Self { waypoints })
    }

    /// Constant worldline pinned at position `x`.
    pub fn static_at(x: f64) -> Self {
        Self {
            waypoints: vec![Event::new(0.0, x)],
        }
    }

    pub fn waypoints(&self) -> &[Event] {
        &self.waypoints
    }

    /// Position at coordinate time `t` (clamped interpolation).
    pub fn position(&self, t: f64) -> f64 {
        let first = &self.waypoints[0];
        if t <= first.t {
            return first.x;
        }
        for pair in self.waypoints.windows(2) {
            if t <= pair[1].t {
                let f = (t - pair[0].t) / (pair[1].t - pair[0].t);
                return pair[0].x + f * (pair[1].x - pair[0].x);
            }
        }
        self.waypoints.last().unwrap().x
    }

    /// The worldline point at time `t` as an event.
    pub fn event_at(&self, t: f64) -> Event {
        Event::new(t, self.position(t))
    }
}
