//! The shared evaluation engine behind every prescription.
//!
//! A run walks the measurements in processing order, maintaining an
//! unnormalized branch state on the full space. Between measurements the
//! state is propagated with a unitary whose label — the boundary condition
//! driving the non-linear potential — is the only thing the prescriptions
//! disagree about:
//!
//! * fixed rules label every window with one constant boundary;
//! * collapse labels each window with the normalized running branch state;
//! * causal conditioning labels each factor's window with the chain state of
//!   exactly the outcomes whose light cone has reached that factor, splitting
//!   windows where that set changes;
//! * postselection labels every window of a tuple's chain with the tuple's
//!   own final product boundary.
//!
//! Branch probability is the squared norm of the fully projected state;
//! branches whose norm vanishes are dead: probability zero, no boundary
//! downstream. Propagators and conditioned chain states are cached by their
//! labels, so shared structure across branches is solved once.

use std::collections::BTreeMap;

use crate::dynamics::{boundary_propagator, factor_boundary_propagator, BoundaryPropagator};
use crate::dynamics::NonlinearModel;
use crate::hilbert::{projector, tensor_ops, tensor_states, LinearOperator, StateVector};
use crate::lattice::{ArrivalTable, TimeGrid, DEAD_BRANCH_NORM};
use crate::prescriptions::{
    ConditionalState, OutcomeDistribution, Prescription, ProcessingOrder, Scenario,
};
use crate::{Error, Result};

/// Conditioning content: `(measurement index, outcome)` pairs sorted by
/// measurement index (lab order, since measurements are listed by lab time).
type CondKey = Vec<(usize, usize)>;

/// What labels a cached propagator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum CondDesc {
    /// The run's one fixed boundary.
    Fixed,
    /// The conditioned chain state of these outcomes.
    Chain(CondKey),
    /// The final product boundary keyed by the covering outcomes.
    Post(CondKey),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct PropKey {
    cond: CondDesc,
    /// `None` for a joint propagator, `Some(j)` for factor `j`'s.
    factor: Option<usize>,
    from: u64,
    to: u64,
}

/// A conditioned chain state: unnormalized, anchored at the lab time of its
/// last conditioning measurement.
#[derive(Debug, Clone)]
struct Chain {
    state: StateVector,
    anchor: f64,
    dead: bool,
}

enum Rule {
    Fixed { state: StateVector, anchor: f64 },
    Collapse,
    Causal,
    Post,
}

struct Engine<'a> {
    scenario: &'a Scenario,
    model: NonlinearModel,
    order: Vec<usize>,
    rule: Rule,
    /// `projs[measurement][outcome]`, embedded in the full space.
    projs: Vec<Vec<LinearOperator>>,
    /// Outcome-broadcast arrivals on the factor worldlines (causal rule).
    arrivals: Option<ArrivalTable>,
    props: BTreeMap<PropKey, BoundaryPropagator>,
    chains: BTreeMap<CondKey, Chain>,
}

pub fn run(
    scenario: &Scenario,
    prescription: Prescription,
    order: ProcessingOrder,
) -> Result<OutcomeDistribution> {
    scenario.validate()?;
    let labels: Vec<String> = scenario.measurements.iter().map(|m| m.label.clone()).collect();
    let counts: Vec<usize> = scenario.measurements.iter().map(|m| m.outcomes()).collect();
    let mut raw: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let normalizer = if scenario.measurements.is_empty() {
        raw.insert(Vec::new(), 1.0);
        1.0
    } else {
        let mut eng = Engine::new(scenario, prescription, order, scenario.final_time())?;
        if prescription == Prescription::Postselection {
            eng.postselected(&mut raw)?
        } else {
            let chi0 = scenario.initial_state.unit()?;
            let mut prefix = Vec::new();
            eng.walk(0, chi0, scenario.preparation.t, &mut prefix, &mut raw)?;
            1.0
        }
    };
    Ok(OutcomeDistribution::assemble(labels, counts, raw, normalizer))
}

impl<'a> Engine<'a> {
    fn new(
        scenario: &'a Scenario,
        prescription: Prescription,
        order: ProcessingOrder,
        horizon: f64,
    ) -> Result<Self> {
        let model = if prescription == Prescription::Sqm {
            scenario.model.with_lambda_scale(0.0)
        } else {
            scenario.model.clone()
        };
        let rule = match prescription {
            Prescription::Sqm | Prescription::Preselection => Rule::Fixed {
                state: scenario.initial_state.unit()?,
                anchor: scenario.preparation.t,
            },
            Prescription::Everett => match &scenario.everett {
                Some((state, t)) => Rule::Fixed {
                    state: state.unit()?,
                    anchor: *t,
                },
                None => Rule::Fixed {
                    state: scenario.initial_state.unit()?,
                    anchor: scenario.preparation.t,
                },
            },
            Prescription::Postselection => Rule::Post,
            Prescription::Collapse => Rule::Collapse,
            Prescription::CausalConditional => Rule::Causal,
        };
        let projs: Vec<Vec<LinearOperator>> = scenario
            .measurements
            .iter()
            .map(|m| {
                (0..m.outcomes())
                    .map(|o| projector(&m.basis, o, model.dims()))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let arrivals = if matches!(rule, Rule::Causal) {
            let grid = TimeGrid::covering(
                scenario.preparation.t,
                horizon.max(scenario.preparation.t),
                scenario.dt,
            )?;
            let locations: Vec<_> = scenario.measurements.iter().map(|m| m.event).collect();
            Some(ArrivalTable::build(
                &scenario.worldlines,
                &locations,
                &grid,
                scenario.convention,
            )?)
        } else {
            None
        };
        Ok(Self {
            scenario,
            model,
            order: scenario.processing_order(order),
            rule,
            projs,
            arrivals,
            props: BTreeMap::new(),
            chains: BTreeMap::new(),
        })
    }

    /// Depth-first branch walk for the outcome-independent and sequential
    /// boundary rules.
    fn walk(
        &mut self,
        step: usize,
        chi: StateVector,
        t_prev: f64,
        prefix: &mut Vec<(usize, usize)>,
        out: &mut BTreeMap<Vec<usize>, f64>,
    ) -> Result<()> {
        let mi = self.order[step];
        let t_cur = self.scenario.measurements[mi].event.t;
        let evolved = match self.evolve_window(&chi, t_prev, t_cur, prefix)? {
            Some(state) => state,
            None => {
                // A conditioning boundary vanished: every completion of this
                // branch has probability zero.
                self.fill_zeros(step, prefix, out);
                return Ok(());
            }
        };
        let n = self.order.len();
        for o in 0..self.projs[mi].len() {
            let branch = self.projs[mi][o].apply(&evolved)?;
            let dead = branch.norm() < DEAD_BRANCH_NORM;
            prefix.push((mi, o));
            if step + 1 == n {
                let p = if dead { 0.0 } else { branch.norm().powi(2) };
                out.insert(self.tuple_of(prefix), p);
            } else if dead {
                self.fill_zeros(step + 1, prefix, out);
            } else {
                self.walk(step + 1, branch, t_cur, prefix, out)?;
            }
            prefix.pop();
        }
        Ok(())
    }

    /// Full outcome tuple from a processing-order prefix, indexed in listed
    /// measurement order.
    fn tuple_of(&self, prefix: &[(usize, usize)]) -> Vec<usize> {
        let mut tuple = vec![0usize; self.order.len()];
        for &(mi, o) in prefix {
            tuple[mi] = o;
        }
        tuple
    }

    /// Records probability zero for every completion of the prefix from
    /// `step` onward.
    fn fill_zeros(
        &self,
        step: usize,
        prefix: &[(usize, usize)],
        out: &mut BTreeMap<Vec<usize>, f64>,
    ) {
        let rest: Vec<usize> = self.order[step..].to_vec();
        let counts: Vec<usize> = rest.iter().map(|&mi| self.projs[mi].len()).collect();
        let mut combo = vec![0usize; rest.len()];
        loop {
            let mut tuple = self.tuple_of(prefix);
            for (k, &mi) in rest.iter().enumerate() {
                tuple[mi] = combo[k];
            }
            out.insert(tuple, 0.0);
            let mut i = 0;
            loop {
                if i == combo.len() {
                    return;
                }
                combo[i] += 1;
                if combo[i] < counts[i] {
                    break;
                }
                combo[i] = 0;
                i += 1;
            }
        }
    }

    /// Evolves the branch state across `[from, to]` (either direction).
    /// `None` means a conditioning boundary has vanished.
    fn evolve_window(
        &mut self,
        chi: &StateVector,
        from: f64,
        to: f64,
        prefix: &[(usize, usize)],
    ) -> Result<Option<StateVector>> {
        if (to - from).abs() < 1e-12 {
            return Ok(Some(chi.clone()));
        }
        match &self.rule {
            Rule::Fixed { state, anchor } => {
                let (boundary, anchor) = (state.clone(), *anchor);
                let u = self.cached_prop(CondDesc::Fixed, None, &boundary, anchor, from, to)?;
                Ok(Some(u.apply(chi)?))
            }
            Rule::Collapse => {
                // The running branch state is the boundary; every branch
                // node is visited once, so there is nothing to cache.
                let u = boundary_propagator(
                    &self.model,
                    &chi.unit()?,
                    from,
                    from,
                    to,
                    self.scenario.dt,
                )?;
                Ok(Some(u.apply(chi)?))
            }
            Rule::Causal => self.evolve_causal(chi, from, to, prefix),
            Rule::Post => unreachable!("postselection does not use the branch walk"),
        }
    }

    /// Causal window evolution: split at every time some factor's arrived
    /// outcome set changes; within a stretch use one joint propagator when
    /// all factors share the same conditioning, per-factor propagators
    /// otherwise.
    fn evolve_causal(
        &mut self,
        chi: &StateVector,
        from: f64,
        to: f64,
        prefix: &[(usize, usize)],
    ) -> Result<Option<StateVector>> {
        let arrivals = self.arrivals.as_ref().expect("causal rule builds arrivals");
        let grid = arrivals.grid().clone();
        let from_bin = grid.bin_of(from)?;
        let to_bin = grid.bin_of(to)?;
        let (lo, hi) = if from_bin <= to_bin {
            (from_bin, to_bin)
        } else {
            (to_bin, from_bin)
        };
        let n_factors = self.scenario.worldlines.len();
        let mut interior: Vec<usize> = (0..n_factors)
            .flat_map(|track| arrivals.change_bins(track, lo, hi))
            .filter(|&b| b > lo && b < hi)
            .collect();
        interior.sort_unstable();
        interior.dedup();
        let mut seq = Vec::with_capacity(interior.len() + 2);
        seq.push(from_bin);
        if from_bin <= to_bin {
            seq.extend(interior.iter().copied());
        } else {
            seq.extend(interior.iter().rev().copied());
        }
        seq.push(to_bin);

        let mut cur = chi.clone();
        for w in seq.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (ta, tb) = (grid.time(a), grid.time(b));
            // The stretch covers lab times [min, max): arrivals exactly at
            // its upper end belong to the next stretch.
            let key_bin = a.min(b);
            let keys: Vec<CondKey> = (0..n_factors)
                .map(|j| {
                    let mut key: CondKey = prefix
                        .iter()
                        .copied()
                        .filter(|&(mi, _)| {
                            self.arrivals
                                .as_ref()
                                .expect("causal rule builds arrivals")
                                .contains(j, key_bin, mi)
                        })
                        .collect();
                    key.sort_unstable();
                    key
                })
                .collect();
            if keys.iter().all(|k| *k == keys[0]) {
                let chain = self.chain_state(&keys[0])?;
                if chain.dead {
                    return Ok(None);
                }
                let boundary = chain.state.unit()?;
                let anchor = chain.anchor;
                let u = self.cached_prop(
                    CondDesc::Chain(keys[0].clone()),
                    None,
                    &boundary,
                    anchor,
                    ta,
                    tb,
                )?;
                cur = u.apply(&cur)?;
            } else {
                if self.model.has_cross_terms() {
                    return Err(Error::CrossCoupling(
                        "causal conditioning requires factorized evolution once outcomes \
                         reach factors at different times, which a joint interaction forbids"
                            .into(),
                    ));
                }
                let mut parts: Vec<LinearOperator> = Vec::with_capacity(n_factors);
                for (j, key) in keys.iter().enumerate() {
                    let chain = self.chain_state(key)?;
                    if chain.dead {
                        return Ok(None);
                    }
                    let boundary = chain.state.unit()?;
                    let anchor = chain.anchor;
                    let u = self.cached_prop(
                        CondDesc::Chain(key.clone()),
                        Some(j),
                        &boundary,
                        anchor,
                        ta,
                        tb,
                    )?;
                    parts.push(u.matrix().clone());
                }
                let refs: Vec<&LinearOperator> = parts.iter().collect();
                let full = tensor_ops(&refs)?;
                cur = full.apply(&cur)?;
            }
        }
        Ok(Some(cur))
    }

    /// The conditioned chain state of an outcome set: evolve the parent
    /// chain (all but the latest outcome) from its anchor to the latest
    /// measurement's time under the parent-labelled propagator, then project
    /// the latest outcome. Memoized across branches.
    fn chain_state(&mut self, key: &CondKey) -> Result<Chain> {
        if let Some(chain) = self.chains.get(key) {
            return Ok(chain.clone());
        }
        let chain = if key.is_empty() {
            Chain {
                state: self.scenario.initial_state.unit()?,
                anchor: self.scenario.preparation.t,
                dead: false,
            }
        } else {
            let parent_key: CondKey = key[..key.len() - 1].to_vec();
            let parent = self.chain_state(&parent_key)?;
            let (mi, o) = *key.last().expect("non-empty key");
            let t_m = self.scenario.measurements[mi].event.t;
            if parent.dead {
                Chain {
                    state: parent.state,
                    anchor: t_m,
                    dead: true,
                }
            } else {
                let boundary = parent.state.unit()?;
                let anchor = parent.anchor;
                let u = self.cached_prop(
                    CondDesc::Chain(parent_key.clone()),
                    None,
                    &boundary,
                    anchor,
                    anchor,
                    t_m,
                )?;
                let evolved = u.apply(&parent.state)?;
                let projected = self.projs[mi][o].apply(&evolved)?;
                let dead = projected.norm() < DEAD_BRANCH_NORM;
                Chain {
                    state: projected,
                    anchor: t_m,
                    dead,
                }
            }
        };
        self.chains.insert(key.clone(), chain.clone());
        Ok(chain)
    }

    fn cached_prop(
        &mut self,
        cond: CondDesc,
        factor: Option<usize>,
        boundary: &StateVector,
        anchor: f64,
        from: f64,
        to: f64,
    ) -> Result<&BoundaryPropagator> {
        let key = PropKey {
            cond,
            factor,
            from: from.to_bits(),
            to: to.to_bits(),
        };
        if !self.props.contains_key(&key) {
            let u = match factor {
                None => boundary_propagator(&self.model, boundary, anchor, from, to, self.scenario.dt)?,
                Some(j) => factor_boundary_propagator(
                    &self.model,
                    j,
                    boundary,
                    anchor,
                    from,
                    to,
                    self.scenario.dt,
                )?,
            };
            self.props.insert(key.clone(), u);
        }
        Ok(self.props.get(&key).expect("inserted above"))
    }

    /// Postselection: every outcome tuple is evaluated against its own
    /// future boundary; the raw weights are divided by their sum at the
    /// distribution level. Returns that sum.
    fn postselected(&mut self, out: &mut BTreeMap<Vec<usize>, f64>) -> Result<f64> {
        let n = self.order.len();
        let counts: Vec<usize> = self
            .scenario
            .measurements
            .iter()
            .map(|m| m.outcomes())
            .collect();
        let t_f = self.scenario.final_time();
        let mut tuple = vec![0usize; n];
        loop {
            let (boundary, bkey) =
                final_boundary(self.scenario, &|mi| Ok(tuple[mi]))?;
            let mut chi = self.scenario.initial_state.unit()?;
            let mut t_prev = self.scenario.preparation.t;
            let mut dead = false;
            for idx in 0..n {
                let mi = self.order[idx];
                let t_m = self.scenario.measurements[mi].event.t;
                if (t_m - t_prev).abs() >= 1e-12 {
                    let u = self.cached_prop(
                        CondDesc::Post(bkey.clone()),
                        None,
                        &boundary,
                        t_f,
                        t_prev,
                        t_m,
                    )?;
                    chi = u.apply(&chi)?;
                }
                chi = self.projs[mi][tuple[mi]].apply(&chi)?;
                if chi.norm() < DEAD_BRANCH_NORM {
                    dead = true;
                    break;
                }
                t_prev = t_m;
            }
            out.insert(tuple.clone(), if dead { 0.0 } else { chi.norm().powi(2) });
            let mut i = 0;
            loop {
                if i == n {
                    let total: f64 = out.values().sum();
                    if total <= 0.0 {
                        return Err(Error::Config(
                            "every branch is orthogonal to its final boundary; the \
                             conditioned distribution does not exist"
                                .into(),
                        ));
                    }
                    return Ok(total);
                }
                tuple[i] += 1;
                if tuple[i] < counts[i] {
                    break;
                }
                tuple[i] = 0;
                i += 1;
            }
        }
    }
}

/// Assembles the future boundary for postselection: walk the measurements
/// backward in lab time; the latest measurement on each factor contributes
/// that factor's eigenvector. A whole-system measurement later than every
/// per-factor one contributes the full outcome vector; one interleaved with
/// per-factor coverage has no product form and is rejected.
fn final_boundary(
    scenario: &Scenario,
    outcome_of: &dyn Fn(usize) -> Result<usize>,
) -> Result<(StateVector, CondKey)> {
    let dims = scenario.model.dims();
    let n_factors = dims.len();
    let ms = &scenario.measurements;
    let mut parts: Vec<Option<(usize, usize)>> = vec![None; n_factors];
    let mut covered = 0usize;
    let mut joint: Option<(usize, usize)> = None;
    for mi in (0..ms.len()).rev() {
        match ms[mi].basis.subsystem() {
            Some(j) => {
                if parts[j].is_none() {
                    parts[j] = Some((mi, outcome_of(mi)?));
                    covered += 1;
                    if covered == n_factors {
                        break;
                    }
                }
            }
            None => {
                if covered == 0 {
                    joint = Some((mi, outcome_of(mi)?));
                    break;
                }
                return Err(Error::Config(format!(
                    "whole-system measurement '{}' cannot combine with later per-factor \
                     outcomes into a product boundary",
                    ms[mi].label
                )));
            }
        }
    }
    if let Some((mi, o)) = joint {
        let flat = ms[mi].basis.vector(o)?;
        let state = StateVector::new(dims.to_vec(), flat.into_amps())?;
        return Ok((state, vec![(mi, o)]));
    }
    let mut vecs = Vec::with_capacity(n_factors);
    let mut key: CondKey = Vec::with_capacity(n_factors);
    for (j, part) in parts.iter().enumerate() {
        match part {
            Some((mi, o)) => {
                vecs.push(ms[*mi].basis.vector(*o)?);
                key.push((*mi, *o));
            }
            None => {
                return Err(Error::Config(format!(
                    "factor {j} carries no measurement, so its final boundary is undefined"
                )));
            }
        }
    }
    let refs: Vec<&StateVector> = vecs.iter().collect();
    Ok((tensor_states(&refs)?, key))
}

pub fn conditional_state(
    scenario: &Scenario,
    prescription: Prescription,
    given: &[(usize, usize)],
    subsystem: usize,
    t: f64,
) -> Result<ConditionalState> {
    scenario.validate()?;
    let n = scenario.measurements.len();
    if subsystem >= scenario.model.dims().len() {
        return Err(Error::IndexOutOfRange(format!(
            "factor {subsystem} out of range for {} factors",
            scenario.model.dims().len()
        )));
    }
    let mut outcomes: BTreeMap<usize, usize> = BTreeMap::new();
    for &(mi, o) in given {
        if mi >= n {
            return Err(Error::IndexOutOfRange(format!(
                "conditioning on measurement {mi} of {n}"
            )));
        }
        if o >= scenario.measurements[mi].outcomes() {
            return Err(Error::IndexOutOfRange(format!(
                "outcome {o} out of range for measurement '{}'",
                scenario.measurements[mi].label
            )));
        }
        if outcomes.insert(mi, o).is_some() {
            return Err(Error::Config(format!(
                "duplicate conditioning for measurement '{}'",
                scenario.measurements[mi].label
            )));
        }
    }
    let require = |mi: usize| -> Result<usize> {
        outcomes.get(&mi).copied().ok_or_else(|| {
            Error::Config(format!(
                "the boundary depends on measurement '{}', whose outcome was not given",
                scenario.measurements[mi].label
            ))
        })
    };

    let horizon = scenario.final_time().max(t).max(scenario.preparation.t);
    let mut eng = Engine::new(scenario, prescription, ProcessingOrder::Lab, horizon)?;
    match prescription {
        Prescription::Sqm | Prescription::Preselection | Prescription::Everett => {
            let Rule::Fixed { state, anchor } = &eng.rule else {
                unreachable!("fixed-boundary prescriptions use the fixed rule")
            };
            Ok(ConditionalState {
                state: state.clone(),
                anchor: *anchor,
                conditioned_on: Vec::new(),
            })
        }
        Prescription::Collapse => {
            // Everything processed so far conditions the running state.
            let members: Vec<usize> = (0..n)
                .filter(|&mi| scenario.measurements[mi].event.t <= t + 1e-12)
                .collect();
            let key: CondKey = members
                .iter()
                .map(|&mi| Ok((mi, require(mi)?)))
                .collect::<Result<_>>()?;
            let chain = eng.chain_state(&key)?;
            Ok(ConditionalState {
                state: chain.state,
                anchor: chain.anchor,
                conditioned_on: members,
            })
        }
        Prescription::CausalConditional => {
            let arrivals = eng.arrivals.as_ref().expect("causal rule builds arrivals");
            let grid = arrivals.grid();
            let members: Vec<usize> = if t < grid.t0() {
                Vec::new()
            } else {
                let bin = (((t - grid.t0()) / grid.dt()) + 1e-9).floor() as usize;
                let bin = bin.min(grid.n_bins() - 1);
                (0..n)
                    .filter(|&mi| arrivals.contains(subsystem, bin, mi))
                    .collect()
            };
            let key: CondKey = members
                .iter()
                .map(|&mi| Ok((mi, require(mi)?)))
                .collect::<Result<_>>()?;
            let chain = eng.chain_state(&key)?;
            Ok(ConditionalState {
                state: chain.state,
                anchor: chain.anchor,
                conditioned_on: members,
            })
        }
        Prescription::Postselection => {
            let (state, key) = final_boundary(scenario, &require)?;
            Ok(ConditionalState {
                state,
                anchor: scenario.final_time(),
                conditioned_on: key.iter().map(|&(mi, _)| mi).collect(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{solve_nonlinear, NonlinearKind, NonlinearTerm};
    use crate::hilbert::{bell_state, c, number_op, sigma_x, sigma_z, Basis};
    use crate::prescriptions::{
        causal_conditional_distribution, collapse_distribution, distribution,
        distribution_with_order, everett_distribution, postselection_distribution,
        preselection_distribution, sqm_distribution, MeasurementEvent,
    };
    use crate::spacetime::{ConeConvention, Event, Worldline};
    use ndarray::arr1;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_8};

    /// Two qubits with an expectation-feedback term on each: the observable
    /// is the (trace-ful) level population, the response a z rotation.
    fn feedback_pair(lambda: f64) -> NonlinearModel {
        let term = |subsystem| NonlinearTerm {
            subsystem,
            lambda,
            kind: NonlinearKind::WeinbergExpectation {
                observable: number_op(),
                response: sigma_z(),
            },
        };
        NonlinearModel::new(vec![2, 2])
            .unwrap()
            .with_term(term(0))
            .unwrap()
            .with_term(term(1))
            .unwrap()
    }

    fn bell_pair_scenario(lambda: f64, theta_a: f64, theta_b: f64) -> Scenario {
        Scenario {
            model: feedback_pair(lambda),
            initial_state: bell_state(),
            preparation: Event::new(0.0, 0.0),
            worldlines: vec![Worldline::static_at(-1.0), Worldline::static_at(1.0)],
            measurements: vec![
                MeasurementEvent {
                    label: "A".into(),
                    event: Event::new(1.0, -1.0),
                    basis: Basis::rotation(Some(0), theta_a),
                },
                MeasurementEvent {
                    label: "B".into(),
                    event: Event::new(1.2, 1.0),
                    basis: Basis::rotation(Some(1), theta_b),
                },
            ],
            dt: 1e-3,
            convention: ConeConvention::default(),
            everett: None,
        }
    }

    #[test]
    fn bell_pair_in_matching_bases_is_perfectly_correlated() {
        let s = bell_pair_scenario(0.0, 0.0, 0.0);
        let d = sqm_distribution(&s).unwrap();
        assert!((d.prob(&[0, 0]) - 0.5).abs() < 1e-12);
        assert!((d.prob(&[1, 1]) - 0.5).abs() < 1e-12);
        assert!(d.prob(&[0, 1]) < 1e-12);
        assert!(d.prob(&[1, 0]) < 1e-12);
    }

    #[test]
    fn bell_pair_in_conjugate_bases_is_uniform() {
        let s = bell_pair_scenario(0.0, 0.0, FRAC_PI_4);
        let d = sqm_distribution(&s).unwrap();
        for (_, p) in d.iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn no_measurements_yield_the_trivial_distribution() {
        let mut s = bell_pair_scenario(0.3, 0.0, 0.0);
        s.measurements.clear();
        let d = distribution(&s, Prescription::Collapse).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.prob(&[]), 1.0);
    }

    #[test]
    fn all_prescriptions_coincide_at_zero_coupling() {
        let mut s = bell_pair_scenario(0.0, FRAC_PI_8, FRAC_PI_4);
        // Keep non-trivial linear dynamics in the window.
        s.model = s
            .model
            .with_factor_h(0, sigma_z().scale(c(0.5, 0.0)))
            .unwrap()
            .with_factor_h(1, sigma_x().scale(c(0.3, 0.0)))
            .unwrap();
        let reference = sqm_distribution(&s).unwrap();
        for p in Prescription::ALL {
            let d = distribution(&s, p).unwrap();
            assert!(
                reference.total_variation(&d).unwrap() < 1e-9,
                "{p} deviates at zero coupling"
            );
        }
    }

    #[test]
    fn default_universal_boundary_reproduces_preselection_bit_for_bit() {
        let s = bell_pair_scenario(0.35, FRAC_PI_8, FRAC_PI_4);
        let pre = preselection_distribution(&s).unwrap();
        let eve = everett_distribution(&s).unwrap();
        for ((ka, pa), (kb, pb)) in pre.iter().zip(eve.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }

    #[test]
    fn probabilities_sum_to_one_for_every_prescription() {
        let s = bell_pair_scenario(0.45, FRAC_PI_8, FRAC_PI_4);
        for p in Prescription::ALL {
            let d = distribution(&s, p).unwrap();
            assert!(
                (d.total() - 1.0).abs() < 1e-9,
                "{p} total = {}",
                d.total()
            );
        }
    }

    fn single_qubit_scenario(theta: f64) -> Scenario {
        let model = NonlinearModel::single(
            2,
            Some(sigma_x().scale(c(0.4, 0.0))),
            vec![NonlinearTerm {
                subsystem: 0,
                lambda: 0.5,
                kind: NonlinearKind::WeinbergExpectation {
                    observable: number_op(),
                    response: sigma_z(),
                },
            }],
        )
        .unwrap();
        let psi = StateVector::new(vec![2], arr1(&[c(0.3f64.cos(), 0.0), c(0.3f64.sin(), 0.0)]))
            .unwrap();
        Scenario {
            model,
            initial_state: psi,
            preparation: Event::new(0.0, 0.0),
            worldlines: vec![Worldline::static_at(0.0)],
            measurements: vec![MeasurementEvent {
                label: "M".into(),
                event: Event::new(1.0, 0.0),
                basis: Basis::rotation(Some(0), theta),
            }],
            dt: 1e-3,
            convention: ConeConvention::default(),
            everett: None,
        }
    }

    #[test]
    fn preselection_matches_directly_solved_trajectory() {
        let s = single_qubit_scenario(0.3);
        let d = preselection_distribution(&s).unwrap();
        // Oracle: solve the non-linear equation itself and project.
        let traj = solve_nonlinear(&s.model, &s.initial_state, 0.0, 0.0, 1.0, 1e-3).unwrap();
        let phi = traj.state_at(1.0).unwrap();
        for o in 0..2 {
            let v = s.measurements[0].basis.vector(o).unwrap();
            let want = v.inner(phi).norm_sqr();
            assert!((d.prob(&[o]) - want).abs() < 1e-8);
        }
    }

    #[test]
    fn postselection_matches_backward_conditioned_trajectories() {
        let s = single_qubit_scenario(0.3);
        let d = postselection_distribution(&s).unwrap();
        // Oracle: for each outcome, solve the non-linear equation anchored
        // at that outcome's eigenvector at the measurement time, backward to
        // the preparation; the branch amplitude is the overlap with the
        // initial state.
        let mut raw = [0.0f64; 2];
        for (o, slot) in raw.iter_mut().enumerate() {
            let v = s.measurements[0].basis.vector(o).unwrap();
            let traj = solve_nonlinear(&s.model, &v, 1.0, 0.0, 1.0, 1e-3).unwrap();
            let back = traj.state_at(0.0).unwrap();
            *slot = back.inner(&s.initial_state).norm_sqr();
        }
        let total: f64 = raw.iter().sum();
        for (o, r) in raw.iter().enumerate() {
            assert!((d.prob(&[o]) - r / total).abs() < 1e-9);
        }
        assert!((d.normalizer() - total).abs() < 1e-9);
    }

    #[test]
    fn fixed_boundary_prescriptions_ignore_spacelike_processing_order() {
        let s = bell_pair_scenario(0.4, FRAC_PI_8, FRAC_PI_4);
        // Rapidity 0.5 flips the A/B time order: A is then processed last.
        let order = s.processing_order(ProcessingOrder::Boosted(0.5));
        assert_eq!(order, vec![1, 0]);
        for p in [
            Prescription::Sqm,
            Prescription::Preselection,
            Prescription::Everett,
            Prescription::CausalConditional,
        ] {
            let lab = distribution(&s, p).unwrap();
            let boosted =
                distribution_with_order(&s, p, ProcessingOrder::Boosted(0.5)).unwrap();
            assert!(
                lab.total_variation(&boosted).unwrap() < 1e-9,
                "{p} depends on the processing order of spacelike measurements"
            );
        }
    }

    #[test]
    fn collapse_depends_on_spacelike_processing_order() {
        let s = bell_pair_scenario(0.5, FRAC_PI_8, FRAC_PI_4);
        let lab = collapse_distribution(&s).unwrap();
        let boosted =
            distribution_with_order(&s, Prescription::Collapse, ProcessingOrder::Boosted(0.5))
                .unwrap();
        let tv = lab.total_variation(&boosted).unwrap();
        assert!(tv > 1e-4, "collapse order flip changed nothing: tv = {tv}");
    }

    #[test]
    fn causal_conditioning_equals_collapse_when_all_factors_share_a_worldline() {
        // Co-located factors: every outcome reaches every factor instantly,
        // so the causally conditioned boundary is the collapsed state.
        let mut s = bell_pair_scenario(0.4, FRAC_PI_8, FRAC_PI_4);
        s.worldlines = vec![Worldline::static_at(0.0), Worldline::static_at(0.0)];
        s.measurements[0].event = Event::new(1.0, 0.0);
        s.measurements[1].event = Event::new(1.2, 0.0);
        let collapse = collapse_distribution(&s).unwrap();
        let causal = causal_conditional_distribution(&s).unwrap();
        assert!(collapse.total_variation(&causal).unwrap() < 1e-9);
    }

    #[test]
    fn deleting_an_outcome_nobody_sees_leaves_causal_marginals_unchanged() {
        let mut with_extra = bell_pair_scenario(0.5, FRAC_PI_8, FRAC_PI_4);
        // A third measurement on factor 1, after B, whose cone reaches
        // nothing that is still to be processed.
        with_extra.measurements.push(MeasurementEvent {
            label: "E".into(),
            event: Event::new(1.4, 1.0),
            basis: Basis::rotation(Some(1), 0.7),
        });
        let full = causal_conditional_distribution(&with_extra).unwrap();
        let marginal = full.marginal(&[0, 1]).unwrap();
        let without = bell_pair_scenario(0.5, FRAC_PI_8, FRAC_PI_4);
        let base = causal_conditional_distribution(&without).unwrap();
        let mut tv = 0.0;
        for (tuple, p) in base.iter() {
            tv += (p - marginal.get(tuple).copied().unwrap_or(0.0)).abs();
        }
        assert!(tv / 2.0 < 1e-9);
    }

    #[test]
    fn repeated_measurement_kills_the_flipped_branch_exactly() {
        let mut s = bell_pair_scenario(0.0, 0.0, 0.0);
        // Measure factor 0 twice in the same basis with no dynamics in
        // between (H = 0, λ = 0): the flipped outcomes must be exactly dead.
        s.measurements = vec![
            MeasurementEvent {
                label: "M1".into(),
                event: Event::new(1.0, -1.0),
                basis: Basis::computational(Some(0), 2),
            },
            MeasurementEvent {
                label: "M2".into(),
                event: Event::new(1.5, -1.0),
                basis: Basis::computational(Some(0), 2),
            },
        ];
        let d = collapse_distribution(&s).unwrap();
        assert_eq!(d.prob(&[0, 1]), 0.0);
        assert_eq!(d.prob(&[1, 0]), 0.0);
        assert!((d.prob(&[0, 0]) - 0.5).abs() < 1e-9);
        assert!((d.prob(&[1, 1]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn simultaneous_spacelike_measurements_follow_the_product_rule() {
        let mut s = bell_pair_scenario(0.0, 0.0, FRAC_PI_4);
        s.measurements[1].event = Event::new(1.0, 1.0);
        for p in Prescription::ALL {
            let d = distribution(&s, p).unwrap();
            assert!((d.total() - 1.0).abs() < 1e-9);
            for (_, prob) in d.iter() {
                assert!((prob - 0.25).abs() < 1e-9, "{p}");
            }
        }
    }

    #[test]
    fn postselection_rejects_a_factor_without_measurements() {
        let mut s = bell_pair_scenario(0.3, FRAC_PI_8, FRAC_PI_4);
        s.measurements.remove(1);
        let err = postselection_distribution(&s);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn whole_system_measurement_supplies_the_full_final_boundary() {
        // One per-factor measurement, then a joint one in an entangled
        // basis: the joint outcome is the future boundary on its own.
        let mut s = bell_pair_scenario(0.3, FRAC_PI_8, FRAC_PI_4);
        s.worldlines = vec![Worldline::static_at(0.0), Worldline::static_at(0.0)];
        s.measurements = vec![
            MeasurementEvent {
                label: "A".into(),
                event: Event::new(1.0, 0.0),
                basis: Basis::rotation(Some(0), FRAC_PI_8),
            },
            MeasurementEvent {
                label: "J".into(),
                event: Event::new(1.5, 0.0),
                basis: Basis::from_state(None, bell_state().amps()).unwrap(),
            },
        ];
        let d = postselection_distribution(&s).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-9);
        assert!(d.normalizer() > 0.0);
    }

    #[test]
    fn conditional_state_reproduces_the_hand_built_chain() {
        let s = bell_pair_scenario(0.4, FRAC_PI_8, FRAC_PI_4);
        // Factor 1 at t = 2: B's own outcome has arrived, A's (light
        // distance 2 away, sent at t = 1) has not.
        let cond = conditional_state(
            &s,
            Prescription::CausalConditional,
            &[(0, 0), (1, 1)],
            1,
            2.0,
        )
        .unwrap();
        assert_eq!(cond.conditioned_on, vec![1]);
        assert!((cond.anchor - 1.2).abs() < 1e-12);
        let u = boundary_propagator(&s.model, &bell_state(), 0.0, 0.0, 1.2, 1e-3).unwrap();
        let p = projector(&s.measurements[1].basis, 1, &[2, 2]).unwrap();
        let want = p.apply(&u.apply(&bell_state()).unwrap()).unwrap();
        assert!(cond.state.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn conditional_state_requires_the_outcomes_the_boundary_depends_on() {
        let s = bell_pair_scenario(0.4, FRAC_PI_8, FRAC_PI_4);
        let err = conditional_state(&s, Prescription::CausalConditional, &[(0, 0)], 1, 2.0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn collapse_conditional_state_tracks_everything_processed() {
        let s = bell_pair_scenario(0.4, FRAC_PI_8, FRAC_PI_4);
        let cond =
            conditional_state(&s, Prescription::Collapse, &[(0, 1), (1, 0)], 0, 1.3).unwrap();
        assert_eq!(cond.conditioned_on, vec![0, 1]);
        assert!((cond.anchor - 1.2).abs() < 1e-12);
        // Hand-built sequential chain.
        let u1 = boundary_propagator(&s.model, &bell_state(), 0.0, 0.0, 1.0, 1e-3).unwrap();
        let pa = projector(&s.measurements[0].basis, 1, &[2, 2]).unwrap();
        let x1 = pa.apply(&u1.apply(&bell_state()).unwrap()).unwrap();
        let u2 =
            boundary_propagator(&s.model, &x1.unit().unwrap(), 1.0, 1.0, 1.2, 1e-3).unwrap();
        let pb = projector(&s.measurements[1].basis, 0, &[2, 2]).unwrap();
        let want = pb.apply(&u2.apply(&x1).unwrap()).unwrap();
        assert!(cond.state.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn measurements_off_their_worldline_are_rejected() {
        let mut s = bell_pair_scenario(0.1, 0.0, 0.0);
        s.measurements[0].event = Event::new(1.0, -0.5);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn measurements_before_the_preparation_are_rejected() {
        let mut s = bell_pair_scenario(0.1, 0.0, 0.0);
        s.preparation = Event::new(1.1, 0.0);
        assert!(matches!(s.validate(), Err(Error::Acausal(_))));
    }

    #[test]
    fn misaligned_measurement_times_are_rejected() {
        let mut s = bell_pair_scenario(0.1, 0.0, 0.0);
        s.measurements[0].event = Event::new(1.0004999, -1.0);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn marginals_and_total_variation_behave() {
        let s = bell_pair_scenario(0.0, 0.0, FRAC_PI_4);
        let d = sqm_distribution(&s).unwrap();
        let m = d.marginal(&[1]).unwrap();
        assert!((m[&vec![0]] - 0.5).abs() < 1e-12);
        assert!((m[&vec![1]] - 0.5).abs() < 1e-12);
        assert!(d.total_variation(&d).unwrap() < 1e-15);
    }
}
