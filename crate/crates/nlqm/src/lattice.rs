//! Discretized 1+1D bookkeeping for outcome broadcasts: which measurement
//! outcomes have causally reached which degree of freedom at which time, and
//! the per-segment propagators that assignment induces.
//!
//! The central object is the [`BoundaryLedger`]: for every track (worldline
//! of a degree of freedom, or static lattice site) and every time bin it
//! records the set of measurement events whose future light cone contains
//! that point, together with the conditioned boundary state that set induces.
//! Broadcast arrival snaps to the first grid time at or after the cone
//! reaches the track — never earlier, so causality is preserved under
//! discretization.

use std::collections::BTreeMap;

use crate::dynamics::{boundary_propagator, factor_boundary_propagator, BoundaryPropagator, NonlinearModel, NonlinearTerm};
use crate::hilbert::{LinearOperator, StateVector, MAX_TOTAL_DIM};
use crate::spacetime::{in_future_cone, ConeConvention, Event, Worldline};
use crate::{Error, Result};

/// Squared-norm threshold below which a conditioned branch counts as dead.
pub const DEAD_BRANCH_NORM: f64 = 1e-12;

/// A uniform grid of time bins.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_bins: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_bins: usize) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::Config(format!("bin width must be positive, got {dt}")));
        }
        if n_bins == 0 {
            return Err(Error::Config("time grid needs at least one bin".into()));
        }
        Ok(Self { t0, dt, n_bins })
    }

    /// Grid covering `[t0, t_end]` with bins of width `dt` (the end time is
    /// pushed out to the next full bin when not aligned).
    pub fn covering(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if t_end < t0 {
            return Err(Error::Config(format!(
                "grid end {t_end} precedes start {t0}"
            )));
        }
        let span = t_end - t0;
        let n = (span / dt).round();
        let n = if (span - n * dt).abs() <= 1e-9 * (1.0 + span) {
            n as usize
        } else {
            (span / dt).ceil() as usize
        };
        Self::new(t0, dt, n + 1)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn time(&self, bin: usize) -> f64 {
        self.t0 + bin as f64 * self.dt
    }

    pub fn last_time(&self) -> f64 {
        self.time(self.n_bins - 1)
    }

    /// Bin whose time equals `t` (within grid tolerance).
    pub fn bin_of(&self, t: f64) -> Result<usize> {
        let k = ((t - self.t0) / self.dt).round();
        if k < 0.0 || k >= self.n_bins as f64 {
            return Err(Error::CoverageGap(t));
        }
        let k = k as usize;
        if (self.time(k) - t).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(Error::Config(format!(
                "time {t} is not aligned with the grid (t0 {}, dt {})",
                self.t0, self.dt
            )));
        }
        Ok(k)
    }

    /// First bin at or after `t`; `None` when `t` lies past the grid.
    pub fn first_bin_at_or_after(&self, t: f64) -> Option<usize> {
        if t <= self.t0 {
            return Some(0);
        }
        let k = ((t - self.t0) / self.dt).ceil();
        // A value a hair above an exact bin time should land on that bin.
        let k_down = ((t - self.t0) / self.dt).round();
        let k = if (self.time(k_down as usize) - t).abs() <= 1e-9 * (1.0 + t.abs()) {
            k_down
        } else {
            k
        };
        if k >= self.n_bins as f64 {
            None
        } else {
            Some(k as usize)
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_bins).map(|k| self.time(k))
    }
}

/// First-arrival bins of each broadcast event on each track.
///
/// A subluminal track that has entered an event's future cone never leaves
/// it again, so the first crossing determines membership for all later bins.
#[derive(Debug, Clone)]
pub struct ArrivalTable {
    /// `arrival[track][event]` = first bin inside the cone, `None` if the
    /// cone never reaches the track within the grid.
    arrival: Vec<Vec<Option<usize>>>,
    grid: TimeGrid,
}

impl ArrivalTable {
    pub fn build(
        tracks: &[Worldline],
        events: &[Event],
        grid: &TimeGrid,
        convention: ConeConvention,
    ) -> Result<Self> {
        for pair in events.windows(2) {
            if pair[1].t < pair[0].t - 1e-12 {
                return Err(Error::Config(
                    "broadcast events must be ordered by lab time".into(),
                ));
            }
        }
        let mut arrival = Vec::with_capacity(tracks.len());
        for track in tracks {
            let mut row = Vec::with_capacity(events.len());
            for ev in events {
                let start = grid.first_bin_at_or_after(ev.t);
                let hit = start.and_then(|s| {
                    (s..grid.n_bins()).find(|&k| {
                        let t = grid.time(k);
                        in_future_cone(ev, &Event { t, x: track.position(t) }, convention)
                    })
                });
                row.push(hit);
            }
            arrival.push(row);
        }
        Ok(Self {
            arrival,
            grid: grid.clone(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_tracks(&self) -> usize {
        self.arrival.len()
    }

    pub fn n_events(&self) -> usize {
        self.arrival.first().map_or(0, Vec::len)
    }

    pub fn arrival_bin(&self, track: usize, event: usize) -> Option<usize> {
        self.arrival[track][event]
    }

    /// Event indices whose outcome is present at `(track, bin)`.
    pub fn arrived_set(&self, track: usize, bin: usize) -> Vec<usize> {
        self.arrival[track]
            .iter()
            .enumerate()
            .filter_map(|(ev, a)| match a {
                Some(k) if *k <= bin => Some(ev),
                _ => None,
            })
            .collect()
    }

    pub fn contains(&self, track: usize, bin: usize, event: usize) -> bool {
        matches!(self.arrival[track][event], Some(k) if k <= bin)
    }

    /// Bins in `(from_bin, to_bin]` where `track`'s arrived set changes.
    pub fn change_bins(&self, track: usize, from_bin: usize, to_bin: usize) -> Vec<usize> {
        let mut bins: Vec<usize> = self.arrival[track]
            .iter()
            .filter_map(|a| match a {
                Some(k) if *k > from_bin && *k <= to_bin => Some(*k),
                _ => None,
            })
            .collect();
        bins.sort_unstable();
        bins.dedup();
        bins
    }
}

/// A 1-d chain of quantum sites with static positions.
#[derive(Debug, Clone)]
pub struct LatticeField {
    site_positions: Vec<f64>,
    site_dim: usize,
    site_h: Vec<Option<LinearOperator>>,
    couplings: Vec<(usize, LinearOperator)>,
    terms: Vec<NonlinearTerm>,
}

impl LatticeField {
    pub fn new(site_positions: Vec<f64>, site_dim: usize) -> Result<Self> {
        if site_positions.is_empty() {
            return Err(Error::Config("a lattice needs at least one site".into()));
        }
        if site_dim < 2 {
            return Err(Error::Config("site dimension must be at least 2".into()));
        }
        let total = (site_dim as f64).powi(site_positions.len() as i32);
        if total > MAX_TOTAL_DIM as f64 {
            return Err(Error::DimensionMismatch(format!(
                "lattice dimension {total} exceeds the supported maximum {MAX_TOTAL_DIM}"
            )));
        }
        for pair in site_positions.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(
                    "site positions must be strictly increasing".into(),
                ));
            }
        }
        let n = site_positions.len();
        Ok(Self {
            site_positions,
            site_dim,
            site_h: vec![None; n],
            couplings: Vec::new(),
            terms: Vec::new(),
        })
    }

    pub fn with_site_h(mut self, site: usize, h: LinearOperator) -> Result<Self> {
        if site >= self.n_sites() {
            return Err(Error::IndexOutOfRange(format!("site {site} out of range")));
        }
        self.site_h[site] = Some(h);
        Ok(self)
    }

    /// Adds a Hermitian nearest-neighbor coupling acting on sites
    /// `(left, left+1)`.
    pub fn with_coupling(mut self, left: usize, op: LinearOperator) -> Result<Self> {
        if left + 1 >= self.n_sites() {
            return Err(Error::IndexOutOfRange(format!(
                "coupling at {left} has no right neighbor"
            )));
        }
        if op.total_dim() != self.site_dim * self.site_dim {
            return Err(Error::DimensionMismatch(
                "coupling must act on a two-site space".into(),
            ));
        }
        if !op.is_hermitian(1e-12) {
            return Err(Error::NotHermitian(op.hermiticity_defect()));
        }
        self.couplings.push((left, op));
        Ok(self)
    }

    pub fn with_term(mut self, term: NonlinearTerm) -> Result<Self> {
        if term.subsystem >= self.n_sites() {
            return Err(Error::IndexOutOfRange(format!(
                "nonlinear term targets site {} of {}",
                term.subsystem,
                self.n_sites()
            )));
        }
        self.terms.push(term);
        Ok(self)
    }

    pub fn n_sites(&self) -> usize {
        self.site_positions.len()
    }

    pub fn site_positions(&self) -> &[f64] {
        &self.site_positions
    }

    /// Static worldline of each site.
    pub fn tracks(&self) -> Vec<Worldline> {
        self.site_positions
            .iter()
            .map(|&x| Worldline::static_at(x))
            .collect()
    }

    /// Assembles the quantum model: per-site linear parts, embedded
    /// nearest-neighbor couplings as the joint interaction, and the
    /// site-local nonlinear terms.
    pub fn to_model(&self) -> Result<NonlinearModel> {
        let dims = vec![self.site_dim; self.n_sites()];
        let mut model = NonlinearModel::new(dims.clone())?;
        for (site, h) in self.site_h.iter().enumerate() {
            if let Some(h) = h {
                model = model.with_factor_h(site, h.clone())?;
            }
        }
        if !self.couplings.is_empty() {
            let mut interaction = LinearOperator::zero(dims.clone())?;
            for (left, op) in &self.couplings {
                interaction = interaction.add(&embed_pair(op, *left, &dims)?)?;
            }
            model = model.with_interaction(interaction)?;
        }
        for term in &self.terms {
            model = model.with_term(term.clone())?;
        }
        Ok(model)
    }
}

/// Embeds a two-site operator acting on `(left, left+1)` into the full chain.
fn embed_pair(op: &LinearOperator, left: usize, dims: &[usize]) -> Result<LinearOperator> {
    let pair = LinearOperator::new(vec![dims[left], dims[left + 1]], op.matrix().clone())?;
    let idents: Vec<LinearOperator> = dims
        .iter()
        .map(|&d| LinearOperator::identity(vec![d]))
        .collect::<Result<_>>()?;
    let mut parts: Vec<&LinearOperator> = Vec::new();
    for (i, ident) in idents.iter().enumerate() {
        if i == left {
            parts.push(&pair);
        } else if i == left + 1 {
            continue;
        } else {
            parts.push(ident);
        }
    }
    let full = crate::hilbert::tensor_ops(&parts)?;
    LinearOperator::new(dims.to_vec(), full.into_matrix())
}

/// One measurement event whose outcome gets broadcast: spacetime location
/// plus the full-space projector of the obtained outcome.
#[derive(Debug, Clone)]
pub struct BroadcastEvent {
    pub label: String,
    pub event: Event,
    pub projector: LinearOperator,
}

/// Conditioned boundary state induced by a set of arrived outcomes. Kept
/// unnormalized (the chain's amplitude is part of its identity); consumers
/// normalize when feeding a solver.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub state: StateVector,
    pub anchor: f64,
    pub dead: bool,
}

/// Per-(track, bin) record of arrived outcome sets and the boundary states
/// they induce.
#[derive(Debug)]
pub struct BoundaryLedger {
    arrivals: ArrivalTable,
    labels: Vec<String>,
    event_times: Vec<f64>,
    chains: BTreeMap<Vec<usize>, ChainState>,
}

/// Builds the ledger for the given model and broadcast events: arrival bins
/// for every track, plus the conditioned boundary state for every arrived
/// set that actually occurs on the grid.
///
/// The conditioned state for a set is built sequentially in event order:
/// evolve the previous boundary to the event time with a propagator labelled
/// by that boundary, then apply the event's projector. Events not in the set
/// contribute nothing — skipping them is exact because re-anchoring a
/// boundary along its own trajectory does not change the propagators it
/// labels.
#[allow(clippy::too_many_arguments)]
pub fn build_ledger(
    model: &NonlinearModel,
    initial_state: &StateVector,
    prep_time: f64,
    events: &[BroadcastEvent],
    tracks: &[Worldline],
    grid: &TimeGrid,
    convention: ConeConvention,
    dt: f64,
) -> Result<BoundaryLedger> {
    for ev in events {
        grid.bin_of(ev.event.t).map_err(|_| {
            Error::Config(format!(
                "measurement time {} is not on the time grid",
                ev.event.t
            ))
        })?;
        if ev.projector.total_dim() != model.total_dim() {
            return Err(Error::DimensionMismatch(
                "broadcast projector must act on the full model space".into(),
            ));
        }
    }
    let locations: Vec<Event> = events.iter().map(|e| e.event).collect();
    let arrivals = ArrivalTable::build(tracks, &locations, grid, convention)?;

    let mut chains: BTreeMap<Vec<usize>, ChainState> = BTreeMap::new();
    chains.insert(
        Vec::new(),
        ChainState {
            state: initial_state.clone(),
            anchor: prep_time,
            dead: initial_state.norm() < DEAD_BRANCH_NORM,
        },
    );
    // Every set that occurs on the grid, built parents-first.
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for track in 0..tracks.len() {
        for bin in 0..grid.n_bins() {
            sets.push(arrivals.arrived_set(track, bin));
        }
    }
    sets.sort();
    sets.dedup();
    sets.sort_by_key(|s| s.len());
    for set in sets {
        if chains.contains_key(&set) {
            continue;
        }
        let parent_key = set[..set.len() - 1].to_vec();
        if !chains.contains_key(&parent_key) {
            // A parent that never occurs on the grid still anchors the
            // recursion; build it on demand.
            build_chain(model, events, &mut chains, &parent_key, dt)?;
        }
        build_chain(model, events, &mut chains, &set, dt)?;
    }
    Ok(BoundaryLedger {
        arrivals,
        labels: events.iter().map(|e| e.label.clone()).collect(),
        event_times: events.iter().map(|e| e.event.t).collect(),
        chains,
    })
}

fn build_chain(
    model: &NonlinearModel,
    events: &[BroadcastEvent],
    chains: &mut BTreeMap<Vec<usize>, ChainState>,
    set: &[usize],
    dt: f64,
) -> Result<()> {
    if chains.contains_key(set) {
        return Ok(());
    }
    let parent_key = set[..set.len() - 1].to_vec();
    if !chains.contains_key(&parent_key) {
        build_chain(model, events, chains, &parent_key, dt)?;
    }
    let parent = chains.get(&parent_key).expect("parent chain just built");
    let last = *set.last().expect("non-empty set");
    let t_event = events[last].event.t;
    let next = if parent.dead {
        ChainState {
            state: parent.state.clone(),
            anchor: t_event,
            dead: true,
        }
    } else {
        let u = boundary_propagator(
            model,
            &parent.state.unit()?,
            parent.anchor,
            parent.anchor,
            t_event,
            dt,
        )?;
        let evolved = u.apply(&parent.state)?;
        let projected = events[last].projector.apply(&evolved)?;
        let dead = projected.norm() < DEAD_BRANCH_NORM;
        ChainState {
            state: projected,
            anchor: t_event,
            dead,
        }
    };
    chains.insert(set.to_vec(), next);
    Ok(())
}

impl BoundaryLedger {
    pub fn arrivals(&self) -> &ArrivalTable {
        &self.arrivals
    }

    pub fn grid(&self) -> &TimeGrid {
        self.arrivals.grid()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn arrived_set(&self, track: usize, bin: usize) -> Vec<usize> {
        self.arrivals.arrived_set(track, bin)
    }

    /// Boundary state induced by an arrived set.
    pub fn boundary_for_set(&self, set: &[usize]) -> Result<&ChainState> {
        self.chains
            .get(set)
            .ok_or_else(|| Error::Config(format!("no ledger entry for event set {set:?}")))
    }

    /// Boundary state at a (track, bin) cell.
    pub fn boundary_at(&self, track: usize, bin: usize) -> Result<&ChainState> {
        self.boundary_for_set(&self.arrived_set(track, bin))
    }

    pub fn event_time(&self, event: usize) -> f64 {
        self.event_times[event]
    }
}

/// One stretch of a subsystem's evolution under a fixed boundary
/// assignment.
#[derive(Debug, Clone)]
pub struct Segment {
    pub from_t: f64,
    pub to_t: f64,
    pub arrived: Vec<usize>,
}

/// A subsystem propagator over `[t_from, t_to]` split at every
/// boundary-change time, with the composed operator.
#[derive(Debug)]
pub struct SegmentedPropagator {
    segments: Vec<Segment>,
    composed: BoundaryPropagator,
}

impl SegmentedPropagator {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn composed(&self) -> &BoundaryPropagator {
        &self.composed
    }
}

/// Builds the propagator of one subsystem across `[t_from, t_to]`, split at
/// each time its ledger entry changes, each segment labelled by the
/// then-current conditioned boundary.
pub fn segmented_propagator(
    model: &NonlinearModel,
    ledger: &BoundaryLedger,
    subsystem: usize,
    t_from: f64,
    t_to: f64,
    dt: f64,
) -> Result<SegmentedPropagator> {
    if t_to < t_from {
        return Err(Error::Config(
            "segmented propagators run forward in time".into(),
        ));
    }
    let grid = ledger.grid();
    let from_bin = grid.bin_of(t_from)?;
    let to_bin = grid.bin_of(t_to)?;
    let mut cuts = vec![from_bin];
    cuts.extend(ledger.arrivals().change_bins(subsystem, from_bin, to_bin));
    if *cuts.last().unwrap() != to_bin {
        cuts.push(to_bin);
    }

    let mut segments = Vec::new();
    let mut composed: Option<BoundaryPropagator> = None;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let seg_from = grid.time(a);
        let seg_to = grid.time(b);
        let arrived = ledger.arrived_set(subsystem, a);
        let chain = ledger.boundary_for_set(&arrived)?;
        if chain.dead {
            return Err(Error::Config(format!(
                "boundary state for event set {arrived:?} has vanished; no propagator exists"
            )));
        }
        let u = factor_boundary_propagator(
            model,
            subsystem,
            &chain.state.unit()?,
            chain.anchor,
            seg_from,
            seg_to,
            dt,
        )?;
        composed = Some(match composed {
            None => u.clone(),
            Some(prev) => u.compose_after(&prev)?,
        });
        segments.push(Segment {
            from_t: seg_from,
            to_t: seg_to,
            arrived,
        });
    }
    let composed = composed.ok_or_else(|| Error::Config("empty segmentation".into()))?;
    Ok(SegmentedPropagator { segments, composed })
}

/// Region labelling of a (site × time-bin) grid by arrived outcome sets.
#[derive(Debug, Clone)]
pub struct RegionMap {
    /// `labels[site][bin]`.
    labels: Vec<Vec<String>>,
}

impl RegionMap {
    pub fn label(&self, site: usize, bin: usize) -> &str {
        &self.labels[site][bin]
    }

    pub fn n_sites(&self) -> usize {
        self.labels.len()
    }

    pub fn n_bins(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Number of distinct region labels present.
    pub fn region_count(&self) -> usize {
        let mut seen: Vec<&str> = self
            .labels
            .iter()
            .flat_map(|row| row.iter().map(String::as_str))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// CSV rows `site,bin,region` (header included), deterministic order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("site,bin,region\n");
        for (site, row) in self.labels.iter().enumerate() {
            for (bin, label) in row.iter().enumerate() {
                out.push_str(&format!("{site},{bin},{label}\n"));
            }
        }
        out
    }
}

/// Labels every (site, bin) cell with the set of events whose cones contain
/// it. Label format: event labels joined with `+` in event order, `-` for
/// none.
pub fn region_map(
    site_positions: &[f64],
    events: &[(String, Event)],
    grid: &TimeGrid,
    convention: ConeConvention,
) -> Result<RegionMap> {
    let tracks: Vec<Worldline> = site_positions.iter().map(|&x| Worldline::static_at(x)).collect();
    let locations: Vec<Event> = events.iter().map(|(_, e)| *e).collect();
    let arrivals = ArrivalTable::build(&tracks, &locations, grid, convention)?;
    let mut labels = Vec::with_capacity(tracks.len());
    for site in 0..tracks.len() {
        let mut row = Vec::with_capacity(grid.n_bins());
        for bin in 0..grid.n_bins() {
            let set = arrivals.arrived_set(site, bin);
            let label = if set.is_empty() {
                "-".to_string()
            } else {
                set.iter()
                    .map(|&i| events[i].0.as_str())
                    .collect::<Vec<_>>()
                    .join("+")
            };
            row.push(label);
        }
        labels.push(row);
    }
    Ok(RegionMap { labels })
}
