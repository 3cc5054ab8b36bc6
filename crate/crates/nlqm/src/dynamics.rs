//! Non-linear Schrödinger evolution and boundary-labelled propagators.
//!
//! The equation of motion is `i ∂_t ψ = (Ĥ_L + V̂(ψ)) ψ` with `ħ = 1`. The
//! potential `V̂(ψ)` depends on the instantaneous wavefunction, so there is
//! no state-independent propagator. Instead:
//!
//! 1. [`solve_nonlinear`] integrates the non-linear equation through a
//!    Dirichlet boundary condition `ψ(T) = φ` (forward and backward from
//!    `T`), producing a [`Trajectory`].
//! 2. [`boundary_propagator`] integrates the *linear* equation driven by
//!    that trajectory, `i ∂_t ψ = (Ĥ_L + V̂(φ(t))) ψ`, which does have a
//!    unitary propagator. Applied to the boundary state it reproduces the
//!    trajectory; applied to anything else it defines the evolution that
//!    this boundary condition induces.
//!
//! Integration is classical fixed-step RK4. Nothing is ever renormalized
//! mid-run; norm drift is monitored and reported, and drifting past `1e-6`
//! is an error rather than a silent correction.

use ndarray::{Array1, Array2};

use crate::hilbert::{c, embed, LinearOperator, StateVector, C64};
use crate::{Error, Result};

/// Norm drift past this bound aborts an integration.
pub const NORM_DRIFT_LIMIT: f64 = 1e-6;

/// Acceptable mismatch when matching times onto an integration grid.
const GRID_ALIGN_TOL: f64 = 1e-6;

/// Functional form of one wavefunction-dependent potential term.
#[derive(Debug, Clone, PartialEq)]
pub enum NonlinearKind {
    /// `V = λ ⟨ψ|Ô|ψ⟩ M̂` with factor-local Hermitian `Ô`, `M̂`.
    WeinbergExpectation {
        observable: LinearOperator,
        response: LinearOperator,
    },
    /// `V = λ · diag(w_k · p_k)` where `p_k` is the population of level `k`
    /// of the target factor.
    OnSiteCubic { weights: Vec<f64> },
    /// Softened 1-d self-gravity on the factor's level grid:
    /// `V_k = −λ m² Σ_j p_j / (|x_k − x_j| + ε)`.
    SchroedingerNewton1D {
        mass: f64,
        softening: f64,
        positions: Vec<f64>,
    },
}

/// One nonlinear term attached to a tensor factor.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearTerm {
    pub subsystem: usize,
    pub lambda: f64,
    pub kind: NonlinearKind,
}

/// A system Hamiltonian: per-factor linear parts, an optional joint
/// interaction, and wavefunction-dependent terms.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearModel {
    dims: Vec<usize>,
    h_factors: Vec<Option<LinearOperator>>,
    h_interaction: Option<LinearOperator>,
    terms: Vec<NonlinearTerm>,
}

impl NonlinearModel {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        // Reuse the dimension validation of the identity constructor.
        LinearOperator::identity(dims.clone())?;
        let n = dims.len();
        Ok(Self {
            dims,
            h_factors: vec![None; n],
            h_interaction: None,
            terms: Vec::new(),
        })
    }

    /// Convenience for single-factor systems.
    pub fn single(dim: usize, h: Option<LinearOperator>, terms: Vec<NonlinearTerm>) -> Result<Self> {
        let mut m = Self::new(vec![dim])?;
        if let Some(h) = h {
            m = m.with_factor_h(0, h)?;
        }
        for t in terms {
            m = m.with_term(t)?;
        }
        Ok(m)
    }

    pub fn with_factor_h(mut self, factor: usize, h: LinearOperator) -> Result<Self> {
        if factor >= self.dims.len() {
            return Err(Error::IndexOutOfRange(format!(
                "factor {factor} out of range for {} factors",
                self.dims.len()
            )));
        }
        if h.total_dim() != self.dims[factor] {
            return Err(Error::DimensionMismatch(format!(
                "linear part dimension {} does not match factor {factor} dimension {}",
                h.total_dim(),
                self.dims[factor]
            )));
        }
        if !h.is_hermitian(1e-12) {
            return Err(Error::NotHermitian(h.hermiticity_defect()));
        }
        self.h_factors[factor] = Some(h);
        Ok(self)
    }

    pub fn with_interaction(mut self, h: LinearOperator) -> Result<Self> {
        let total: usize = self.dims.iter().product();
        if h.total_dim() != total {
            return Err(Error::DimensionMismatch(format!(
                "interaction dimension {} does not match total dimension {total}",
                h.total_dim()
            )));
        }
        if !h.is_hermitian(1e-12) {
            return Err(Error::NotHermitian(h.hermiticity_defect()));
        }
        self.h_interaction = Some(h);
        Ok(self)
    }

    pub fn with_term(mut self, term: NonlinearTerm) -> Result<Self> {
        if term.subsystem >= self.dims.len() {
            return Err(Error::IndexOutOfRange(format!(
                "nonlinear term targets factor {} of {}",
                term.subsystem,
                self.dims.len()
            )));
        }
        if term.lambda < 0.0 {
            return Err(Error::Config(format!(
                "coupling strength must be non-negative, got {}",
                term.lambda
            )));
        }
        let d = self.dims[term.subsystem];
        match &term.kind {
            NonlinearKind::WeinbergExpectation {
                observable,
                response,
            } => {
                if observable.total_dim() != d || response.total_dim() != d {
                    return Err(Error::DimensionMismatch(
                        "expectation-feedback operators must match their factor dimension".into(),
                    ));
                }
                if !observable.is_hermitian(1e-12) {
                    return Err(Error::NotHermitian(observable.hermiticity_defect()));
                }
                if !response.is_hermitian(1e-12) {
                    return Err(Error::NotHermitian(response.hermiticity_defect()));
                }
            }
            NonlinearKind::OnSiteCubic { weights } => {
                if weights.len() != d {
                    return Err(Error::DimensionMismatch(
                        "on-site weights must match their factor dimension".into(),
                    ));
                }
            }
            NonlinearKind::SchroedingerNewton1D { positions, softening, .. } => {
                if positions.len() != d {
                    return Err(Error::DimensionMismatch(
                        "self-gravity positions must match their factor dimension".into(),
                    ));
                }
                if *softening <= 0.0 {
                    return Err(Error::Config("softening must be positive".into()));
                }
            }
        }
        self.terms.push(term);
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn terms(&self) -> &[NonlinearTerm] {
        &self.terms
    }

    pub fn factor_h(&self, factor: usize) -> Option<&LinearOperator> {
        self.h_factors.get(factor).and_then(|h| h.as_ref())
    }

    pub fn interaction(&self) -> Option<&LinearOperator> {
        self.h_interaction.as_ref()
    }

    pub fn has_cross_terms(&self) -> bool {
        self.h_interaction.is_some()
    }

    /// A copy with every coupling strength multiplied by `scale`
    /// (`scale = 0` yields the linear limit).
    pub fn with_lambda_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.lambda *= scale;
        }
        out
    }

    /// The assembled linear part on the full space.
    pub fn h_total(&self) -> Result<LinearOperator> {
        let mut h = LinearOperator::zero(self.dims.clone())?;
        for (f, hf) in self.h_factors.iter().enumerate() {
            if let Some(hf) = hf {
                h = h.add(&embed(hf, f, &self.dims)?)?;
            }
        }
        if let Some(hi) = &self.h_interaction {
            h = h.add(&LinearOperator::new(self.dims.clone(), hi.matrix().clone())?)?;
        }
        Ok(h)
    }

    /// Populations of the levels of one factor, traced over the rest.
    pub fn factor_populations(&self, amps: &Array1<C64>, factor: usize) -> Vec<f64> {
        factor_populations(amps, &self.dims, factor)
    }

    /// The wavefunction-dependent potential as a dense matrix. No
    /// normalization check; callers own that contract.
    fn potential_matrix_unchecked(&self, amps: &Array1<C64>, ctx: &ModelCtx) -> Array2<C64> {
        let n = amps.len();
        let mut v: Array2<C64> = Array2::zeros((n, n));
        for (idx, term) in self.terms.iter().enumerate() {
            if term.lambda == 0.0 {
                continue;
            }
            match &term.kind {
                NonlinearKind::WeinbergExpectation { .. } => {
                    let (obs, resp) = &ctx.weinberg[idx];
                    let drive = expectation_re(amps, obs);
                    v.scaled_add(c(term.lambda * drive, 0.0), resp);
                }
                NonlinearKind::OnSiteCubic { weights } => {
                    let pops = factor_populations(amps, &self.dims, term.subsystem);
                    for (i, lvl) in ctx.levels[term.subsystem].iter().enumerate() {
                        v[[i, i]] += c(term.lambda * weights[*lvl] * pops[*lvl], 0.0);
                    }
                }
                NonlinearKind::SchroedingerNewton1D {
                    mass,
                    softening,
                    positions,
                } => {
                    let pops = factor_populations(amps, &self.dims, term.subsystem);
                    let d = positions.len();
                    let mut pot = vec![0.0f64; d];
                    for k in 0..d {
                        for j in 0..d {
                            pot[k] -= term.lambda * mass * mass * pops[j]
                                / ((positions[k] - positions[j]).abs() + softening);
                        }
                    }
                    for (i, lvl) in ctx.levels[term.subsystem].iter().enumerate() {
                        v[[i, i]] += c(pot[*lvl], 0.0);
                    }
                }
            }
        }
        v
    }

    /// Factor-local drive matrix induced on `factor` by the joint state
    /// `amps` (the factor's share of the potential, `d_f × d_f`).
    fn factor_drive_unchecked(
        &self,
        amps: &Array1<C64>,
        factor: usize,
        ctx: &ModelCtx,
    ) -> Array2<C64> {
        let d = self.dims[factor];
        let mut v: Array2<C64> = Array2::zeros((d, d));
        for (idx, term) in self.terms.iter().enumerate() {
            if term.subsystem != factor || term.lambda == 0.0 {
                continue;
            }
            match &term.kind {
                NonlinearKind::WeinbergExpectation { response, .. } => {
                    let (obs, _) = &ctx.weinberg[idx];
                    let drive = expectation_re(amps, obs);
                    v.scaled_add(c(term.lambda * drive, 0.0), response.matrix());
                }
                NonlinearKind::OnSiteCubic { weights } => {
                    let pops = factor_populations(amps, &self.dims, factor);
                    for k in 0..d {
                        v[[k, k]] += c(term.lambda * weights[k] * pops[k], 0.0);
                    }
                }
                NonlinearKind::SchroedingerNewton1D {
                    mass,
                    softening,
                    positions,
                } => {
                    let pops = factor_populations(amps, &self.dims, factor);
                    for k in 0..d {
                        for j in 0..d {
                            v[[k, k]] -= c(
                                term.lambda * mass * mass * pops[j]
                                    / ((positions[k] - positions[j]).abs() + softening),
                                0.0,
                            );
                        }
                    }
                }
            }
        }
        v
    }
}

/// Precomputed embeddings and index maps so the integrator's inner loop
/// avoids reassembling operators.
struct ModelCtx {
    h_total: Array2<C64>,
    /// Per term (dense zeros for non-expectation kinds): embedded observable
    /// and embedded response.
    weinberg: Vec<(Array2<C64>, Array2<C64>)>,
    /// `levels[f][i]` = level of factor `f` in full index `i`.
    levels: Vec<Vec<usize>>,
}

impl ModelCtx {
    fn build(model: &NonlinearModel) -> Result<Self> {
        let h_total = model.h_total()?.into_matrix();
        let total = model.total_dim();
        let mut weinberg = Vec::with_capacity(model.terms.len());
        for term in &model.terms {
            match &term.kind {
                NonlinearKind::WeinbergExpectation {
                    observable,
                    response,
                } => {
                    let obs = embed(observable, term.subsystem, &model.dims)?.into_matrix();
                    let resp = embed(response, term.subsystem, &model.dims)?.into_matrix();
                    weinberg.push((obs, resp));
                }
                _ => weinberg.push((Array2::zeros((0, 0)), Array2::zeros((0, 0)))),
            }
        }
        let mut levels = Vec::with_capacity(model.dims.len());
        for f in 0..model.dims.len() {
            let stride: usize = model.dims[f + 1..].iter().product();
            let d = model.dims[f];
            levels.push((0..total).map(|i| (i / stride) % d).collect());
        }
        Ok(Self {
            h_total,
            weinberg,
            levels,
        })
    }
}

fn expectation_re(amps: &Array1<C64>, op: &Array2<C64>) -> f64 {
    let applied = op.dot(amps);
    amps.iter()
        .zip(applied.iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum()
}

pub(crate) fn factor_populations(amps: &Array1<C64>, dims: &[usize], factor: usize) -> Vec<f64> {
    let stride: usize = dims[factor + 1..].iter().product();
    let d = dims[factor];
    let mut pops = vec![0.0f64; d];
    for (i, a) in amps.iter().enumerate() {
        pops[(i / stride) % d] += a.norm_sqr();
    }
    pops
}

/// Evaluates the wavefunction-dependent potential at a given state.
/// Errors when the state's norm is off by more than `1e-6`.
pub fn eval_nonlinear_potential(model: &NonlinearModel, psi: &StateVector) -> Result<LinearOperator> {
    if psi.total_dim() != model.total_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} does not match model dimension {}",
            psi.total_dim(),
            model.total_dim()
        )));
    }
    let norm = psi.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { norm, tol: 1e-6 });
    }
    let ctx = ModelCtx::build(model)?;
    LinearOperator::new(
        model.dims().to_vec(),
        model.potential_matrix_unchecked(psi.amps(), &ctx),
    )
}

/// A solution of the non-linear equation through a boundary condition,
/// sampled on a fixed time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<StateVector>,
    boundary_index: usize,
    max_norm_drift: f64,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn boundary(&self) -> (&StateVector, f64) {
        (
            &self.states[self.boundary_index],
            self.times[self.boundary_index],
        )
    }

    /// Largest `|‖ψ(t)‖ − 1|` observed along the run.
    pub fn max_norm_drift(&self) -> f64 {
        self.max_norm_drift
    }

    /// State at a grid time; errors when `t` is not on the grid.
    pub fn state_at(&self, t: f64) -> Result<&StateVector> {
        let idx = self.index_of(t)?;
        Ok(&self.states[idx])
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        // Grids are short enough that a scan with tolerance is simplest and
        // robust to per-side step differences.
        let tol = grid_tol(&self.times);
        match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(i) => Ok(i),
            Err(i) => {
                if i < self.times.len() && (self.times[i] - t).abs() < tol {
                    Ok(i)
                } else if i > 0 && (self.times[i - 1] - t).abs() < tol {
                    Ok(i - 1)
                } else {
                    Err(Error::CoverageGap(t))
                }
            }
        }
    }
}

fn grid_tol(times: &[f64]) -> f64 {
    let span = if times.len() > 1 {
        (times[times.len() - 1] - times[0]).abs()
    } else {
        1.0
    };
    1e-9 * span.max(1.0)
}

/// One classical RK4 step of `ψ' = −i (H_L + V(ψ)) ψ` (autonomous RHS).
fn rk4_state_step(model: &NonlinearModel, ctx: &ModelCtx, y: &Array1<C64>, h: f64) -> Array1<C64> {
    let minus_i = c(0.0, -1.0);
    let rhs = |state: &Array1<C64>| -> Array1<C64> {
        let v = model.potential_matrix_unchecked(state, ctx);
        let mut out = ctx.h_total.dot(state);
        out += &v.dot(state);
        out.mapv_into(|a| a * minus_i)
    };
    let k1 = rhs(y);
    let k2 = rhs(&(y + &(&k1 * c(h / 2.0, 0.0))));
    let k3 = rhs(&(y + &(&k2 * c(h / 2.0, 0.0))));
    let k4 = rhs(&(y + &(&k3 * c(h, 0.0))));
    y + &((k1 + k2 * c(2.0, 0.0) + k3 * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0))
}

/// Integrates the non-linear equation with boundary condition
/// `ψ(boundary_time) = boundary`, backward to `t_start` and forward to
/// `t_end`, with fixed step at most `dt`.
pub fn solve_nonlinear(
    model: &NonlinearModel,
    boundary: &StateVector,
    boundary_time: f64,
    t_start: f64,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let eps = 1e-9 * (1.0 + t_end.abs().max(t_start.abs()));
    if !(t_start <= boundary_time + eps && boundary_time <= t_end + eps) {
        return Err(Error::Config(format!(
            "boundary time {boundary_time} must lie within [{t_start}, {t_end}]"
        )));
    }
    let (n_back, h_back) = side_steps(boundary_time - t_start, dt)?;
    let (n_fwd, h_fwd) = side_steps(t_end - boundary_time, dt)?;
    solve_on_grid(model, boundary, boundary_time, n_back, h_back, n_fwd, h_fwd)
}

/// Step count and exact step size covering a non-negative span with steps of
/// size at most `dt` that land exactly on the endpoint.
fn side_steps(span: f64, dt: f64) -> Result<(usize, f64)> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if span < 0.0 {
        return Err(Error::Config("negative integration span".into()));
    }
    if span == 0.0 {
        return Ok((0, dt));
    }
    let n = (span / dt).round();
    let n = if (span - n * dt).abs() <= GRID_ALIGN_TOL * dt && n >= 1.0 {
        n
    } else {
        (span / dt).ceil()
    };
    if n > 2e7 {
        return Err(Error::Config(format!(
            "integration would need {n:.0} steps; refusing (span {span}, dt {dt})"
        )));
    }
    Ok((n as usize, span / n))
}

fn solve_on_grid(
    model: &NonlinearModel,
    boundary: &StateVector,
    boundary_time: f64,
    n_back: usize,
    h_back: f64,
    n_fwd: usize,
    h_fwd: f64,
) -> Result<Trajectory> {
    if boundary.total_dim() != model.total_dim() {
        return Err(Error::DimensionMismatch(format!(
            "boundary dimension {} does not match model dimension {}",
            boundary.total_dim(),
            model.total_dim()
        )));
    }
    let norm = boundary.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { norm, tol: 1e-6 });
    }
    let ctx = ModelCtx::build(model)?;
    let dims = model.dims().to_vec();
    let mut drift = (norm - 1.0).abs();

    let mut backward: Vec<(f64, Array1<C64>)> = Vec::with_capacity(n_back);
    let mut y = boundary.amps().clone();
    for k in 1..=n_back {
        y = rk4_state_step(model, &ctx, &y, -h_back);
        let t = boundary_time - k as f64 * h_back;
        let n = y.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        drift = drift.max((n - 1.0).abs());
        if drift > NORM_DRIFT_LIMIT {
            return Err(Error::Accuracy(format!(
                "norm drift {drift:.3e} exceeded {NORM_DRIFT_LIMIT:.1e} at t = {t}; refine dt"
            )));
        }
        backward.push((t, y.clone()));
    }

    let mut forward: Vec<(f64, Array1<C64>)> = Vec::with_capacity(n_fwd);
    y = boundary.amps().clone();
    for k in 1..=n_fwd {
        y = rk4_state_step(model, &ctx, &y, h_fwd);
        let t = boundary_time + k as f64 * h_fwd;
        let n = y.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        drift = drift.max((n - 1.0).abs());
        if drift > NORM_DRIFT_LIMIT {
            return Err(Error::Accuracy(format!(
                "norm drift {drift:.3e} exceeded {NORM_DRIFT_LIMIT:.1e} at t = {t}; refine dt"
            )));
        }
        forward.push((t, y.clone()));
    }

    let mut times = Vec::with_capacity(n_back + n_fwd + 1);
    let mut states = Vec::with_capacity(n_back + n_fwd + 1);
    for (t, amps) in backward.into_iter().rev() {
        times.push(t);
        states.push(StateVector::new(dims.clone(), amps)?);
    }
    times.push(boundary_time);
    states.push(boundary.clone());
    for (t, amps) in forward {
        times.push(t);
        states.push(StateVector::new(dims.clone(), amps)?);
    }
    log::debug!(
        "trajectory [{:.6}, {:.6}] boundary at {:.6}: max norm drift {:.3e}",
        times[0],
        times[times.len() - 1],
        boundary_time,
        drift
    );
    Ok(Trajectory {
        times,
        states,
        boundary_index: n_back,
        max_norm_drift: drift,
    })
}

/// The unitary propagator of the linear equation driven by a boundary
/// condition's trajectory. Maps states at `from_t` to states at `to_t`.
#[derive(Debug, Clone)]
pub struct BoundaryPropagator {
    matrix: LinearOperator,
    from_t: f64,
    to_t: f64,
    boundaries: Vec<(StateVector, f64)>,
}

impl BoundaryPropagator {
    pub fn matrix(&self) -> &LinearOperator {
        &self.matrix
    }

    pub fn from_t(&self) -> f64 {
        self.from_t
    }

    pub fn to_t(&self) -> f64 {
        self.to_t
    }

    /// The boundary conditions labelling this propagator (one entry for a
    /// joint propagator, one per factor for a factorized one).
    pub fn boundaries(&self) -> &[(StateVector, f64)] {
        &self.boundaries
    }

    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        self.matrix.apply(state)
    }

    /// `‖U†U − I‖_max`.
    pub fn unitarity_defect(&self) -> f64 {
        self.matrix.unitarity_defect()
    }

    /// Composes with an earlier propagator: `self · earlier` requires
    /// `earlier.to_t == self.from_t`.
    pub fn compose_after(&self, earlier: &BoundaryPropagator) -> Result<BoundaryPropagator> {
        if (earlier.to_t - self.from_t).abs() > 1e-9 * (1.0 + self.from_t.abs()) {
            return Err(Error::Config(format!(
                "propagator composition mismatch: earlier ends at {}, later starts at {}",
                earlier.to_t, self.from_t
            )));
        }
        let mut boundaries = earlier.boundaries.clone();
        for b in &self.boundaries {
            if !boundaries
                .iter()
                .any(|(s, t)| (t - b.1).abs() < 1e-12 && s.max_abs_diff(&b.0) < 1e-12)
            {
                boundaries.push(b.clone());
            }
        }
        Ok(BoundaryPropagator {
            matrix: self.matrix.compose(&earlier.matrix)?,
            from_t: earlier.from_t,
            to_t: self.to_t,
            boundaries,
        })
    }
}

/// Builds the boundary-labelled propagator `U(to_t ← from_t)` for the given
/// boundary condition `(boundary, boundary_time)`.
///
/// The drive trajectory is solved at half the propagator's step so the RK4
/// stages of the linear integration sample the non-linear solution exactly
/// at grid points; the two integrations remain distinct code paths, so
/// comparing `U(t ← T)|φ⟩` against the directly solved trajectory is a real
/// cross-check, not an identity.
pub fn boundary_propagator(
    model: &NonlinearModel,
    boundary: &StateVector,
    boundary_time: f64,
    from_t: f64,
    to_t: f64,
    dt: f64,
) -> Result<BoundaryPropagator> {
    let matrix = driven_propagator_matrix(model, boundary, boundary_time, from_t, to_t, dt, None)?;
    Ok(BoundaryPropagator {
        matrix: LinearOperator::new(model.dims().to_vec(), matrix)?,
        from_t,
        to_t,
        boundaries: vec![(boundary.clone(), boundary_time)],
    })
}

/// Propagator over a spacelike stretch where each factor carries its own
/// boundary condition: the tensor product of per-factor propagators.
/// Requires a model without cross terms.
pub fn factorized_propagator(
    model: &NonlinearModel,
    boundaries: &[(StateVector, f64)],
    from_t: f64,
    to_t: f64,
    dt: f64,
) -> Result<BoundaryPropagator> {
    if model.has_cross_terms() {
        return Err(Error::CrossCoupling(
            "factorized evolution requires a model without joint interaction terms".into(),
        ));
    }
    if boundaries.len() != model.dims().len() {
        return Err(Error::DimensionMismatch(format!(
            "need one boundary per factor: got {} for {} factors",
            boundaries.len(),
            model.dims().len()
        )));
    }
    let mut factor_ops: Vec<LinearOperator> = Vec::with_capacity(model.dims().len());
    for (f, (state, time)) in boundaries.iter().enumerate() {
        let m = driven_propagator_matrix(model, state, *time, from_t, to_t, dt, Some(f))?;
        factor_ops.push(LinearOperator::new(vec![model.dims()[f]], m)?);
    }
    let refs: Vec<&LinearOperator> = factor_ops.iter().collect();
    let tensor = crate::hilbert::tensor_ops(&refs)?;
    Ok(BoundaryPropagator {
        matrix: LinearOperator::new(model.dims().to_vec(), tensor.into_matrix())?,
        from_t,
        to_t,
        boundaries: boundaries.to_vec(),
    })
}

/// Propagator for a single tensor factor over a stretch where that factor
/// carries its own boundary condition (a joint state plus anchor time). The
/// factor's generator is its linear part plus the drive its nonlinear terms
/// pick up from the boundary's joint trajectory. The result acts on the
/// factor space alone.
pub fn factor_boundary_propagator(
    model: &NonlinearModel,
    factor: usize,
    boundary: &StateVector,
    boundary_time: f64,
    from_t: f64,
    to_t: f64,
    dt: f64,
) -> Result<BoundaryPropagator> {
    if factor >= model.dims().len() {
        return Err(Error::IndexOutOfRange(format!(
            "factor {factor} out of range for {} factors",
            model.dims().len()
        )));
    }
    if model.has_cross_terms() {
        return Err(Error::CrossCoupling(
            "per-factor evolution requires a model without joint interaction terms".into(),
        ));
    }
    let m = driven_propagator_matrix(model, boundary, boundary_time, from_t, to_t, dt, Some(factor))?;
    Ok(BoundaryPropagator {
        matrix: LinearOperator::new(vec![model.dims()[factor]], m)?,
        from_t,
        to_t,
        boundaries: vec![(boundary.clone(), boundary_time)],
    })
}

/// Core driven-linear-equation integrator. With `factor = None` the full
/// generator `H_L + V(φ(t))` is integrated on the joint space; with
/// `factor = Some(f)` only factor `f`'s generator `h_f + drive_f(φ(t))` is,
/// on the factor space.
fn driven_propagator_matrix(
    model: &NonlinearModel,
    boundary: &StateVector,
    boundary_time: f64,
    from_t: f64,
    to_t: f64,
    dt: f64,
    factor: Option<usize>,
) -> Result<Array2<C64>> {
    let dim = match factor {
        None => model.total_dim(),
        Some(f) => model.dims()[f],
    };
    let span = to_t - from_t;
    if span.abs() < 1e-12 {
        return Ok(Array2::eye(dim));
    }
    let (n, h_abs) = side_steps(span.abs(), dt)?;
    let h = h_abs * span.signum();
    let h2 = h / 2.0;

    // The drive trajectory must land exactly on every stage sample
    // `from_t + k·h/2`, so its grid is anchored at the boundary time with
    // step |h|/2; check that `from_t` sits on that grid.
    let offset = (from_t - boundary_time) / h2.abs();
    if (offset - offset.round()).abs() > GRID_ALIGN_TOL {
        return Err(Error::Config(format!(
            "boundary time {boundary_time} is not aligned with the integration grid \
             (from {from_t}, step {h_abs})"
        )));
    }
    let lo = from_t.min(to_t).min(boundary_time);
    let hi = from_t.max(to_t).max(boundary_time);
    let n_back = ((boundary_time - lo) / h2.abs()).round() as usize;
    let n_fwd = ((hi - boundary_time) / h2.abs()).round() as usize;
    let traj = solve_on_grid(model, boundary, boundary_time, n_back, h2.abs(), n_fwd, h2.abs())?;

    let ctx = ModelCtx::build(model)?;
    // Generator samples at the 2n+1 stage points.
    let mut gens: Vec<Array2<C64>> = Vec::with_capacity(2 * n + 1);
    let minus_i = c(0.0, -1.0);
    let h_lin: Array2<C64> = match factor {
        None => ctx.h_total.clone(),
        Some(f) => match model.factor_h(f) {
            Some(hf) => hf.matrix().clone(),
            None => Array2::zeros((dim, dim)),
        },
    };
    for k in 0..=(2 * n) {
        let t = from_t + k as f64 * h2;
        let phi = traj.state_at(t)?;
        let v = match factor {
            None => model.potential_matrix_unchecked(phi.amps(), &ctx),
            Some(f) => model.factor_drive_unchecked(phi.amps(), f, &ctx),
        };
        let mut g = &h_lin + &v;
        g.mapv_inplace(|a| a * minus_i);
        gens.push(g);
    }

    // RK4 on the matrix equation M' = G(t) M.
    let mut m: Array2<C64> = Array2::eye(dim);
    for j in 0..n {
        let g0 = &gens[2 * j];
        let gh = &gens[2 * j + 1];
        let g1 = &gens[2 * j + 2];
        let k1 = g0.dot(&m);
        let k2 = gh.dot(&(&m + &(&k1 * c(h / 2.0, 0.0))));
        let k3 = gh.dot(&(&m + &(&k2 * c(h / 2.0, 0.0))));
        let k4 = g1.dot(&(&m + &(&k3 * c(h, 0.0))));
        m = &m + &((k1 + k2 * c(2.0, 0.0) + k3 * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0));
    }

    // A propagator that has stopped being unitary is useless downstream;
    // treat gross violations as accuracy failures.
    let op = LinearOperator::new(vec![dim], m)?;
    let defect = op.unitarity_defect();
    if defect > 1e-6 {
        return Err(Error::Accuracy(format!(
            "propagator unitarity defect {defect:.3e}; refine dt"
        )));
    }
    Ok(op.into_matrix())
}

pub mod oracle {
    //! Plain reference integrator for cross-checks.
    //!
    //! Deliberately naive: a direct RK4 loop over amplitude vectors with no
    //! trajectory bookkeeping, no propagator assembly and no grid logic, so
    //! it shares as little as possible with the production solver it checks.

    use super::*;

    /// Evolves a state through the non-linear equation with `n_steps` fixed
    /// RK4 steps from `t_from` to `t_to` (direction follows the sign of the
    /// span).
    pub fn evolve(
        model: &NonlinearModel,
        state: &StateVector,
        t_from: f64,
        t_to: f64,
        n_steps: usize,
    ) -> Result<StateVector> {
        if n_steps == 0 {
            return Ok(state.clone());
        }
        let ctx = ModelCtx::build(model)?;
        let h = (t_to - t_from) / n_steps as f64;
        let minus_i = c(0.0, -1.0);
        let rhs = |y: &Array1<C64>| -> Array1<C64> {
            let v = model.potential_matrix_unchecked(y, &ctx);
            let mut out = ctx.h_total.dot(y);
            out += &v.dot(y);
            out.mapv_into(|a| a * minus_i)
        };
        let mut y = state.amps().clone();
        for _ in 0..n_steps {
            let k1 = rhs(&y);
            let k2 = rhs(&(&y + &(&k1 * c(h / 2.0, 0.0))));
            let k3 = rhs(&(&y + &(&k2 * c(h / 2.0, 0.0))));
            let k4 = rhs(&(&y + &(&k3 * c(h, 0.0))));
            y = &y + &((k1 + k2 * c(2.0, 0.0) + k3 * c(2.0, 0.0) + k4) * c(h / 6.0, 0.0));
        }
        StateVector::new(state.dims().to_vec(), y)
    }

    /// Richardson-extrapolated reference: combines runs at `n` and `2n`
    /// steps, cancelling the leading 4th-order error term.
    pub fn evolve_refined(
        model: &NonlinearModel,
        state: &StateVector,
        t_from: f64,
        t_to: f64,
        n_steps: usize,
    ) -> Result<StateVector> {
        let coarse = evolve(model, state, t_from, t_to, n_steps)?;
        let fine = evolve(model, state, t_from, t_to, 2 * n_steps)?;
        let amps = fine
            .amps()
            .iter()
            .zip(coarse.amps().iter())
            .map(|(f, cse)| (f * c(16.0, 0.0) - cse) / c(15.0, 0.0))
            .collect::<Array1<C64>>();
        StateVector::new(state.dims().to_vec(), amps)
    }
}
