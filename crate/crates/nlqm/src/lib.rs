//! Desk-scale laboratory for quantum dynamics with boundary-condition
//! nonlinearities.
//!
//! The crate models finite tensor-product systems whose Schrödinger equation
//! carries a wavefunction-dependent potential. Because a non-linear equation
//! has no state-independent propagator, every evolution operator here is
//! labelled by a *boundary condition*: a state pinned at some time. Solving
//! the non-linear equation through that boundary yields a driving trajectory,
//! and the linear equation driven by it yields a bona fide unitary
//! propagator.
//!
//! Measurement prescriptions differ only in which boundary condition each
//! stretch of evolution carries:
//!
//! * `sqm` — the linear limit (coupling forced to zero);
//! * `preselection` — every propagator is conditioned on the initial state;
//! * `everett` — like preselection with a configurable universal state;
//! * `postselection` — every propagator is conditioned on the final outcome;
//! * `collapse` — outcomes update the boundary instantaneously on a
//!   simultaneity surface;
//! * `causal` — outcomes update the boundary only inside their future light
//!   cone.
//!
//! The [`analysis`] module quantifies the operational consequences
//! (signaling metrics, frame dependence, linear-limit convergence), and
//! [`lattice`] keeps the per-location bookkeeping of which outcomes have
//! reached which degree of freedom.

pub mod analysis;
pub mod dynamics;
pub mod hilbert;
pub mod lattice;
pub mod prescriptions;
pub mod scenario;
pub mod spacetime;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("state is not normalized (norm = {norm:.6e}, tolerance = {tol:.1e})")]
    NotNormalized { norm: f64, tol: f64 },
    #[error("operator is not hermitian (max deviation = {0:.3e})")]
    NotHermitian(f64),
    #[error("basis is not orthonormal/complete (max deviation = {0:.3e})")]
    BadBasis(f64),
    #[error("accuracy failure: {0}")]
    Accuracy(String),
    #[error("trajectory does not cover requested time {0}")]
    CoverageGap(f64),
    #[error("cross-coupling present: {0}")]
    CrossCoupling(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario schema error: {0}")]
    Schema(String),
    #[error("acausal arrangement: {0}")]
    Acausal(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
