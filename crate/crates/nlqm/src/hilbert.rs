//! Dense finite-dimensional Hilbert-space primitives.
//!
//! States and operators live on an explicit tensor-product factorization
//! (`dims`), stored dense with `Complex64` amplitudes in row-major kron
//! order (the last factor varies fastest). Everything is sized for desk
//! scale: total dimension is capped at 2^12.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::{Error, Result};

pub type C64 = Complex64;

/// Largest total dimension we ever materialize densely.
pub const MAX_TOTAL_DIM: usize = 1 << 12;

/// Tolerance below which a state constructor accepts a vector as normalized.
pub const NORM_TOL: f64 = 1e-12;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn total_dim(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::DimensionMismatch(
            "factor dimensions must be non-empty and positive".into(),
        ));
    }
    let total: usize = dims.iter().product();
    if total > MAX_TOTAL_DIM {
        return Err(Error::DimensionMismatch(format!(
            "total dimension {total} exceeds the dense cap {MAX_TOTAL_DIM}"
        )));
    }
    Ok(total)
}

/// A pure state on a factored Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    dims: Vec<usize>,
    amps: Array1<C64>,
}

impl StateVector {
    /// Wraps raw amplitudes without a normalization requirement.
    pub fn new(dims: Vec<usize>, amps: Array1<C64>) -> Result<Self> {
        let total = total_dim(&dims)?;
        if amps.len() != total {
            return Err(Error::DimensionMismatch(format!(
                "amplitude length {} does not match total dimension {total}",
                amps.len()
            )));
        }
        Ok(Self { dims, amps })
    }

    /// Wraps amplitudes that must already be normalized to within [`NORM_TOL`].
    pub fn normalized(dims: Vec<usize>, amps: Array1<C64>) -> Result<Self> {
        let s = Self::new(dims, amps)?;
        let norm = s.norm();
        if (norm - 1.0).abs() >= NORM_TOL {
            return Err(Error::NotNormalized {
                norm,
                tol: NORM_TOL,
            });
        }
        Ok(s)
    }

    /// Computational basis state `|index⟩` on the given factorization.
    pub fn basis_state(dims: Vec<usize>, index: usize) -> Result<Self> {
        let total = total_dim(&dims)?;
        if index >= total {
            return Err(Error::IndexOutOfRange(format!(
                "basis index {index} out of range for dimension {total}"
            )));
        }
        let mut amps = Array1::zeros(total);
        amps[index] = c(1.0, 0.0);
        Self::new(dims, amps)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &Array1<C64> {
        &self.amps
    }

    pub fn into_amps(self) -> Array1<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() < tol
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Returns `self / ‖self‖`; errors on (numerically) zero vectors.
    pub fn unit(&self) -> Result<StateVector> {
        let norm = self.norm();
        if norm < 1e-14 {
            return Err(Error::NotNormalized { norm, tol: 1e-14 });
        }
        let amps = self.amps.mapv(|a| a / norm);
        StateVector::new(self.dims.clone(), amps)
    }

    pub fn scaled(&self, factor: C64) -> StateVector {
        StateVector {
            dims: self.dims.clone(),
            amps: self.amps.mapv(|a| a * factor),
        }
    }

    /// Max-norm distance between amplitude vectors.
    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance between amplitude vectors.
    pub fn distance(&self, other: &StateVector) -> f64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Kronecker product of states; the factor lists concatenate.
pub fn tensor_states(factors: &[&StateVector]) -> Result<StateVector> {
    if factors.is_empty() {
        return Err(Error::DimensionMismatch("tensor of zero states".into()));
    }
    let mut dims = Vec::new();
    for f in factors {
        dims.extend_from_slice(f.dims());
    }
    let total = total_dim(&dims)?;
    let mut amps = Array1::from_elem(1, c(1.0, 0.0));
    for f in factors {
        let mut next = Array1::zeros(amps.len() * f.total_dim());
        for (i, a) in amps.iter().enumerate() {
            for (j, b) in f.amps().iter().enumerate() {
                next[i * f.total_dim() + j] = a * b;
            }
        }
        amps = next;
    }
    debug_assert_eq!(amps.len(), total);
    StateVector::new(dims, amps)
}

/// A dense linear operator on a factored Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    dims: Vec<usize>,
    matrix: Array2<C64>,
}

impl LinearOperator {
    pub fn new(dims: Vec<usize>, matrix: Array2<C64>) -> Result<Self> {
        let total = total_dim(&dims)?;
        if matrix.nrows() != total || matrix.ncols() != total {
            return Err(Error::DimensionMismatch(format!(
                "matrix shape {:?} does not match total dimension {total}",
                matrix.dim()
            )));
        }
        Ok(Self { dims, matrix })
    }

    pub fn identity(dims: Vec<usize>) -> Result<Self> {
        let total = total_dim(&dims)?;
        Ok(Self {
            dims,
            matrix: Array2::eye(total),
        })
    }

    pub fn zero(dims: Vec<usize>) -> Result<Self> {
        let total = total_dim(&dims)?;
        Ok(Self {
            dims,
            matrix: Array2::zeros((total, total)),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<C64> {
        self.matrix
    }

    pub fn apply(&self, state: &StateVector) -> Result<StateVector> {
        if state.total_dim() != self.total_dim() {
            return Err(Error::DimensionMismatch(format!(
                "operator dimension {} vs state dimension {}",
                self.total_dim(),
                state.total_dim()
            )));
        }
        StateVector::new(state.dims().to_vec(), self.matrix.dot(state.amps()))
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &LinearOperator) -> Result<LinearOperator> {
        if self.total_dim() != other.total_dim() {
            return Err(Error::DimensionMismatch(
                "operator composition dimension mismatch".into(),
            ));
        }
        LinearOperator::new(self.dims.clone(), self.matrix.dot(&other.matrix))
    }

    pub fn dagger(&self) -> LinearOperator {
        let matrix = self.matrix.t().mapv(|a| a.conj());
        LinearOperator {
            dims: self.dims.clone(),
            matrix,
        }
    }

    pub fn add(&self, other: &LinearOperator) -> Result<LinearOperator> {
        if self.total_dim() != other.total_dim() {
            return Err(Error::DimensionMismatch(
                "operator sum dimension mismatch".into(),
            ));
        }
        LinearOperator::new(self.dims.clone(), &self.matrix + &other.matrix)
    }

    pub fn scale(&self, factor: C64) -> LinearOperator {
        LinearOperator {
            dims: self.dims.clone(),
            matrix: self.matrix.mapv(|a| a * factor),
        }
    }

    /// Entry-wise max-norm deviation from hermiticity, `‖M − M†‖_max`.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.total_dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let d = (self.matrix[[i, j]] - self.matrix[[j, i]].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_defect() < tol
    }

    /// Entry-wise max-norm distance to another operator.
    pub fn max_abs_diff(&self, other: &LinearOperator) -> f64 {
        self.matrix
            .iter()
            .zip(other.matrix.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `‖U†U − I‖_max`; zero for exactly unitary operators.
    pub fn unitarity_defect(&self) -> f64 {
        let gram = self.dagger().matrix.dot(&self.matrix);
        let n = self.total_dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) };
                worst = worst.max((gram[[i, j]] - expect).norm());
            }
        }
        worst
    }
}

/// Kronecker product of operators; the factor lists concatenate.
pub fn tensor_ops(factors: &[&LinearOperator]) -> Result<LinearOperator> {
    if factors.is_empty() {
        return Err(Error::DimensionMismatch("tensor of zero operators".into()));
    }
    let mut dims = Vec::new();
    for f in factors {
        dims.extend_from_slice(f.dims());
    }
    total_dim(&dims)?;
    let mut acc = Array2::from_elem((1, 1), c(1.0, 0.0));
    for f in factors {
        acc = ndarray::linalg::kron(&acc, f.matrix());
    }
    LinearOperator::new(dims, acc)
}

/// Lifts a factor-local operator to the full space: identity on every other
/// factor, `op` on factor `target`.
pub fn embed(op: &LinearOperator, target: usize, dims: &[usize]) -> Result<LinearOperator> {
    if target >= dims.len() {
        return Err(Error::IndexOutOfRange(format!(
            "target factor {target} out of range for {} factors",
            dims.len()
        )));
    }
    if op.total_dim() != dims[target] {
        return Err(Error::DimensionMismatch(format!(
            "operator dimension {} does not match factor {target} dimension {}",
            op.total_dim(),
            dims[target]
        )));
    }
    let mut factors: Vec<LinearOperator> = Vec::with_capacity(dims.len());
    for (i, &d) in dims.iter().enumerate() {
        if i == target {
            factors.push(LinearOperator::new(vec![d], op.matrix().clone())?);
        } else {
            factors.push(LinearOperator::identity(vec![d])?);
        }
    }
    let refs: Vec<&LinearOperator> = factors.iter().collect();
    let mut out = tensor_ops(&refs)?;
    out.dims = dims.to_vec();
    Ok(out)
}

/// `⟨ψ|Ô|ψ⟩`. Real to within rounding when `op` is Hermitian.
pub fn expectation(state: &StateVector, op: &LinearOperator) -> Result<C64> {
    let applied = op.apply(state)?;
    Ok(state.inner(&applied))
}

/// An orthonormal measurement basis for one factor (or for the joint space
/// when `subsystem` is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    subsystem: Option<usize>,
    vectors: Vec<Array1<C64>>,
}

impl Basis {
    /// Validates orthonormality and completeness to within `1e-12`.
    pub fn new(subsystem: Option<usize>, vectors: Vec<Array1<C64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::BadBasis(f64::INFINITY));
        }
        let dim = vectors[0].len();
        if vectors.len() != dim || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch(
                "basis must contain exactly `dim` vectors of length `dim`".into(),
            ));
        }
        let mut worst = 0.0f64;
        for (i, vi) in vectors.iter().enumerate() {
            for (j, vj) in vectors.iter().enumerate() {
                let overlap: C64 = vi.iter().zip(vj.iter()).map(|(a, b)| a.conj() * b).sum();
                let expect = if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) };
                worst = worst.max((overlap - expect).norm());
            }
        }
        if worst >= 1e-12 {
            return Err(Error::BadBasis(worst));
        }
        Ok(Self { subsystem, vectors })
    }

    /// Planar rotation basis for a qubit: `{cosθ|0⟩+sinθ|1⟩, −sinθ|0⟩+cosθ|1⟩}`.
    pub fn rotation(subsystem: Option<usize>, theta: f64) -> Self {
        let v0 = Array1::from(vec![c(theta.cos(), 0.0), c(theta.sin(), 0.0)]);
        let v1 = Array1::from(vec![c(-theta.sin(), 0.0), c(theta.cos(), 0.0)]);
        Self {
            subsystem,
            vectors: vec![v0, v1],
        }
    }

    /// Computational basis of the given dimension.
    pub fn computational(subsystem: Option<usize>, dim: usize) -> Self {
        let vectors = (0..dim)
            .map(|k| {
                let mut v = Array1::zeros(dim);
                v[k] = c(1.0, 0.0);
                v
            })
            .collect();
        Self { subsystem, vectors }
    }

    /// Completes a unit vector to an orthonormal basis (the vector becomes
    /// outcome 0) via a Householder reflection mapping `e₀ ↦ v`.
    pub fn from_state(subsystem: Option<usize>, v: &Array1<C64>) -> Result<Self> {
        let dim = v.len();
        let norm = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() >= 1e-10 {
            return Err(Error::NotNormalized { norm, tol: 1e-10 });
        }
        let v = v.mapv(|a| a / norm);
        // Householder: H = I − 2ww†/‖w‖², w = v − e^{iφ}e₀ with the phase of v₀,
        // then rescale column 0 so it equals v exactly.
        let phase = if v[0].norm() > 1e-14 {
            v[0] / v[0].norm()
        } else {
            c(1.0, 0.0)
        };
        let mut w = v.clone();
        w[0] -= phase;
        let wnorm2: f64 = w.iter().map(|a| a.norm_sqr()).sum();
        let mut h: Array2<C64> = Array2::eye(dim);
        if wnorm2 > 1e-28 {
            for i in 0..dim {
                for j in 0..dim {
                    h[[i, j]] -= w[i] * w[j].conj() * 2.0 / wnorm2;
                }
            }
        }
        // Column k of H·diag(phase,1,..) is an orthonormal set with column 0 ∝ v.
        let mut vectors = Vec::with_capacity(dim);
        for k in 0..dim {
            let mut col = Array1::zeros(dim);
            for i in 0..dim {
                col[i] = h[[i, k]] * if k == 0 { phase } else { c(1.0, 0.0) };
            }
            vectors.push(col);
        }
        vectors[0] = v;
        Basis::new(subsystem, vectors)
    }

    pub fn subsystem(&self) -> Option<usize> {
        self.subsystem
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, k: usize) -> Result<StateVector> {
        if k >= self.vectors.len() {
            return Err(Error::IndexOutOfRange(format!(
                "basis outcome {k} out of range for {} outcomes",
                self.vectors.len()
            )));
        }
        StateVector::new(vec![self.dim()], self.vectors[k].clone())
    }

    /// Rank-1 projector `|v_k⟩⟨v_k|` on the basis's own space.
    pub fn projector_local(&self, k: usize) -> Result<LinearOperator> {
        if k >= self.vectors.len() {
            return Err(Error::IndexOutOfRange(format!(
                "basis outcome {k} out of range for {} outcomes",
                self.vectors.len()
            )));
        }
        let dim = self.dim();
        let v = &self.vectors[k];
        let mut m = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                m[[i, j]] = v[i] * v[j].conj();
            }
        }
        LinearOperator::new(vec![dim], m)
    }
}

/// Rank-1 projector onto outcome `k`, embedded into the full space described
/// by `dims` (identity on untargeted factors).
pub fn projector(basis: &Basis, k: usize, dims: &[usize]) -> Result<LinearOperator> {
    let local = basis.projector_local(k)?;
    match basis.subsystem() {
        Some(target) => embed(&local, target, dims),
        None => {
            let total: usize = dims.iter().product();
            if local.total_dim() != total {
                return Err(Error::DimensionMismatch(format!(
                    "joint basis dimension {} does not match total dimension {total}",
                    local.total_dim()
                )));
            }
            LinearOperator::new(dims.to_vec(), local.into_matrix())
        }
    }
}

// --- common single-qubit constants -----------------------------------------

pub fn sigma_x() -> LinearOperator {
    LinearOperator::new(
        vec![2],
        ndarray::arr2(&[[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]]),
    )
    .expect("static 2x2")
}

pub fn sigma_y() -> LinearOperator {
    LinearOperator::new(
        vec![2],
        ndarray::arr2(&[[c(0.0, 0.0), c(0.0, -1.0)], [c(0.0, 1.0), c(0.0, 0.0)]]),
    )
    .expect("static 2x2")
}

pub fn sigma_z() -> LinearOperator {
    LinearOperator::new(
        vec![2],
        ndarray::arr2(&[[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]]),
    )
    .expect("static 2x2")
}

/// Occupation of the upper level, `|0⟩⟨0|` in this crate's ordering.
pub fn number_op() -> LinearOperator {
    LinearOperator::new(
        vec![2],
        ndarray::arr2(&[[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0)]]),
    )
    .expect("static 2x2")
}

pub fn ket_up() -> StateVector {
    StateVector::basis_state(vec![2], 0).expect("static qubit")
}

pub fn ket_down() -> StateVector {
    StateVector::basis_state(vec![2], 1).expect("static qubit")
}

pub fn ket_plus() -> StateVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    StateVector::new(vec![2], ndarray::arr1(&[c(s, 0.0), c(s, 0.0)])).expect("static qubit")
}

/// `(|00⟩ + |11⟩)/√2` on two qubits.
pub fn bell_state() -> StateVector {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    StateVector::new(
        vec![2, 2],
        ndarray::arr1(&[c(s, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(s, 0.0)]),
    )
    .expect("static bell")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn tensor_of_up_up_is_first_computational_vector() {
        let up = ket_up();
        let t = tensor_states(&[&up, &up]).unwrap();
        assert_eq!(t.dims(), &[2, 2]);
        let expect = [c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        for (a, e) in t.amps().iter().zip(expect.iter()) {
            assert!((a - e).norm() < 1e-15);
        }
    }

    #[test]
    fn tensor_norm_is_product_of_norms() {
        let a = StateVector::new(vec![2], ndarray::arr1(&[c(0.6, 0.0), c(0.0, 0.8)])).unwrap();
        let b = StateVector::new(vec![3], ndarray::arr1(&[c(0.5, 0.5), c(0.5, 0.0), c(0.0, 0.5)]))
            .unwrap();
        let t = tensor_states(&[&a, &b]).unwrap();
        assert_close(t.norm(), a.norm() * b.norm(), 1e-12);
    }

    #[test]
    fn embed_identity_everywhere_is_identity() {
        let id2 = LinearOperator::identity(vec![2]).unwrap();
        let e = embed(&id2, 1, &[2, 2, 2]).unwrap();
        let full = LinearOperator::identity(vec![2, 2, 2]).unwrap();
        assert!(e.max_abs_diff(&full) < 1e-15);
    }

    #[test]
    fn embedded_sigma_z_acts_on_its_factor_only() {
        let sz = sigma_z();
        let e = embed(&sz, 0, &[2, 2]).unwrap();
        // |↓↑⟩ picks up the -1 eigenvalue of the first factor.
        let down_up = tensor_states(&[&ket_down(), &ket_up()]).unwrap();
        let out = e.apply(&down_up).unwrap();
        assert!(out.max_abs_diff(&down_up.scaled(c(-1.0, 0.0))) < 1e-15);
    }

    #[test]
    fn x_basis_projector_is_all_quarters_matrix_entrywise_half() {
        let basis = Basis::rotation(Some(0), std::f64::consts::FRAC_PI_4);
        let p = basis.projector_local(0).unwrap();
        for entry in p.matrix().iter() {
            assert!((entry - c(0.5, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn projectors_are_idempotent_and_hermitian() {
        let basis = Basis::rotation(Some(1), 0.3);
        for k in 0..2 {
            let p = projector(&basis, k, &[2, 2]).unwrap();
            assert!(p.is_hermitian(1e-12));
            let p2 = p.compose(&p).unwrap();
            assert!(p2.max_abs_diff(&p) < 1e-12);
        }
    }

    #[test]
    fn projector_family_sums_to_identity() {
        let basis = Basis::rotation(Some(0), 1.234);
        let sum = projector(&basis, 0, &[2, 2])
            .unwrap()
            .add(&projector(&basis, 1, &[2, 2]).unwrap())
            .unwrap();
        let id = LinearOperator::identity(vec![2, 2]).unwrap();
        assert!(sum.max_abs_diff(&id) < 1e-12);
    }

    #[test]
    fn expectation_of_sigma_z_on_up_is_one() {
        let e = expectation(&ket_up(), &sigma_z()).unwrap();
        assert!((e - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn expectation_of_hermitian_is_real() {
        let h = LinearOperator::new(
            vec![2],
            ndarray::arr2(&[[c(0.3, 0.0), c(0.1, -0.7)], [c(0.1, 0.7), c(-1.2, 0.0)]]),
        )
        .unwrap();
        assert!(h.is_hermitian(1e-12));
        let psi = StateVector::new(
            vec![2],
            ndarray::arr1(&[c(0.36, 0.48), c(0.6, 0.48)]),
        )
        .unwrap()
        .unit()
        .unwrap();
        let e = expectation(&psi, &h).unwrap();
        assert!(e.im.abs() < 1e-12);
    }

    #[test]
    fn basis_completion_contains_the_seed_state() {
        let v = ndarray::arr1(&[c(0.5, 0.1), c(-0.3, 0.2), c(0.4, 0.4), c(0.1, -0.5)]);
        let n = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        let v = v.mapv(|a| a / n);
        let basis = Basis::from_state(None, &v).unwrap();
        assert_eq!(basis.len(), 4);
        let v0 = basis.vector(0).unwrap();
        for (a, b) in v0.amps().iter().zip(v.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn bell_state_is_normalized() {
        assert!(bell_state().is_normalized(1e-12));
    }

    #[test]
    fn rejects_oversized_spaces() {
        assert!(StateVector::basis_state(vec![2; 13], 0).is_err());
    }

    // --- property tests -----------------------------------------------------

    fn arb_unit2() -> impl Strategy<Value = Array1<C64>> {
        (
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
            -1.0f64..1.0,
        )
            .prop_filter_map("nonzero", |(a, b, cc, d)| {
                let v = ndarray::arr1(&[c(a, b), c(cc, d)]);
                let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                if n < 1e-3 {
                    None
                } else {
                    Some(v.mapv(|z| z / n))
                }
            })
    }

    fn arb_op2() -> impl Strategy<Value = LinearOperator> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 4).prop_map(|entries| {
            let m = Array2::from_shape_vec(
                (2, 2),
                entries.into_iter().map(|(re, im)| c(re, im)).collect(),
            )
            .unwrap();
            LinearOperator::new(vec![2], m).unwrap()
        })
    }

    proptest! {
        #[test]
        fn tensor_is_associative_up_to_four_factors(
            v in proptest::collection::vec(arb_unit2(), 3..=4)
        ) {
            let states: Vec<StateVector> =
                v.into_iter().map(|a| StateVector::new(vec![2], a).unwrap()).collect();
            let refs: Vec<&StateVector> = states.iter().collect();
            let flat = tensor_states(&refs).unwrap();
            // Left-fold pairing.
            let mut acc = states[0].clone();
            for s in &states[1..] {
                acc = tensor_states(&[&acc, s]).unwrap();
            }
            prop_assert!(flat.max_abs_diff(&acc) < 1e-12);
        }

        #[test]
        fn embeds_on_distinct_factors_commute(a in arb_op2(), b in arb_op2()) {
            let dims = [2, 2, 2];
            let ea = embed(&a, 0, &dims).unwrap();
            let eb = embed(&b, 2, &dims).unwrap();
            let ab = ea.compose(&eb).unwrap();
            let ba = eb.compose(&ea).unwrap();
            prop_assert!(ab.max_abs_diff(&ba) < 1e-12);
        }

        #[test]
        fn rotation_projectors_complete(theta in -3.2f64..3.2) {
            let basis = Basis::rotation(Some(0), theta);
            let sum = basis.projector_local(0).unwrap()
                .add(&basis.projector_local(1).unwrap()).unwrap();
            let id = LinearOperator::identity(vec![2]).unwrap();
            prop_assert!(sum.max_abs_diff(&id) < 1e-12);
        }
    }
}
