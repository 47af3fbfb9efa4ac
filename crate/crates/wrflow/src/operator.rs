//! Validated Hermitian/PSD operators on finite-dimensional complex space,
//! the one-step weighted-residual update, and the leakage constant of a
//! projection family.
//!
//! All matrices are dense `nalgebra` matrices over `Complex64`. Validation is
//! tolerance-based: Hermitian symmetry and projection idempotency are checked
//! relative to the Frobenius norm, positive semidefiniteness relative to the
//! operator norm. Eigenvalues in the band `[-EPS_PSD * ||M||_op, 0)` are
//! clamped to zero silently; anything below that band is an error, not noise.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Result, WrError};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Tolerance for Hermitian symmetry checks, relative to the Frobenius norm.
pub const EPS_HERM: f64 = 1e-10;
/// Tolerance for projection idempotency checks, relative to the Frobenius norm.
pub const EPS_PROJ: f64 = 1e-10;
/// Width of the negative-eigenvalue band that is clamped to zero, relative to
/// the operator norm.
pub const EPS_PSD: f64 = 1e-10;
/// Tolerance for reconstruction identities (e.g. `sqrt * sqrt ~ matrix`),
/// relative to the Frobenius norm.
pub const EPS_RECON: f64 = 1e-8;
/// Relative eigenvalue threshold used when extracting the energy support.
pub const RANK_TOL: f64 = 1e-12;

pub(crate) fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * Complex64::new(0.5, 0.0)
}

fn check_finite(m: &CMatrix) -> Result<()> {
    if m.iter().all(|e| e.re.is_finite() && e.im.is_finite()) {
        Ok(())
    } else {
        Err(WrError::InvalidConfig(
            "matrix has non-finite entries".into(),
        ))
    }
}

fn check_square(m: &CMatrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(WrError::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(WrError::InvalidConfig("dimension must be positive".into()));
    }
    Ok(m.nrows())
}

fn check_hermitian(m: &CMatrix, tol: f64) -> Result<()> {
    let defect = (m - m.adjoint()).norm();
    if defect > tol * m.norm() {
        return Err(WrError::NotHermitian { defect, tol });
    }
    Ok(())
}

/// Real quadratic form `<x, M x>` of a (numerically) Hermitian matrix.
pub fn quadratic_form(m: &CMatrix, x: &CVector) -> f64 {
    x.dotc(&(m * x)).re
}

/// Checks that `p` is an orthogonal projection: Hermitian and idempotent
/// within `tol`, relative to `max(1, ||p||_F)`.
pub fn validate_projection(p: &CMatrix, tol: f64) -> Result<()> {
    check_square(p)?;
    check_finite(p)?;
    let scale = p.norm().max(1.0);
    let herm_defect = (p - p.adjoint()).norm();
    if herm_defect > tol * scale {
        return Err(WrError::NotHermitian {
            defect: herm_defect,
            tol,
        });
    }
    let idem_defect = (p * p - p).norm();
    if idem_defect > tol * scale {
        return Err(WrError::NotProjection {
            defect: idem_defect,
            tol,
        });
    }
    Ok(())
}

/// A validated positive semidefinite operator together with its spectral data.
///
/// `matrix` stores the Hermitian symmetrization of the input, not a
/// re-synthesis from clamped eigenvalues, so exact algebraic identities between
/// stored matrices survive as written. The square root and the (clamped,
/// descending) eigenvalues are computed once at construction.
#[derive(Clone, Debug)]
pub struct PsdOperator {
    matrix: CMatrix,
    sqrt: CMatrix,
    eigenvalues: Vec<f64>,
    eigenvectors: CMatrix,
    trace: f64,
}

impl PsdOperator {
    /// Validates `m` as PSD with the default clamping band [`EPS_PSD`].
    pub fn validate(m: CMatrix) -> Result<Self> {
        Self::validate_with(m, EPS_PSD)
    }

    /// Validates `m` as PSD. Eigenvalues in `[-tol * ||m||_op, 0)` are clamped
    /// to zero; an eigenvalue below the band yields [`WrError::NotPsd`].
    pub fn validate_with(m: CMatrix, tol: f64) -> Result<Self> {
        Self::validate_with_floor(m, tol, 0.0)
    }

    /// Like [`validate_with`], but the clamping band never shrinks below the
    /// absolute `floor`. Flow steps use the parent's scale as the floor:
    /// rounding noise in `r^{1/2} p r^{1/2}` is relative to the parent norm,
    /// which can dwarf a nearly-extinct child's own norm.
    ///
    /// [`validate_with`]: Self::validate_with
    pub fn validate_with_floor(m: CMatrix, tol: f64, floor: f64) -> Result<Self> {
        let dim = check_square(&m)?;
        check_finite(&m)?;
        check_hermitian(&m, EPS_HERM)?;
        let h = hermitize(&m);

        let eig = nalgebra::linalg::SymmetricEigen::new(h.clone());
        let raw = eig.eigenvalues;
        let op_norm = raw.iter().fold(0.0_f64, |a, l| a.max(l.abs()));
        let band = (tol * op_norm).max(floor);
        let mut clamped = Vec::with_capacity(dim);
        for &l in raw.iter() {
            if l < -band {
                return Err(WrError::NotPsd { eigenvalue: l, tol });
            }
            clamped.push(l.max(0.0));
        }

        // Deterministic descending order; stable for repeated eigenvalues.
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| clamped[b].total_cmp(&clamped[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| clamped[i]).collect();
        let eigenvectors = CMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);

        // The square root keeps only the spectrum above the clamping band.
        // Sub-band junk would otherwise be amplified from eps to sqrt(eps)
        // amplitude and leak spurious directions into every flow step.
        let mut scaled = eigenvectors.clone();
        for (i, &l) in eigenvalues.iter().enumerate() {
            let s = if l > band { l.sqrt() } else { 0.0 };
            for e in scaled.column_mut(i).iter_mut() {
                *e *= s;
            }
        }
        let sqrt = hermitize(&(&scaled * eigenvectors.adjoint()));

        let trace = h.diagonal().iter().map(|e| e.re).sum();
        Ok(Self {
            matrix: h,
            sqrt,
            eigenvalues,
            eigenvectors,
            trace,
        })
    }

    /// The zero operator on a `dim`-dimensional space.
    pub fn zero(dim: usize) -> Self {
        Self {
            matrix: CMatrix::zeros(dim, dim),
            sqrt: CMatrix::zeros(dim, dim),
            eigenvalues: vec![0.0; dim],
            eigenvectors: CMatrix::identity(dim, dim),
            trace: 0.0,
        }
    }

    /// The identity operator on a `dim`-dimensional space.
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: CMatrix::identity(dim, dim),
            sqrt: CMatrix::identity(dim, dim),
            eigenvalues: vec![1.0; dim],
            eigenvectors: CMatrix::identity(dim, dim),
            trace: dim as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// The PSD square root, reconstructed from the clamped spectrum.
    pub fn sqrt(&self) -> &CMatrix {
        &self.sqrt
    }

    /// Clamped eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Orthonormal eigenvector columns, ordered to match [`eigenvalues`].
    ///
    /// [`eigenvalues`]: Self::eigenvalues
    pub fn eigenvectors(&self) -> &CMatrix {
        &self.eigenvectors
    }

    /// Trace of the stored matrix (sum of real diagonal entries).
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Operator norm (largest clamped eigenvalue).
    pub fn op_norm(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Real quadratic form `<x, M x>`.
    pub fn quadratic_form(&self, x: &CVector) -> f64 {
        quadratic_form(&self.matrix, x)
    }
}

/// One step of the weighted-residual flow: maps `r` to
/// `r^{1/2} (I - p) r^{1/2}`, validated as PSD.
pub fn wr_update(r: &PsdOperator, p: &CMatrix) -> Result<PsdOperator> {
    let d = r.dim();
    if p.nrows() != d || p.ncols() != d {
        return Err(WrError::DimensionMismatch {
            expected: d,
            got: p.nrows(),
        });
    }
    let s = r.sqrt();
    let complement = CMatrix::identity(d, d) - p;
    let child = hermitize(&(s * complement * s));
    PsdOperator::validate_with_floor(child, EPS_PSD, EPS_PSD * r.op_norm())
}

/// The dissipated term of one step: `r^{1/2} p r^{1/2}`, validated as PSD.
pub fn dissipated(r: &PsdOperator, p: &CMatrix) -> Result<PsdOperator> {
    let d = r.dim();
    if p.nrows() != d || p.ncols() != d {
        return Err(WrError::DimensionMismatch {
            expected: d,
            got: p.nrows(),
        });
    }
    let s = r.sqrt();
    let term = hermitize(&(s * p * s));
    PsdOperator::validate_with_floor(term, EPS_PSD, EPS_PSD * r.op_norm())
}

/// Orthonormal basis (as matrix columns) of the energy support of `r0`: the
/// span of eigenvectors with eigenvalue above `rank_tol * lambda_max`. The
/// result has zero columns when `r0` is (numerically) zero.
pub fn energy_support_basis(r0: &PsdOperator, rank_tol: f64) -> CMatrix {
    let lmax = r0.op_norm();
    let dim = r0.dim();
    if lmax <= 0.0 {
        return CMatrix::zeros(dim, 0);
    }
    let threshold = rank_tol * lmax;
    let rank = r0
        .eigenvalues()
        .iter()
        .take_while(|&&l| l > threshold)
        .count();
    r0.eigenvectors().columns(0, rank).into_owned()
}

/// Smallest eigenvalue of the compression of `sum_j p_j` to the column span
/// of `h0_basis` (assumed orthonormal). Clamped at zero.
pub fn leakage_alpha(projections: &[CMatrix], h0_basis: &CMatrix) -> Result<f64> {
    if h0_basis.ncols() == 0 {
        return Err(WrError::EmptyBasis);
    }
    let d = h0_basis.nrows();
    let mut sum = CMatrix::zeros(d, d);
    for p in projections {
        if p.nrows() != d || p.ncols() != d {
            return Err(WrError::DimensionMismatch {
                expected: d,
                got: p.nrows(),
            });
        }
        sum += p;
    }
    let compressed = hermitize(&(h0_basis.adjoint() * sum * h0_basis));
    let eig = nalgebra::linalg::SymmetricEigen::new(compressed);
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &l| a.min(l));
    Ok(min.max(0.0))
}

/// A finite family of orthogonal projections bound to a root operator, with
/// the derived leakage constant and energy-support data.
#[derive(Clone, Debug)]
pub struct ProjectionFamily {
    dim: usize,
    projections: Vec<CMatrix>,
    alpha: f64,
    h0_basis: CMatrix,
    splitting_on_h0: bool,
}

impl ProjectionFamily {
    /// Validates the projections and computes the leakage constant and
    /// splitting flag relative to the energy support of `root`.
    ///
    /// A zero root has an empty energy support; by convention it gets
    /// `alpha = 0` and `splitting_on_h0 = false`.
    pub fn for_root(projections: Vec<CMatrix>, root: &PsdOperator, rank_tol: f64) -> Result<Self> {
        let dim = root.dim();
        if projections.is_empty() {
            return Err(WrError::InvalidConfig(
                "projection family must be nonempty".into(),
            ));
        }
        if projections.len() > u8::MAX as usize {
            return Err(WrError::InvalidConfig(format!(
                "projection family size {} exceeds the letter alphabet limit {}",
                projections.len(),
                u8::MAX
            )));
        }
        for p in &projections {
            if p.nrows() != dim || p.ncols() != dim {
                return Err(WrError::DimensionMismatch {
                    expected: dim,
                    got: p.nrows(),
                });
            }
            validate_projection(p, EPS_PROJ)?;
        }
        let h0_basis = energy_support_basis(root, rank_tol);
        let (alpha, splitting_on_h0) = if h0_basis.ncols() == 0 {
            (0.0, false)
        } else {
            let alpha = leakage_alpha(&projections, &h0_basis)?;
            let k = h0_basis.ncols();
            let mut sum = CMatrix::zeros(dim, dim);
            for p in &projections {
                sum += p;
            }
            let compressed = h0_basis.adjoint() * sum * &h0_basis;
            let defect = (compressed - CMatrix::identity(k, k)).norm();
            (alpha, defect <= 1e-10 * (k as f64).sqrt().max(1.0))
        };
        Ok(Self {
            dim,
            projections,
            alpha,
            h0_basis,
            splitting_on_h0,
        })
    }

    /// Number of projections (the branching factor `m`).
    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Projection by zero-based index.
    pub fn projection(&self, idx: usize) -> &CMatrix {
        &self.projections[idx]
    }

    pub fn projections(&self) -> &[CMatrix] {
        &self.projections
    }

    /// Resolves a one-based letter to its projection.
    pub fn projection_for_letter(&self, letter: u8) -> Result<&CMatrix> {
        let m = self.len();
        if letter == 0 || letter as usize > m {
            return Err(WrError::InvalidLetter { letter, m });
        }
        Ok(&self.projections[letter as usize - 1])
    }

    /// Leakage constant: smallest eigenvalue of the projection sum compressed
    /// to the energy support of the bound root.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Orthonormal basis of the root's energy support (may have zero columns).
    pub fn h0_basis(&self) -> &CMatrix {
        &self.h0_basis
    }

    /// Whether the projections sum to the identity on the energy support
    /// (within 1e-10).
    pub fn splitting_on_h0(&self) -> bool {
        self.splitting_on_h0
    }

    /// Per-step decay factor `1 - alpha / m` for expected branch energies.
    pub fn contraction_factor(&self) -> f64 {
        1.0 - self.alpha / self.len() as f64
    }

    /// Sum of the projections.
    pub fn projection_sum(&self) -> CMatrix {
        let mut sum = CMatrix::zeros(self.dim, self.dim);
        for p in &self.projections {
            sum += p;
        }
        sum
    }
}
