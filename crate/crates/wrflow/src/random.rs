//! Seeded random constructors for instances: Gaussian matrices, Haar-style
//! unitaries, random PSD roots, and random projection families.
//!
//! Everything here is a pure function of the supplied RNG state, so instances
//! are reproducible from a seed alone.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WrError};
use crate::operator::{hermitize, CMatrix, CVector, PsdOperator};

/// A fresh deterministic RNG for the given seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal deviate via Box-Muller.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Complex standard normal deviate (independent real and imaginary parts).
pub fn complex_gaussian(rng: &mut impl Rng) -> Complex64 {
    Complex64::new(gaussian(rng), gaussian(rng))
}

/// Matrix of independent complex standard normals.
pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> CMatrix {
    let entries: Vec<Complex64> = (0..rows * cols).map(|_| complex_gaussian(rng)).collect();
    CMatrix::from_vec(rows, cols, entries)
}

/// Random unit vector, uniform on the sphere.
pub fn random_unit_vector(rng: &mut impl Rng, dim: usize) -> CVector {
    loop {
        let v = CVector::from_fn(dim, |_, _| complex_gaussian(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / Complex64::from(n);
        }
    }
}

/// `dim x cols` matrix with orthonormal columns, Haar-distributed on the
/// Stiefel manifold (QR of a Gaussian matrix with phase-corrected diagonal).
pub fn random_orthonormal_columns(rng: &mut impl Rng, dim: usize, cols: usize) -> Result<CMatrix> {
    if cols > dim {
        return Err(WrError::DimensionMismatch {
            expected: dim,
            got: cols,
        });
    }
    if cols == 0 {
        return Ok(CMatrix::zeros(dim, 0));
    }
    let g = gaussian_matrix(rng, dim, cols);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    // Fix the column phases so the factorization has a positive-diagonal R;
    // this makes the distribution exactly Haar rather than QR-dependent.
    for j in 0..cols {
        let d = r[(j, j)];
        let norm = d.norm();
        if norm > 0.0 {
            let phase = d / Complex64::from(norm);
            for e in q.column_mut(j).iter_mut() {
                *e *= phase.conj();
            }
        }
    }
    Ok(q)
}

/// Haar-distributed unitary on a `dim`-dimensional space.
pub fn haar_unitary(rng: &mut impl Rng, dim: usize) -> Result<CMatrix> {
    random_orthonormal_columns(rng, dim, dim)
}

/// Random orthogonal projection of the given rank.
pub fn random_projection(rng: &mut impl Rng, dim: usize, rank: usize) -> Result<CMatrix> {
    let q = random_orthonormal_columns(rng, dim, rank)?;
    Ok(hermitize(&(&q * q.adjoint())))
}

/// Random PSD operator of the given rank, rescaled to the requested trace.
pub fn random_psd(rng: &mut impl Rng, dim: usize, rank: usize, trace: f64) -> Result<PsdOperator> {
    if rank == 0 || rank > dim {
        return Err(WrError::InvalidConfig(format!(
            "psd rank must be in 1..={dim}, got {rank}"
        )));
    }
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(WrError::InvalidConfig(format!(
            "psd trace must be positive and finite, got {trace}"
        )));
    }
    let g = gaussian_matrix(rng, dim, rank);
    let mut m = hermitize(&(&g * g.adjoint()));
    let t: f64 = m.diagonal().iter().map(|e| e.re).sum();
    if t <= 0.0 {
        return Err(WrError::InvalidConfig(
            "degenerate random psd draw (zero trace)".into(),
        ));
    }
    m *= Complex64::from(trace / t);
    PsdOperator::validate(m)
}

/// Splitting family from a random unitary: columns are partitioned into `m`
/// contiguous blocks and each block spans one projection. The projections sum
/// exactly to the identity.
pub fn random_subspace_split(rng: &mut impl Rng, dim: usize, m: usize) -> Result<Vec<CMatrix>> {
    if m < 2 {
        return Err(WrError::InvalidConfig(format!(
            "splitting family needs at least 2 parts, got {m}"
        )));
    }
    let u = haar_unitary(rng, dim)?;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let lo = j * dim / m;
        let hi = (j + 1) * dim / m;
        let block = u.columns(lo, hi - lo);
        out.push(hermitize(&(&block * block.adjoint())));
    }
    Ok(out)
}

/// Unstructured random projections of the given ranks. When `blind > 0`, all
/// projections are confined to the first `dim - blind` coordinates, leaving
/// the last `blind` coordinates untouched by every projection (so a root with
/// energy there has zero leakage).
pub fn random_unstructured(
    rng: &mut impl Rng,
    dim: usize,
    ranks: &[usize],
    blind: usize,
) -> Result<Vec<CMatrix>> {
    if ranks.len() < 2 {
        return Err(WrError::InvalidConfig(format!(
            "projection family needs at least 2 members, got {}",
            ranks.len()
        )));
    }
    if blind >= dim {
        return Err(WrError::InvalidConfig(format!(
            "blind coordinate count {blind} must be below the dimension {dim}"
        )));
    }
    let active = dim - blind;
    let mut out = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        if rank > active {
            return Err(WrError::InvalidConfig(format!(
                "projection rank {rank} exceeds the active dimension {active}"
            )));
        }
        let q_small = random_orthonormal_columns(rng, active, rank)?;
        let mut q = CMatrix::zeros(dim, rank);
        q.view_mut((0, 0), (active, rank)).copy_from(&q_small);
        out.push(hermitize(&(&q * q.adjoint())));
    }
    Ok(out)
}
