//! Frame atoms harvested along sampled branches.
//!
//! Each step of a branch dissipates a PSD operator; scaling its significant
//! eigenvectors by the square roots of their eigenvalues yields atoms. Along
//! a branch whose residual has died out, the atoms reproduce the root
//! operator: their frame operator approximates `R_0`, their span approximates
//! its range, and every probe satisfies a Parseval-type identity up to the
//! residual left at the stopping point.

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, WrError};
use crate::operator::{hermitize, CMatrix, CVector, PsdOperator};
use crate::sampler::BranchSample;
use crate::tree::Word;

/// Default relative eigenvalue threshold below which a dissipated direction
/// is not turned into an atom.
pub const DEFAULT_ATOM_TOL: f64 = 1e-12;

/// Relative singular-value cutoff when computing the rank of the atom span.
pub const SPAN_RANK_TOL: f64 = 1e-8;

/// One extracted atom: an eigenvector of a step's dissipated operator scaled
/// by the square root of its eigenvalue.
#[derive(Clone, Debug)]
pub struct FrameAtom {
    /// The atom vector, with the phase fixed so its largest-magnitude
    /// component is real and positive.
    pub vector: CVector,
    /// One-based step index along the branch.
    pub step: usize,
    /// Position within the step's spectrum (0 = largest eigenvalue).
    pub rank_index: usize,
    /// Eigenvalue of the dissipated operator this atom came from.
    pub eigenvalue: f64,
    /// The word of the node whose incoming step dissipated this atom.
    pub source_word: Word,
}

/// All atoms of one branch plus the bookkeeping needed to verify them.
#[derive(Clone, Debug)]
pub struct AtomSystem {
    /// Ordered by step, then by descending eigenvalue within a step.
    pub atoms: Vec<FrameAtom>,
    /// Residual trace left when the branch stopped.
    pub residual_trace_at_stop: f64,
    /// Trace of the root operator (the scale for `atom_tol`).
    pub root_trace: f64,
    /// Total eigenvalue mass dropped by the atom threshold.
    pub truncated_mass: f64,
    pub atom_tol: f64,
}

impl AtomSystem {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Atom vectors as the columns of a `dim x n_atoms` matrix.
    pub fn atom_matrix(&self, dim: usize) -> CMatrix {
        CMatrix::from_fn(dim, self.atoms.len(), |i, j| self.atoms[j].vector[i])
    }
}

fn fix_phase(mut v: CVector) -> CVector {
    let mut best = 0usize;
    let mut best_norm = 0.0;
    for (i, e) in v.iter().enumerate() {
        let n = e.norm();
        if n > best_norm {
            best_norm = n;
            best = i;
        }
    }
    if best_norm > 0.0 {
        let phase = v[best] / Complex64::from(best_norm);
        v *= phase.conj();
    }
    v
}

/// Extracts the atoms of one dissipated operator: eigenvectors with
/// eigenvalue above `atom_tol * root_trace`, scaled by the eigenvalue square
/// root. Returns the atoms and the eigenvalue mass below the threshold.
pub fn extract_atoms(
    delta: &PsdOperator,
    step: usize,
    source_word: &Word,
    atom_tol: f64,
    root_trace: f64,
) -> (Vec<FrameAtom>, f64) {
    let threshold = atom_tol * root_trace;
    let mut atoms = Vec::new();
    let mut truncated = 0.0;
    for (i, &lambda) in delta.eigenvalues().iter().enumerate() {
        if lambda > threshold {
            let mut v = delta.eigenvectors().column(i).into_owned();
            v *= Complex64::from(lambda.sqrt());
            atoms.push(FrameAtom {
                vector: fix_phase(v),
                step,
                rank_index: i,
                eigenvalue: lambda,
                source_word: source_word.clone(),
            });
        } else {
            truncated += lambda;
        }
    }
    (atoms, truncated)
}

/// Harvests the atoms of a sampled branch. The sample must have retained its
/// dissipated operators.
pub fn branch_atoms(sample: &BranchSample, atom_tol: f64) -> Result<AtomSystem> {
    let ops = sample
        .dissipated_ops
        .as_ref()
        .ok_or(WrError::OperatorsNotRetained)?;
    let root_trace = sample.traces[0];
    let mut atoms = Vec::new();
    let mut truncated = 0.0;
    for (k, delta) in ops.iter().enumerate() {
        let step = k + 1;
        let source_word = Word::from_letters(sample.word.letters()[..step].to_vec());
        let (mut step_atoms, step_truncated) =
            extract_atoms(delta, step, &source_word, atom_tol, root_trace);
        atoms.append(&mut step_atoms);
        truncated += step_truncated;
    }
    Ok(AtomSystem {
        atoms,
        residual_trace_at_stop: sample.final_trace(),
        root_trace,
        truncated_mass: truncated,
        atom_tol,
    })
}

/// `|sum_k |<x, atom_k>|^2 - <x, R_0 x>|`. For an extinct branch this is
/// bounded by `(residual trace + truncated mass) * ||x||^2`.
pub fn parseval_defect(system: &AtomSystem, x: &CVector, r0: &PsdOperator) -> f64 {
    let sum: f64 = system
        .atoms
        .iter()
        .map(|a| a.vector.dotc(x).norm_sqr())
        .sum();
    (sum - r0.quadratic_form(x)).abs()
}

/// The frame operator `S = sum_k |atom_k><atom_k|` of the system.
pub fn frame_operator(system: &AtomSystem, dim: usize) -> Result<PsdOperator> {
    let a = system.atom_matrix(dim);
    PsdOperator::validate(hermitize(&(&a * a.adjoint())))
}

/// Largest principal angle (radians) between the span of the atoms and the
/// column span of `subspace_basis` (orthonormal columns). A rank mismatch
/// counts as a right angle.
pub fn span_defect(system: &AtomSystem, subspace_basis: &CMatrix) -> Result<f64> {
    let dim = subspace_basis.nrows();
    let k = subspace_basis.ncols();
    if system.is_empty() {
        return Ok(if k == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 });
    }
    let a = system.atom_matrix(dim);
    let svd = nalgebra::linalg::SVD::new(a, true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.iter().fold(0.0_f64, |m, &s| m.max(s));
    let rank = svd
        .singular_values
        .iter()
        .take_while(|&&s| s > SPAN_RANK_TOL * smax)
        .count();
    if rank != k {
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    if rank == 0 {
        return Ok(0.0);
    }
    let overlap = u.columns(0, rank).adjoint() * subspace_basis;
    let sigmas = nalgebra::linalg::SVD::new(overlap, false, false).singular_values;
    let smin = sigmas.iter().fold(1.0_f64, |m, &s| m.min(s));
    Ok(smin.clamp(0.0, 1.0).acos())
}

/// Quantities reported when a branch's atoms are checked against the root.
#[derive(Clone, Debug, Serialize)]
pub struct FrameVerification {
    pub n_atoms: usize,
    pub residual_trace_at_stop: f64,
    pub truncated_mass: f64,
    /// Worst `parseval_defect` over the supplied probes.
    pub max_parseval_defect: f64,
    /// `||frame operator - R_0||` (Frobenius).
    pub frame_operator_defect: f64,
    /// Largest principal angle between the atom span and the energy support.
    pub span_defect: f64,
}

/// Verifies the atoms of an extinct branch against the root operator. Errors
/// with [`WrError::BranchNotExtinct`] if the stopping residual trace is above
/// `extinct_tol * root_trace`.
pub fn verify_frame(
    system: &AtomSystem,
    r0: &PsdOperator,
    h0_basis: &CMatrix,
    probes: &[CVector],
    extinct_tol: f64,
) -> Result<FrameVerification> {
    let threshold = extinct_tol * system.root_trace;
    if system.residual_trace_at_stop > threshold {
        return Err(WrError::BranchNotExtinct {
            residual: system.residual_trace_at_stop,
            threshold,
        });
    }
    let max_parseval_defect = probes
        .iter()
        .map(|x| parseval_defect(system, x, r0))
        .fold(0.0_f64, f64::max);
    let s = frame_operator(system, r0.dim())?;
    let frame_operator_defect = (s.matrix() - r0.matrix()).norm();
    let span = span_defect(system, h0_basis)?;
    Ok(FrameVerification {
        n_atoms: system.len(),
        residual_trace_at_stop: system.residual_trace_at_stop,
        truncated_mass: system.truncated_mass,
        max_parseval_defect,
        frame_operator_defect,
        span_defect: span,
    })
}
