//! Branch measures on the boundary of the residual tree.
//!
//! Three intrinsic kinds are supported:
//!
//! * **energy**: transition weights are the dissipated energies
//!   `<x, D_wj x>` of a fixed probe vector `x`;
//! * **trace**: transition weights are the dissipated traces `tr D_wj`;
//! * **residual (binary)**: for two-projection splitting families only, the
//!   cylinder weight of `w` is the surviving energy ratio
//!   `<x, R_w x> / <x, R_0 x>`.
//!
//! At a *dead* node (total transition weight at or below `dead_tol` times the
//! root scale) the transition falls back to a fixed reference distribution
//! `q` (uniform unless configured), so every measure is a bona fide
//! probability measure on infinite paths.

use crate::error::{Result, WrError};
use crate::operator::{dissipated, wr_update, CVector, ProjectionFamily, PsdOperator};
use crate::tree::{TreeCache, Word};

/// Default relative threshold below which a node counts as dead.
pub const DEFAULT_DEAD_TOL: f64 = 1e-14;

/// Which per-step weights drive the measure.
#[derive(Clone, Debug)]
pub enum MeasureKind {
    /// Dissipated energy of the probe vector `x`.
    Energy { x: CVector },
    /// Dissipated trace.
    Trace,
    /// Surviving energy of `x`; binary splitting families only.
    ResidualBinary { x: CVector },
}

/// A measure kind plus the dead-node policy.
#[derive(Clone, Debug)]
pub struct MeasureSpec {
    kind: MeasureKind,
    fallback: Option<Vec<f64>>,
    dead_tol: f64,
}

impl MeasureSpec {
    pub fn energy(x: CVector) -> Self {
        Self {
            kind: MeasureKind::Energy { x },
            fallback: None,
            dead_tol: DEFAULT_DEAD_TOL,
        }
    }

    pub fn trace() -> Self {
        Self {
            kind: MeasureKind::Trace,
            fallback: None,
            dead_tol: DEFAULT_DEAD_TOL,
        }
    }

    pub fn residual_binary(x: CVector) -> Self {
        Self {
            kind: MeasureKind::ResidualBinary { x },
            fallback: None,
            dead_tol: DEFAULT_DEAD_TOL,
        }
    }

    /// Replaces the uniform dead-node distribution with `q`.
    pub fn with_fallback(mut self, q: Vec<f64>) -> Result<Self> {
        if q.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(WrError::InvalidConfig(
                "fallback distribution entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = q.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(WrError::InvalidConfig(format!(
                "fallback distribution sums to {sum}, expected 1"
            )));
        }
        self.fallback = Some(q);
        Ok(self)
    }

    pub fn with_dead_tol(mut self, dead_tol: f64) -> Result<Self> {
        if !(dead_tol >= 0.0) || !dead_tol.is_finite() {
            return Err(WrError::InvalidConfig(format!(
                "dead tolerance must be finite and nonnegative, got {dead_tol}"
            )));
        }
        self.dead_tol = dead_tol;
        Ok(self)
    }

    pub fn kind(&self) -> &MeasureKind {
        &self.kind
    }

    pub fn dead_tol(&self) -> f64 {
        self.dead_tol
    }

    /// The reference distribution used at dead nodes.
    pub fn fallback_probs(&self, m: usize) -> Vec<f64> {
        match &self.fallback {
            Some(q) => q.clone(),
            None => vec![1.0 / m as f64; m],
        }
    }

    /// The scalar tracked along branches: `<x, R x>` for the energy and
    /// residual kinds, `tr R` for the trace kind. Clamped at zero.
    pub fn node_value(&self, r: &PsdOperator) -> f64 {
        match &self.kind {
            MeasureKind::Energy { x } | MeasureKind::ResidualBinary { x } => {
                r.quadratic_form(x).max(0.0)
            }
            MeasureKind::Trace => r.trace().max(0.0),
        }
    }

    /// Node value of the root; transitions compare against this scale.
    pub fn root_scale(&self, cache: &TreeCache) -> f64 {
        self.node_value(cache.root())
    }

    /// Checks this measure against a concrete instance: dimensions, fallback
    /// length, positivity of the root mass, and (for the residual kind) that
    /// the family is binary and splitting on the energy support.
    pub fn validate_for(&self, cache: &TreeCache) -> Result<()> {
        let family = cache.family();
        let root = cache.root();
        let m = family.len();
        if let Some(q) = &self.fallback {
            if q.len() != m {
                return Err(WrError::DimensionMismatch {
                    expected: m,
                    got: q.len(),
                });
            }
        }
        match &self.kind {
            MeasureKind::Energy { x } | MeasureKind::ResidualBinary { x } => {
                if x.len() != family.dim() {
                    return Err(WrError::DimensionMismatch {
                        expected: family.dim(),
                        got: x.len(),
                    });
                }
                if root.quadratic_form(x) <= self.dead_tol * root.trace() {
                    return Err(WrError::InvalidConfig(
                        "probe vector has no energy under the root operator".into(),
                    ));
                }
            }
            MeasureKind::Trace => {
                if root.trace() <= 0.0 {
                    return Err(WrError::InvalidConfig(
                        "root operator has zero trace".into(),
                    ));
                }
            }
        }
        if let MeasureKind::ResidualBinary { .. } = &self.kind {
            if m != 2 {
                return Err(WrError::ResidualKindNotBinary { m });
            }
            if !family.splitting_on_h0() {
                return Err(WrError::ResidualKindNotSplitting);
            }
        }
        Ok(())
    }
}

/// One-step transition data at a node.
#[derive(Clone, Debug)]
pub struct TransitionDist {
    /// Probability of each letter, in letter order. Sums to one within
    /// rounding (exactly the fallback at dead nodes).
    pub probs: Vec<f64>,
    /// The unnormalized weights the probabilities came from.
    pub raw_weights: Vec<f64>,
    /// False iff the node is dead and `probs` is the fallback.
    pub alive: bool,
}

/// Transition plus whichever child operators were materialized computing it.
pub(crate) struct TransitionParts {
    pub dist: TransitionDist,
    /// Child dissipated operators (energy and trace kinds).
    pub dissipations: Option<Vec<PsdOperator>>,
    /// Child residual operators (residual kind).
    pub child_residuals: Option<Vec<PsdOperator>>,
}

pub(crate) fn transition_parts(
    spec: &MeasureSpec,
    family: &ProjectionFamily,
    node: &PsdOperator,
    root_scale: f64,
) -> Result<TransitionParts> {
    let m = family.len();
    match spec.kind() {
        MeasureKind::Energy { .. } | MeasureKind::Trace => {
            let ds: Vec<PsdOperator> = (0..m)
                .map(|idx| dissipated(node, family.projection(idx)))
                .collect::<Result<_>>()?;
            let raw: Vec<f64> = ds
                .iter()
                .map(|d| match spec.kind() {
                    MeasureKind::Energy { x } => d.quadratic_form(x).max(0.0),
                    MeasureKind::Trace => d.trace().max(0.0),
                    MeasureKind::ResidualBinary { .. } => unreachable!(),
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let alive = total > spec.dead_tol() * root_scale;
            let probs = if alive {
                raw.iter().map(|&a| a / total).collect()
            } else {
                spec.fallback_probs(m)
            };
            Ok(TransitionParts {
                dist: TransitionDist {
                    probs,
                    raw_weights: raw,
                    alive,
                },
                dissipations: Some(ds),
                child_residuals: None,
            })
        }
        MeasureKind::ResidualBinary { x } => {
            let children: Vec<PsdOperator> = (0..m)
                .map(|idx| wr_update(node, family.projection(idx)))
                .collect::<Result<_>>()?;
            let raw: Vec<f64> = children
                .iter()
                .map(|r| r.quadratic_form(x).max(0.0))
                .collect();
            let denom = node.quadratic_form(x);
            let alive = denom > spec.dead_tol() * root_scale;
            let probs = if alive {
                raw.iter().map(|&a| a / denom).collect()
            } else {
                spec.fallback_probs(m)
            };
            Ok(TransitionParts {
                dist: TransitionDist {
                    probs,
                    raw_weights: raw,
                    alive,
                },
                dissipations: None,
                child_residuals: Some(children),
            })
        }
    }
}

/// Transition distribution of the measure at node `w`.
pub fn transition(cache: &mut TreeCache, spec: &MeasureSpec, w: &Word) -> Result<TransitionDist> {
    spec.validate_for(cache)?;
    let root_scale = spec.root_scale(cache);
    let node = cache.node_residual(w)?;
    let family = cache.family_arc();
    Ok(transition_parts(spec, &family, &node, root_scale)?.dist)
}

/// Measure of the cylinder set of `w`: the product of transition
/// probabilities along the path for the energy and trace kinds, the surviving
/// energy ratio for the residual kind.
pub fn cylinder_weight(cache: &mut TreeCache, spec: &MeasureSpec, w: &Word) -> Result<f64> {
    spec.validate_for(cache)?;
    let root_scale = spec.root_scale(cache);
    match spec.kind() {
        MeasureKind::Energy { .. } | MeasureKind::Trace => {
            let family = cache.family_arc();
            let mut weight = 1.0;
            for k in 0..w.len() {
                let node = cache.node_residual(&w.prefix(k))?;
                let parts = transition_parts(spec, &family, &node, root_scale)?;
                let idx = (w.letters()[k] - 1) as usize;
                weight *= parts.dist.probs[idx];
            }
            Ok(weight)
        }
        MeasureKind::ResidualBinary { x } => {
            let node = cache.node_residual(w)?;
            let num = node.quadratic_form(x).max(0.0);
            Ok(num / root_scale)
        }
    }
}

/// Whether `w` is a dead node of the measure.
pub fn is_dead(cache: &mut TreeCache, spec: &MeasureSpec, w: &Word) -> Result<bool> {
    Ok(!transition(cache, spec, w)?.alive)
}
