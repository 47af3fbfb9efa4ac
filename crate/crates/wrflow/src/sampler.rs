//! Branch sampling and statistics over the residual tree.
//!
//! Sampling is reproducible by construction: sample `i` of a batch draws from
//! a counter-based RNG seeded with `(master_seed, stream = i)`, and each step
//! consumes exactly one uniform deviate, so results are independent of thread
//! count and batch layout. Expectation profiles come in two modes: exhaustive
//! (weighted sums over all words of a level, guarded by the node budget) and
//! Monte Carlo (averages over sampled paths walked to full depth).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, WrError};
use crate::measure::{transition_parts, MeasureKind, MeasureSpec, TransitionDist};
use crate::operator::{dissipated, wr_update, ProjectionFamily, PsdOperator};
use crate::tree::{TreeCache, Word};

/// Default relative residual threshold at which a branch counts as extinct.
pub const DEFAULT_STOP_TOL: f64 = 1e-12;

/// Why a sampled branch stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Walked the full requested depth.
    DepthReached,
    /// The tracked value fell to `stop_tol` times the root scale.
    ResidualBelowTol,
    /// The branch hit a dead node (no transition weight left).
    DeadAbsorbed,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::DepthReached => "depth_reached",
            StopReason::ResidualBelowTol => "residual_below_tol",
            StopReason::DeadAbsorbed => "dead_absorbed",
        }
    }
}

/// Master seed plus per-sample stream index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSeed {
    pub master: u64,
    pub index: u64,
}

impl StreamSeed {
    pub fn new(master: u64, index: u64) -> Self {
        Self { master, index }
    }

    /// The RNG for this sample: master seed, dedicated stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.index);
        rng
    }
}

/// One sampled branch with its recorded scalars.
#[derive(Clone, Debug)]
pub struct BranchSample {
    /// The letters walked.
    pub word: Word,
    /// Tracked value (energy or trace) at each level `0..=depth`.
    pub values: Vec<f64>,
    /// Residual trace at each level `0..=depth` (recorded for every kind).
    pub traces: Vec<f64>,
    /// Value dissipated by each step, one entry per letter.
    pub step_dissipations: Vec<f64>,
    /// The dissipated operators of each step, if retained.
    pub dissipated_ops: Option<Vec<PsdOperator>>,
    pub seed: StreamSeed,
    pub stop_reason: StopReason,
    /// Root value the relative thresholds refer to.
    pub root_scale: f64,
    pub stop_tol: f64,
}

impl BranchSample {
    pub fn depth(&self) -> usize {
        self.word.len()
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("values nonempty")
    }

    pub fn final_trace(&self) -> f64 {
        *self.traces.last().expect("traces nonempty")
    }

    /// Whether the branch ended with (numerically) no value left.
    pub fn is_extinct(&self) -> bool {
        self.final_value() <= self.stop_tol * self.root_scale
    }
}

fn draw_letter(probs: &[f64], u: f64) -> u8 {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (i + 1) as u8;
        }
    }
    probs.len() as u8
}

fn check_positive_depth(max_depth: usize) -> Result<()> {
    if max_depth == 0 {
        return Err(WrError::InvalidConfig("max_depth must be at least 1".into()));
    }
    Ok(())
}

fn check_stop_tol(stop_tol: f64) -> Result<()> {
    if !(stop_tol >= 0.0) || !stop_tol.is_finite() {
        return Err(WrError::InvalidConfig(format!(
            "stop tolerance must be finite and nonnegative, got {stop_tol}"
        )));
    }
    Ok(())
}

/// Samples one branch of the measure, stopping at `max_depth`, at value
/// extinction (`stop_tol` relative to the root scale), or at a dead node,
/// whichever comes first.
pub fn sample_branch(
    cache: &mut TreeCache,
    spec: &MeasureSpec,
    max_depth: usize,
    stop_tol: f64,
    seed: StreamSeed,
    retain_ops: bool,
) -> Result<BranchSample> {
    check_positive_depth(max_depth)?;
    check_stop_tol(stop_tol)?;
    spec.validate_for(cache)?;

    let family = cache.family_arc();
    let root_scale = spec.root_scale(cache);
    let threshold = stop_tol * root_scale;
    let mut rng = seed.rng();

    let mut word = Word::root();
    let mut node = cache.root_arc();
    let mut values = vec![spec.node_value(&node)];
    let mut traces = vec![node.trace()];
    let mut step_dissipations = Vec::new();
    let mut dissipated_ops = retain_ops.then(Vec::new);

    let mut stop_reason = StopReason::DepthReached;
    if values[0] <= threshold {
        stop_reason = StopReason::ResidualBelowTol;
    } else {
        for _ in 0..max_depth {
            let parts = transition_parts(spec, &family, &node, root_scale)?;
            if !parts.dist.alive {
                stop_reason = StopReason::DeadAbsorbed;
                break;
            }
            let u: f64 = rng.random();
            let letter = draw_letter(&parts.dist.probs, u);
            let idx = (letter - 1) as usize;

            word.push(letter);
            let child = cache.node_residual(&word)?;

            let step_op = match &parts.dissipations {
                Some(ds) => Some(ds[idx].clone()),
                None if retain_ops || matches!(spec.kind(), MeasureKind::ResidualBinary { .. }) => {
                    Some(dissipated(&node, family.projection(idx))?)
                }
                None => None,
            };
            let step_value = match spec.kind() {
                MeasureKind::Energy { x } | MeasureKind::ResidualBinary { x } => step_op
                    .as_ref()
                    .map(|d| d.quadratic_form(x).max(0.0))
                    .unwrap_or(parts.dist.raw_weights[idx]),
                MeasureKind::Trace => parts.dist.raw_weights[idx],
            };
            step_dissipations.push(step_value);
            if let (Some(ops), Some(op)) = (dissipated_ops.as_mut(), step_op) {
                ops.push(op);
            }

            values.push(spec.node_value(&child));
            traces.push(child.trace());
            node = child;

            if *values.last().unwrap() <= threshold {
                stop_reason = StopReason::ResidualBelowTol;
                break;
            }
        }
    }

    Ok(BranchSample {
        word,
        values,
        traces,
        step_dissipations,
        dissipated_ops,
        seed,
        stop_reason,
        root_scale,
        stop_tol,
    })
}

/// Samples `n_samples` branches in parallel. Sample `i` uses RNG stream `i`
/// of `master_seed`, so the result is independent of the thread count.
pub fn sample_batch(
    cache: &TreeCache,
    spec: &MeasureSpec,
    n_samples: usize,
    max_depth: usize,
    stop_tol: f64,
    master_seed: u64,
    retain_ops: bool,
) -> Result<Vec<BranchSample>> {
    check_positive_depth(max_depth)?;
    check_stop_tol(stop_tol)?;
    spec.validate_for(cache)?;
    let root = cache.root_arc();
    let family = cache.family_arc();
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut worker = TreeCache::from_arcs(root.clone(), family.clone())?;
            sample_branch(
                &mut worker,
                spec,
                max_depth,
                stop_tol,
                StreamSeed::new(master_seed, i as u64),
                retain_ops,
            )
        })
        .collect()
}

/// How expectation profiles and balance reports are computed.
#[derive(Clone, Copy, Debug)]
pub enum ProfileMethod {
    /// Weighted sums over every word per level (needs `m^depth` within the
    /// node budget).
    Exhaustive,
    /// Averages over `n_samples` paths walked to full depth (no early
    /// stopping, so level means stay unbiased).
    MonteCarlo { n_samples: usize, seed: u64 },
}

/// Tag recorded in outputs for the computation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    Exhaustive,
    MonteCarlo,
}

/// Expected tracked value at one tree level.
#[derive(Clone, Debug, Serialize)]
pub struct LevelStats {
    pub level: usize,
    pub expected_value: f64,
    /// A-priori decay bound `(1 - alpha/m)^level` times the root value.
    pub bound: f64,
    /// Standard error of the mean (Monte Carlo only).
    pub std_error: Option<f64>,
    pub mode: ProfileMode,
}

fn check_exhaustive_budget(m: usize, depth: usize, budget: u64) -> Result<()> {
    let mut nodes: u128 = 1;
    for _ in 0..depth {
        nodes = nodes
            .checked_mul(m as u128)
            .unwrap_or(u128::MAX);
        if nodes > budget as u128 {
            return Err(WrError::BudgetExceeded {
                requested: nodes,
                budget,
            });
        }
    }
    Ok(())
}

/// Transition plus materialized child residuals at a node.
fn node_children(
    spec: &MeasureSpec,
    family: &ProjectionFamily,
    node: &PsdOperator,
    root_scale: f64,
) -> Result<(TransitionDist, Vec<PsdOperator>)> {
    let parts = transition_parts(spec, family, node, root_scale)?;
    let children = match parts.child_residuals {
        Some(c) => c,
        None => (0..family.len())
            .map(|idx| wr_update(node, family.projection(idx)))
            .collect::<Result<_>>()?,
    };
    Ok((parts.dist, children))
}

/// Dissipated value of step `w -> wj` in the units of the measure kind.
fn step_value(spec: &MeasureSpec, dist: &TransitionDist, parent_value: f64, idx: usize) -> f64 {
    match spec.kind() {
        MeasureKind::Energy { .. } | MeasureKind::Trace => dist.raw_weights[idx],
        // For the residual kind the raw weights are the surviving child
        // energies; the dissipated part is the complement.
        MeasureKind::ResidualBinary { .. } => parent_value - dist.raw_weights[idx],
    }
}

struct LevelAccumulator {
    /// Per level: sum of weight * value.
    values: Vec<f64>,
    /// Per level `k >= 1`: expected value dissipated by step `k`.
    dissipated: Vec<f64>,
}

fn exhaustive_walk(
    spec: &MeasureSpec,
    family: &ProjectionFamily,
    node: &PsdOperator,
    root_scale: f64,
    weight: f64,
    level: usize,
    depth: usize,
    acc: &mut LevelAccumulator,
) -> Result<()> {
    let value = spec.node_value(node);
    acc.values[level] += weight * value;
    if level == depth {
        return Ok(());
    }
    let (dist, children) = node_children(spec, family, node, root_scale)?;
    for (idx, child) in children.iter().enumerate() {
        let p = dist.probs[idx];
        acc.dissipated[level] += weight * p * step_value(spec, &dist, value, idx);
        if p > 0.0 {
            exhaustive_walk(spec, family, child, root_scale, weight * p, level + 1, depth, acc)?;
        }
    }
    Ok(())
}

/// One Monte Carlo path walked to full depth, recording the value at every
/// level and the value dissipated by every step.
fn mc_path(
    spec: &MeasureSpec,
    family: &ProjectionFamily,
    root: &PsdOperator,
    root_scale: f64,
    depth: usize,
    seed: StreamSeed,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = seed.rng();
    let mut node = root.clone();
    let mut values = Vec::with_capacity(depth + 1);
    let mut dissipated_values = Vec::with_capacity(depth);
    values.push(spec.node_value(&node));
    for _ in 0..depth {
        let (dist, mut children) = node_children(spec, family, &node, root_scale)?;
        let u: f64 = rng.random();
        let idx = (draw_letter(&dist.probs, u) - 1) as usize;
        dissipated_values.push(step_value(spec, &dist, *values.last().unwrap(), idx));
        node = children.swap_remove(idx);
        values.push(spec.node_value(&node));
    }
    Ok((values, dissipated_values))
}

fn mc_paths(
    cache: &TreeCache,
    spec: &MeasureSpec,
    depth: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if n_samples == 0 {
        return Err(WrError::EmptySampleSet);
    }
    let root = cache.root_arc();
    let family = cache.family_arc();
    let root_scale = spec.root_scale(cache);
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            mc_path(
                spec,
                &family,
                &root,
                root_scale,
                depth,
                StreamSeed::new(seed, i as u64),
            )
        })
        .collect()
}

/// Expected value per level, `0..=depth`.
pub fn expectation_profile(
    cache: &TreeCache,
    spec: &MeasureSpec,
    depth: usize,
    method: ProfileMethod,
) -> Result<Vec<LevelStats>> {
    spec.validate_for(cache)?;
    let family = cache.family_arc();
    let root_scale = spec.root_scale(cache);
    let c = family.contraction_factor();
    let bound = |level: usize| c.powi(level as i32) * root_scale;

    match method {
        ProfileMethod::Exhaustive => {
            check_exhaustive_budget(family.len(), depth, cache.budget())?;
            let mut acc = LevelAccumulator {
                values: vec![0.0; depth + 1],
                dissipated: vec![0.0; depth],
            };
            exhaustive_walk(spec, &family, cache.root(), root_scale, 1.0, 0, depth, &mut acc)?;
            Ok(acc
                .values
                .iter()
                .enumerate()
                .map(|(level, &expected_value)| LevelStats {
                    level,
                    expected_value,
                    bound: bound(level),
                    std_error: None,
                    mode: ProfileMode::Exhaustive,
                })
                .collect())
        }
        ProfileMethod::MonteCarlo { n_samples, seed } => {
            let paths = mc_paths(cache, spec, depth, n_samples, seed)?;
            let n = n_samples as f64;
            let mut out = Vec::with_capacity(depth + 1);
            for level in 0..=depth {
                let mean = paths.iter().map(|(v, _)| v[level]).sum::<f64>() / n;
                let var = if n_samples > 1 {
                    paths
                        .iter()
                        .map(|(v, _)| (v[level] - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1.0)
                } else {
                    0.0
                };
                out.push(LevelStats {
                    level,
                    expected_value: mean,
                    bound: bound(level),
                    std_error: Some((var / n).sqrt()),
                    mode: ProfileMode::MonteCarlo,
                });
            }
            Ok(out)
        }
    }
}

/// Largest value of `E[level n+1] - c * E[level n]` over a profile; positive
/// values violate the expected per-level contraction.
pub fn max_contraction_violation(profile: &[LevelStats], c: f64) -> f64 {
    profile
        .windows(2)
        .map(|w| w[1].expected_value - c * w[0].expected_value)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(f64::NEG_INFINITY)
}

/// Every word of one level with its cylinder weight and node value, in
/// lexicographic letter order.
pub fn enumerate_level(
    cache: &TreeCache,
    spec: &MeasureSpec,
    level: usize,
) -> Result<Vec<(Word, f64, f64)>> {
    spec.validate_for(cache)?;
    let family = cache.family_arc();
    check_exhaustive_budget(family.len(), level, cache.budget())?;
    let root_scale = spec.root_scale(cache);
    let mut out = Vec::new();

    fn rec(
        spec: &MeasureSpec,
        family: &ProjectionFamily,
        node: &PsdOperator,
        root_scale: f64,
        word: &mut Word,
        weight: f64,
        level: usize,
        out: &mut Vec<(Word, f64, f64)>,
    ) -> Result<()> {
        if level == 0 {
            out.push((word.clone(), weight, spec.node_value(node)));
            return Ok(());
        }
        let (dist, children) = node_children(spec, family, node, root_scale)?;
        for (idx, child) in children.iter().enumerate() {
            word.push((idx + 1) as u8);
            rec(
                spec,
                family,
                child,
                root_scale,
                word,
                weight * dist.probs[idx],
                level - 1,
                out,
            )?;
            *word = word.parent().expect("pushed above");
        }
        Ok(())
    }

    rec(
        spec,
        &family,
        cache.root(),
        root_scale,
        &mut Word::root(),
        1.0,
        level,
        &mut out,
    )?;
    Ok(out)
}

/// Worst-case one-step conditional behavior over all words up to a depth.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionalCheck {
    /// Max over all words of `E[value(child) | w] - value(w)`, clamped at 0.
    pub max_supermartingale_violation: f64,
    /// Max over alive words of `E[value(child) | w] - c * value(w)`, clamped
    /// at 0. Dead words are excluded: their fallback transitions need not
    /// contract.
    pub max_contraction_violation: f64,
    pub words_checked: usize,
}

/// Verifies `E[value | parent] <= value(parent)` for every word with
/// `|w| <= depth`, and the `c`-contraction on alive words.
pub fn conditional_supermartingale_check(
    cache: &TreeCache,
    spec: &MeasureSpec,
    depth: usize,
) -> Result<ConditionalCheck> {
    spec.validate_for(cache)?;
    let family = cache.family_arc();
    check_exhaustive_budget(family.len(), depth + 1, cache.budget())?;
    let root_scale = spec.root_scale(cache);
    let c = family.contraction_factor();

    struct State {
        super_violation: f64,
        contraction_violation: f64,
        words: usize,
    }

    fn rec(
        spec: &MeasureSpec,
        family: &ProjectionFamily,
        node: &PsdOperator,
        root_scale: f64,
        c: f64,
        level: usize,
        depth: usize,
        st: &mut State,
    ) -> Result<()> {
        let value = spec.node_value(node);
        let (dist, children) = node_children(spec, family, node, root_scale)?;
        let conditional: f64 = children
            .iter()
            .zip(&dist.probs)
            .map(|(child, &p)| p * spec.node_value(child))
            .sum();
        st.super_violation = st.super_violation.max(conditional - value);
        if dist.alive {
            st.contraction_violation = st.contraction_violation.max(conditional - c * value);
        }
        st.words += 1;
        if level < depth {
            for child in &children {
                rec(spec, family, child, root_scale, c, level + 1, depth, st)?;
            }
        }
        Ok(())
    }

    let mut st = State {
        super_violation: 0.0,
        contraction_violation: 0.0,
        words: 0,
    };
    rec(
        spec,
        &family,
        cache.root(),
        root_scale,
        c,
        0,
        depth,
        &mut st,
    )?;
    Ok(ConditionalCheck {
        max_supermartingale_violation: st.super_violation.max(0.0),
        max_contraction_violation: st.contraction_violation.max(0.0),
        words_checked: st.words,
    })
}

/// Global value-balance across levels: the root value must equal the value
/// left at the final level plus everything dissipated on the way.
#[derive(Clone, Debug, Serialize)]
pub struct BalanceReport {
    pub root_value: f64,
    /// `E[value at level k]`, `k = 0..=depth`.
    pub expected_values: Vec<f64>,
    /// `E[value dissipated by step k]`, `k = 1..=depth`.
    pub expected_dissipated: Vec<f64>,
    /// `|root - E[final] - sum of dissipated]|`.
    pub defect: f64,
    /// Max over `n` of `|E[value at n] - (E[final] + dissipated after n)|`.
    pub max_tail_defect: f64,
    pub mode: ProfileMode,
}

/// Computes the balance report, exhaustively or by Monte Carlo.
pub fn energy_balance_report(
    cache: &TreeCache,
    spec: &MeasureSpec,
    depth: usize,
    method: ProfileMethod,
) -> Result<BalanceReport> {
    spec.validate_for(cache)?;
    let family = cache.family_arc();

    let (expected_values, expected_dissipated, mode) = match method {
        ProfileMethod::Exhaustive => {
            check_exhaustive_budget(family.len(), depth, cache.budget())?;
            let root_scale = spec.root_scale(cache);
            let mut acc = LevelAccumulator {
                values: vec![0.0; depth + 1],
                dissipated: vec![0.0; depth],
            };
            exhaustive_walk(spec, &family, cache.root(), root_scale, 1.0, 0, depth, &mut acc)?;
            (acc.values, acc.dissipated, ProfileMode::Exhaustive)
        }
        ProfileMethod::MonteCarlo { n_samples, seed } => {
            let paths = mc_paths(cache, spec, depth, n_samples, seed)?;
            let n = n_samples as f64;
            let values = (0..=depth)
                .map(|k| paths.iter().map(|(v, _)| v[k]).sum::<f64>() / n)
                .collect();
            let dissipated_means = (0..depth)
                .map(|k| paths.iter().map(|(_, a)| a[k]).sum::<f64>() / n)
                .collect();
            (values, dissipated_means, ProfileMode::MonteCarlo)
        }
    };

    let root_value = expected_values[0];
    let final_value = *expected_values.last().expect("nonempty");
    let total_dissipated: f64 = expected_dissipated.iter().sum();
    let defect = (root_value - final_value - total_dissipated).abs();

    let mut max_tail_defect = 0.0_f64;
    for n in 0..=depth {
        let tail: f64 = expected_dissipated[n..].iter().sum();
        max_tail_defect = max_tail_defect.max((expected_values[n] - (final_value + tail)).abs());
    }

    Ok(BalanceReport {
        root_value,
        expected_values,
        expected_dissipated,
        defect,
        max_tail_defect,
        mode,
    })
}

/// Aggregate view of a batch of sampled branches.
#[derive(Clone, Debug, Serialize)]
pub struct ExtinctionSummary {
    pub n_samples: usize,
    /// Fraction of branches whose final value is at or below threshold.
    pub extinct_fraction: f64,
    pub max_depth_observed: usize,
    /// `(stopping depth, count)`, sorted by depth.
    pub depth_histogram: Vec<(usize, usize)>,
    /// Mean value per level; stopped branches keep their final value.
    pub mean_value_profile: Vec<f64>,
    /// Per-step decay factor fitted to the mean profile by least squares on
    /// the log scale, ignoring levels below numerical noise.
    pub fitted_rate: Option<f64>,
    /// The a-priori factor `1 - alpha/m`.
    pub expected_rate: f64,
}

/// Summarizes a batch of samples against the expected decay factor `c`.
pub fn extinction_stats(samples: &[BranchSample], c: f64) -> Result<ExtinctionSummary> {
    if samples.is_empty() {
        return Err(WrError::EmptySampleSet);
    }
    let n = samples.len();
    let extinct = samples.iter().filter(|s| s.is_extinct()).count();
    let max_depth_observed = samples.iter().map(|s| s.depth()).max().unwrap_or(0);

    let mut histogram = std::collections::BTreeMap::new();
    for s in samples {
        *histogram.entry(s.depth()).or_insert(0usize) += 1;
    }

    let mut profile = vec![0.0; max_depth_observed + 1];
    for s in samples {
        for (k, slot) in profile.iter_mut().enumerate() {
            *slot += s.values.get(k).copied().unwrap_or_else(|| s.final_value());
        }
    }
    for slot in profile.iter_mut() {
        *slot /= n as f64;
    }

    // Fit ln E[M_n] = a + n ln(rate) over levels above the noise floor.
    let noise_floor = 1e3 * f64::EPSILON;
    let pts: Vec<(f64, f64)> = profile
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > noise_floor)
        .map(|(k, &v)| (k as f64, v.ln()))
        .collect();
    let fitted_rate = if pts.len() >= 2 {
        let n_pts = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n_pts * sxx - sx * sx;
        (denom.abs() > 0.0).then(|| ((n_pts * sxy - sx * sy) / denom).exp())
    } else {
        None
    };

    Ok(ExtinctionSummary {
        n_samples: n,
        extinct_fraction: extinct as f64 / n as f64,
        max_depth_observed,
        depth_histogram: histogram.into_iter().collect(),
        mean_value_profile: profile,
        fitted_rate,
        expected_rate: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{CMatrix, CVector, RANK_TOL};
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64;

    fn coordinate_family(dim: usize, root: &PsdOperator) -> ProjectionFamily {
        let projections: Vec<CMatrix> = (0..dim)
            .map(|k| {
                CMatrix::from_fn(dim, dim, |i, j| {
                    if i == k && j == k {
                        Complex64::new(1.0, 0.0)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
            })
            .collect();
        ProjectionFamily::for_root(projections, root, RANK_TOL).unwrap()
    }

    fn diagonal_probe() -> CVector {
        let s = 1.0 / 2.0_f64.sqrt();
        CVector::from_vec(vec![Complex64::new(s, 0.0), Complex64::new(s, 0.0)])
    }

    fn two_dim_cache() -> TreeCache {
        let root = PsdOperator::identity(2);
        let family = coordinate_family(2, &root);
        TreeCache::new(root, family).unwrap()
    }

    #[test]
    fn exhaustive_profile_matches_hand_values() {
        let cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let profile =
            expectation_profile(&cache, &spec, 2, ProfileMethod::Exhaustive).unwrap();
        let expected = [1.0, 0.5, 0.0];
        let bounds = [1.0, 0.5, 0.25];
        for (k, stats) in profile.iter().enumerate() {
            assert_eq!(stats.level, k);
            assert_abs_diff_eq!(stats.expected_value, expected[k], epsilon = 1e-12);
            assert_abs_diff_eq!(stats.bound, bounds[k], epsilon = 1e-12);
            assert!(stats.std_error.is_none());
        }
        assert!(max_contraction_violation(&profile, 0.5) <= 1e-12);
    }

    #[test]
    fn monte_carlo_profile_is_deterministic_and_unbiased_here() {
        let cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let method = ProfileMethod::MonteCarlo {
            n_samples: 400,
            seed: 9,
        };
        let a = expectation_profile(&cache, &spec, 2, method).unwrap();
        let b = expectation_profile(&cache, &spec, 2, method).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.expected_value, y.expected_value);
            assert_eq!(x.std_error, y.std_error);
        }
        // Level 2 is exactly zero on every path of this instance.
        assert_abs_diff_eq!(a[2].expected_value, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a[0].expected_value, 1.0, epsilon = 1e-14);
        let se = a[1].std_error.unwrap();
        assert!((a[1].expected_value - 0.5).abs() <= 4.0 * se.max(1e-3));
    }

    #[test]
    fn enumerate_level_lists_all_words_with_weights() {
        let cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let rows = enumerate_level(&cache, &spec, 2).unwrap();
        assert_eq!(rows.len(), 4);
        let words: Vec<String> = rows.iter().map(|(w, _, _)| w.display(2)).collect();
        assert_eq!(words, vec!["11", "12", "21", "22"]);
        let total: f64 = rows.iter().map(|(_, p, _)| p).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        // Weight concentrates on the two extinguishing words.
        assert_abs_diff_eq!(rows[1].1, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rows[2].1, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn sampled_branches_are_reproducible_per_stream() {
        let mut cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let seed = StreamSeed::new(11, 3);
        let a = sample_branch(&mut cache, &spec, 10, 1e-12, seed, false).unwrap();
        let b = sample_branch(&mut cache, &spec, 10, 1e-12, seed, false).unwrap();
        assert_eq!(a.word, b.word);
        assert_eq!(a.values, b.values);
        assert_eq!(a.stop_reason, b.stop_reason);

        // This instance extinguishes every branch after two steps.
        assert_eq!(a.stop_reason, StopReason::ResidualBelowTol);
        assert!(a.depth() <= 2);
        assert!(a.is_extinct());
    }

    #[test]
    fn batch_sampling_is_thread_count_invariant() {
        let cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let batch = sample_batch(&cache, &spec, 64, 10, 1e-12, 5, false).unwrap();

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial =
            pool.install(|| sample_batch(&cache, &spec, 64, 10, 1e-12, 5, false).unwrap());
        for (a, b) in batch.iter().zip(&serial) {
            assert_eq!(a.word, b.word);
            assert_eq!(a.values, b.values);
        }

        let summary = extinction_stats(&batch, 0.5).unwrap();
        assert_abs_diff_eq!(summary.extinct_fraction, 1.0);
        assert!(summary.max_depth_observed <= 2);
    }

    #[test]
    fn dead_node_absorbs_the_walk() {
        // Both projections ignore coordinate 2, so a probe there has positive
        // value but no dissipation at all: dead at the root.
        let root = PsdOperator::identity(2);
        let p = CMatrix::from_fn(2, 2, |i, j| {
            if i == 0 && j == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let family = ProjectionFamily::for_root(vec![p.clone(), p], &root, RANK_TOL).unwrap();
        let mut cache = TreeCache::new(root, family).unwrap();
        let x = CVector::from_vec(vec![Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]);
        let spec = MeasureSpec::energy(x);
        let sample =
            sample_branch(&mut cache, &spec, 10, 1e-12, StreamSeed::new(0, 0), false).unwrap();
        assert_eq!(sample.stop_reason, StopReason::DeadAbsorbed);
        assert_eq!(sample.depth(), 0);
        assert_abs_diff_eq!(sample.final_value(), 1.0);
        assert!(!sample.is_extinct());
    }

    #[test]
    fn immediate_stop_on_zero_root_value() {
        let mut cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let sample = sample_branch(
            &mut cache,
            &spec,
            10,
            2.0, // threshold above the root value
            StreamSeed::new(0, 0),
            false,
        )
        .unwrap();
        assert_eq!(sample.stop_reason, StopReason::ResidualBelowTol);
        assert_eq!(sample.depth(), 0);
        assert_eq!(sample.values.len(), 1);
    }

    #[test]
    fn zero_depth_is_rejected() {
        let mut cache = two_dim_cache();
        let spec = MeasureSpec::trace();
        assert!(matches!(
            sample_branch(&mut cache, &spec, 0, 1e-12, StreamSeed::new(0, 0), false),
            Err(WrError::InvalidConfig(_))
        ));
    }

    #[test]
    fn conditional_check_is_clean_on_the_worked_example() {
        let cache = two_dim_cache();
        for spec in [MeasureSpec::energy(diagonal_probe()), MeasureSpec::trace()] {
            let check = conditional_supermartingale_check(&cache, &spec, 3).unwrap();
            assert!(check.max_supermartingale_violation <= 1e-12);
            assert!(check.max_contraction_violation <= 1e-12);
            assert_eq!(check.words_checked, 15);
        }
    }

    #[test]
    fn balance_report_closes_exactly_here() {
        let cache = two_dim_cache();
        let spec = MeasureSpec::energy(diagonal_probe());
        let report =
            energy_balance_report(&cache, &spec, 3, ProfileMethod::Exhaustive).unwrap();
        assert_abs_diff_eq!(report.root_value, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(report.expected_dissipated[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(report.expected_dissipated[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(report.expected_dissipated[2], 0.0, epsilon = 1e-14);
        assert!(report.defect <= 1e-12);
        assert!(report.max_tail_defect <= 1e-12);

        let mc = energy_balance_report(
            &cache,
            &spec,
            3,
            ProfileMethod::MonteCarlo {
                n_samples: 200,
                seed: 1,
            },
        )
        .unwrap();
        assert!(mc.defect <= 1e-12, "defect {}", mc.defect);
        assert!(mc.max_tail_defect <= 1e-12);
    }

    #[test]
    fn budget_guards_exhaustive_walks() {
        let root = PsdOperator::identity(2);
        let family = coordinate_family(2, &root);
        let cache = TreeCache::new(root, family).unwrap().with_budget(8);
        let spec = MeasureSpec::trace();
        assert!(expectation_profile(&cache, &spec, 3, ProfileMethod::Exhaustive).is_ok());
        assert!(matches!(
            expectation_profile(&cache, &spec, 4, ProfileMethod::Exhaustive),
            Err(WrError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn extinction_stats_require_samples() {
        assert!(matches!(
            extinction_stats(&[], 0.5),
            Err(WrError::EmptySampleSet)
        ));
    }

    #[test]
    fn residual_binary_sampling_records_dissipated_energy() {
        let mut cache = two_dim_cache();
        let spec = MeasureSpec::residual_binary(diagonal_probe());
        let sample =
            sample_branch(&mut cache, &spec, 6, 1e-12, StreamSeed::new(2, 0), true).unwrap();
        // Per-step value drops must match the recorded dissipated values.
        for k in 0..sample.depth() {
            assert_abs_diff_eq!(
                sample.values[k] - sample.values[k + 1],
                sample.step_dissipations[k],
                epsilon = 1e-12
            );
        }
        assert_eq!(
            sample.dissipated_ops.as_ref().unwrap().len(),
            sample.depth()
        );
    }
}
