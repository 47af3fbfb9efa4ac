//! Reproducible scenarios: JSON configs, instance generation, subcommand
//! execution, and report files.
//!
//! A scenario config fully determines an instance (root operator, projection
//! family, measure) and the run parameters. Reports land in a directory named
//! by a hash of the config and subcommand; the config is echoed into
//! `summary.json` and nothing time- or machine-dependent is written, so
//! re-running a config reproduces every artifact byte for byte.

use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WrError};
use crate::frame::{self, AtomSystem};
use crate::measure::{MeasureSpec, DEFAULT_DEAD_TOL};
use crate::operator::{CMatrix, CVector, ProjectionFamily, PsdOperator};
use crate::random;
use crate::sampler::{
    self, extinction_stats, sample_batch, BalanceReport, BranchSample, ConditionalCheck,
    ExtinctionSummary, LevelStats, ProfileMethod, ProfileMode, StreamSeed,
};
use crate::tree::{TreeCache, DEFAULT_NODE_BUDGET};

// ---------------------------------------------------------------------------
// Matrix interchange format
// ---------------------------------------------------------------------------

/// One complex entry: `[re, im]`, with a bare number accepted as a real.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexEntry {
    Pair([f64; 2]),
    Real(f64),
}

impl ComplexEntry {
    pub fn to_complex(self) -> Complex64 {
        match self {
            ComplexEntry::Pair([re, im]) => Complex64::new(re, im),
            ComplexEntry::Real(re) => Complex64::new(re, 0.0),
        }
    }

    pub fn from_complex(z: Complex64) -> Self {
        ComplexEntry::Pair([z.re, z.im])
    }
}

/// A square matrix in row-major interchange form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorData {
    pub dim: usize,
    pub entries: Vec<ComplexEntry>,
}

impl OperatorData {
    pub fn from_matrix(m: &CMatrix) -> Self {
        let dim = m.nrows();
        let entries = (0..dim)
            .flat_map(|i| (0..dim).map(move |j| (i, j)))
            .map(|(i, j)| ComplexEntry::from_complex(m[(i, j)]))
            .collect();
        Self { dim, entries }
    }

    pub fn to_matrix(&self) -> Result<CMatrix> {
        if self.entries.len() != self.dim * self.dim {
            return Err(WrError::InvalidConfig(format!(
                "matrix with dim {} needs {} entries, got {}",
                self.dim,
                self.dim * self.dim,
                self.entries.len()
            )));
        }
        Ok(CMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.entries[i * self.dim + j].to_complex()
        }))
    }
}

/// A rectangular matrix (e.g. a basis as columns) in row-major form.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisData {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<ComplexEntry>,
}

impl BasisData {
    pub fn to_matrix(&self) -> Result<CMatrix> {
        if self.entries.len() != self.rows * self.cols {
            return Err(WrError::InvalidConfig(format!(
                "basis with shape {}x{} needs {} entries, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.entries.len()
            )));
        }
        Ok(CMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.entries[i * self.cols + j].to_complex()
        }))
    }
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum R0Source {
    /// An explicit PSD matrix.
    Explicit { matrix: OperatorData },
    /// The identity on the span of the given orthonormal columns.
    IdentityOnSubspace { basis: BasisData },
    /// Seeded random PSD operator of a given rank, rescaled to a trace.
    RandomPsd { seed: u64, rank: usize, trace: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProjectionSource {
    Explicit { projections: Vec<OperatorData> },
    /// Coordinate projections onto `m` contiguous index blocks.
    CoordinateSplit { m: usize },
    /// Splitting family from the column blocks of a seeded random unitary.
    RandomSubspaceSplit { m: usize, seed: u64 },
    /// Independent random projections of the given ranks; with `blind > 0`
    /// they all avoid the last `blind` coordinates.
    RandomUnstructured {
        m: usize,
        ranks: Vec<usize>,
        seed: u64,
        #[serde(default)]
        blind: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureKindTag {
    Energy,
    Trace,
    ResidualBinary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub kind: MeasureKindTag,
    /// Probe vector; required for the energy and residual kinds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<ComplexEntry>>,
    /// Dead-node reference distribution; uniform when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<f64>>,
    #[serde(default = "default_dead_tol")]
    pub dead_tol: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModeConfig {
    Exhaustive,
    MonteCarlo { n_samples: usize },
}

fn default_dead_tol() -> f64 {
    DEFAULT_DEAD_TOL
}

fn default_stop_tol() -> f64 {
    sampler::DEFAULT_STOP_TOL
}

fn default_atom_tol() -> f64 {
    frame::DEFAULT_ATOM_TOL
}

fn default_budget() -> u64 {
    DEFAULT_NODE_BUDGET
}

fn default_rank_tol() -> f64 {
    crate::operator::RANK_TOL
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dim: usize,
    pub r0: R0Source,
    pub projections: ProjectionSource,
    pub measure: MeasureConfig,
    pub depth: usize,
    #[serde(default = "default_stop_tol")]
    pub stop_tol: f64,
    pub mode: ModeConfig,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub retain_ops: bool,
    #[serde(default = "default_atom_tol")]
    pub atom_tol: f64,
    #[serde(default = "default_budget")]
    pub budget: u64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

impl ScenarioConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(WrError::InvalidConfig("dim must be positive".into()));
        }
        if self.depth == 0 {
            return Err(WrError::InvalidConfig("depth must be at least 1".into()));
        }
        for (name, tol) in [
            ("stop_tol", self.stop_tol),
            ("atom_tol", self.atom_tol),
            ("rank_tol", self.rank_tol),
            ("dead_tol", self.measure.dead_tol),
        ] {
            if !(tol >= 0.0) || !tol.is_finite() {
                return Err(WrError::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {tol}"
                )));
            }
        }
        if self.budget == 0 {
            return Err(WrError::InvalidConfig("budget must be positive".into()));
        }
        if let ModeConfig::MonteCarlo { n_samples } = self.mode {
            if n_samples == 0 {
                return Err(WrError::InvalidConfig(
                    "monte_carlo mode needs n_samples >= 1".into(),
                ));
            }
        }
        match self.measure.kind {
            MeasureKindTag::Energy | MeasureKindTag::ResidualBinary => {
                let x = self.measure.x.as_ref().ok_or_else(|| {
                    WrError::InvalidConfig(
                        "energy and residual_binary measures need a probe vector x".into(),
                    )
                })?;
                if x.len() != self.dim {
                    return Err(WrError::DimensionMismatch {
                        expected: self.dim,
                        got: x.len(),
                    });
                }
            }
            MeasureKindTag::Trace => {}
        }
        if let ProjectionSource::RandomUnstructured { m, ranks, .. } = &self.projections {
            if ranks.len() != *m && ranks.len() != 1 {
                return Err(WrError::InvalidConfig(format!(
                    "ranks must list one rank per projection ({m}) or a single broadcast rank, got {}",
                    ranks.len()
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON echo of the config; reruns of the same config hash to
    /// the same run directory and produce identical artifacts.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialization cannot fail")
    }

    pub fn probe_vector(&self) -> Option<CVector> {
        self.measure.x.as_ref().map(|x| {
            CVector::from_vec(x.iter().map(|e| e.to_complex()).collect::<Vec<_>>())
        })
    }
}

/// Applies CLI-level overrides onto a loaded config.
pub fn apply_overrides(
    cfg: &mut ScenarioConfig,
    seed: Option<u64>,
    mode: Option<&str>,
    depth: Option<usize>,
    samples: Option<usize>,
) -> Result<()> {
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(depth) = depth {
        cfg.depth = depth;
    }
    if let Some(mode) = mode {
        cfg.mode = match mode {
            "exhaustive" => ModeConfig::Exhaustive,
            "monte-carlo" | "monte_carlo" => {
                let n_samples = samples
                    .or(match cfg.mode {
                        ModeConfig::MonteCarlo { n_samples } => Some(n_samples),
                        ModeConfig::Exhaustive => None,
                    })
                    .ok_or_else(|| {
                        WrError::InvalidConfig(
                            "switching to monte_carlo mode needs --samples".into(),
                        )
                    })?;
                ModeConfig::MonteCarlo { n_samples }
            }
            other => {
                return Err(WrError::InvalidConfig(format!(
                    "unknown mode {other:?}; expected exhaustive or monte-carlo"
                )))
            }
        };
    } else if let Some(samples) = samples {
        cfg.mode = ModeConfig::MonteCarlo { n_samples: samples };
    }
    cfg.validate()
}

// ---------------------------------------------------------------------------
// Instance generation
// ---------------------------------------------------------------------------

/// Derived facts about a generated instance.
#[derive(Clone, Debug, Serialize)]
pub struct InstanceInfo {
    pub dim: usize,
    pub m: usize,
    pub alpha: f64,
    pub splitting_on_h0: bool,
    pub contraction_factor: f64,
    pub h0_rank: usize,
    pub warnings: Vec<String>,
}

pub struct Instance {
    pub root: Arc<PsdOperator>,
    pub family: Arc<ProjectionFamily>,
    pub info: InstanceInfo,
}

impl Instance {
    pub fn cache(&self, budget: u64) -> Result<TreeCache> {
        Ok(TreeCache::from_arcs(self.root.clone(), self.family.clone())?.with_budget(budget))
    }
}

fn coordinate_split(dim: usize, m: usize) -> Vec<CMatrix> {
    (0..m)
        .map(|j| {
            let lo = j * dim / m;
            let hi = (j + 1) * dim / m;
            CMatrix::from_fn(dim, dim, |r, c| {
                if r == c && r >= lo && r < hi {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
        })
        .collect()
}

fn build_root(cfg: &ScenarioConfig) -> Result<PsdOperator> {
    match &cfg.r0 {
        R0Source::Explicit { matrix } => {
            if matrix.dim != cfg.dim {
                return Err(WrError::DimensionMismatch {
                    expected: cfg.dim,
                    got: matrix.dim,
                });
            }
            PsdOperator::validate(matrix.to_matrix()?)
        }
        R0Source::IdentityOnSubspace { basis } => {
            if basis.rows != cfg.dim {
                return Err(WrError::DimensionMismatch {
                    expected: cfg.dim,
                    got: basis.rows,
                });
            }
            let b = basis.to_matrix()?;
            let k = b.ncols();
            let gram_defect = (b.adjoint() * &b - CMatrix::identity(k, k)).norm();
            if gram_defect > 1e-10 * (k as f64).sqrt().max(1.0) {
                return Err(WrError::InvalidConfig(format!(
                    "subspace basis columns are not orthonormal (defect {gram_defect:.3e})"
                )));
            }
            PsdOperator::validate(crate::operator::hermitize(&(&b * b.adjoint())))
        }
        R0Source::RandomPsd { seed, rank, trace } => {
            random::random_psd(&mut random::seeded_rng(*seed), cfg.dim, *rank, *trace)
        }
    }
}

fn build_projections(cfg: &ScenarioConfig) -> Result<Vec<CMatrix>> {
    match &cfg.projections {
        ProjectionSource::Explicit { projections } => projections
            .iter()
            .map(|p| {
                if p.dim != cfg.dim {
                    return Err(WrError::DimensionMismatch {
                        expected: cfg.dim,
                        got: p.dim,
                    });
                }
                p.to_matrix()
            })
            .collect(),
        ProjectionSource::CoordinateSplit { m } => {
            if *m < 2 {
                return Err(WrError::InvalidConfig(format!(
                    "coordinate split needs at least 2 parts, got {m}"
                )));
            }
            Ok(coordinate_split(cfg.dim, *m))
        }
        ProjectionSource::RandomSubspaceSplit { m, seed } => {
            random::random_subspace_split(&mut random::seeded_rng(*seed), cfg.dim, *m)
        }
        ProjectionSource::RandomUnstructured {
            m,
            ranks,
            seed,
            blind,
        } => {
            let ranks = if ranks.len() == 1 {
                vec![ranks[0]; *m]
            } else {
                ranks.clone()
            };
            random::random_unstructured(&mut random::seeded_rng(*seed), cfg.dim, &ranks, *blind)
        }
    }
}

/// Builds and validates the instance a config describes.
pub fn generate_instance(cfg: &ScenarioConfig) -> Result<Instance> {
    cfg.validate()?;
    let root = build_root(cfg)?;
    let projections = build_projections(cfg)?;
    let family = ProjectionFamily::for_root(projections, &root, cfg.rank_tol)?;

    let mut warnings = Vec::new();
    let h0_rank = family.h0_basis().ncols();
    if h0_rank == 0 {
        warnings.push("root operator is zero".into());
    } else if h0_rank < cfg.dim {
        warnings.push(format!(
            "root operator is rank-deficient (energy support {h0_rank} of {})",
            cfg.dim
        ));
    }
    if family.alpha() <= 0.0 {
        warnings.push("leakage constant is zero: branch values need not decay".into());
    }

    let info = InstanceInfo {
        dim: cfg.dim,
        m: family.len(),
        alpha: family.alpha(),
        splitting_on_h0: family.splitting_on_h0(),
        contraction_factor: family.contraction_factor(),
        h0_rank,
        warnings,
    };
    Ok(Instance {
        root: Arc::new(root),
        family: Arc::new(family),
        info,
    })
}

/// Builds the measure spec a config describes.
pub fn build_measure(cfg: &ScenarioConfig) -> Result<MeasureSpec> {
    let spec = match cfg.measure.kind {
        MeasureKindTag::Energy => MeasureSpec::energy(cfg.probe_vector().ok_or_else(|| {
            WrError::InvalidConfig("energy measure needs a probe vector x".into())
        })?),
        MeasureKindTag::Trace => MeasureSpec::trace(),
        MeasureKindTag::ResidualBinary => {
            MeasureSpec::residual_binary(cfg.probe_vector().ok_or_else(|| {
                WrError::InvalidConfig("residual_binary measure needs a probe vector x".into())
            })?)
        }
    };
    let spec = spec.with_dead_tol(cfg.measure.dead_tol)?;
    match &cfg.measure.q {
        Some(q) => spec.with_fallback(q.clone()),
        None => Ok(spec),
    }
}

// ---------------------------------------------------------------------------
// Run execution and reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Enumerate,
    Frame,
    Alpha,
    Check,
}

impl Subcommand {
    pub fn as_str(&self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Enumerate => "enumerate",
            Subcommand::Frame => "frame",
            Subcommand::Alpha => "alpha",
            Subcommand::Check => "check",
        }
    }
}

/// One pass/fail line of a run.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub observed: f64,
    pub limit: f64,
    pub passed: bool,
}

impl CheckLine {
    fn at_most(name: &str, observed: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            observed,
            limit,
            passed: observed <= limit,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Parent directory for run outputs; defaults to `out`.
    pub out_dir: Option<PathBuf>,
    /// Rayon thread count; `None` uses the global default.
    pub threads: Option<usize>,
}

/// Everything a run produced.
pub struct RunReport {
    pub run_dir: PathBuf,
    pub checks: Vec<CheckLine>,
    pub all_passed: bool,
    pub info: InstanceInfo,
    /// Human-readable lines for terminal output.
    pub lines: Vec<String>,
}

#[derive(Serialize)]
struct LevelRow {
    n: usize,
    expectation: f64,
    bound: f64,
    std_error: Option<f64>,
    mode: ProfileMode,
}

#[derive(Serialize)]
struct SampleRow {
    sample_index: usize,
    word: String,
    stopping_depth: usize,
    final_residual: f64,
    stopped_reason: &'static str,
}

#[derive(Serialize)]
struct FrameHeader {
    dim: usize,
    m: usize,
    seed: u64,
    residual_trace_at_stop: f64,
    atom_tol: f64,
}

#[derive(Serialize)]
struct FrameAtomJson {
    k: usize,
    r: usize,
    lambda: f64,
    vector: Vec<[f64; 2]>,
    source_word: String,
}

#[derive(Serialize)]
struct FrameVerificationJson {
    max_parseval_defect: f64,
    frame_operator_defect: f64,
    span_defect: f64,
}

#[derive(Serialize)]
struct FrameJson {
    header: FrameHeader,
    atoms: Vec<FrameAtomJson>,
    verification: FrameVerificationJson,
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ScenarioConfig,
    subcommand: &'a str,
    instance: &'a InstanceInfo,
    checks: &'a [CheckLine],
    all_passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    conditional: Option<&'a ConditionalCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    balance: Option<&'a BalanceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    extinction: Option<&'a ExtinctionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<&'a FrameVerificationJson>,
}

fn config_hash(cfg: &ScenarioConfig, sub: Subcommand) -> String {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    sub.as_str().hash(&mut h);
    cfg.canonical_json().hash(&mut h);
    format!("{:016x}", h.finish())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_levels_csv(path: &Path, rows: &[LevelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_samples_csv(path: &Path, samples: &[BranchSample], m: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in samples.iter().enumerate() {
        w.serialize(SampleRow {
            sample_index: i,
            word: s.word.display(m),
            stopping_depth: s.depth(),
            final_residual: s.final_value(),
            stopped_reason: s.stop_reason.as_str(),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn level_rows(profile: &[LevelStats]) -> Vec<LevelRow> {
    profile
        .iter()
        .map(|s| LevelRow {
            n: s.level,
            expectation: s.expected_value,
            bound: s.bound,
            std_error: s.std_error,
            mode: s.mode,
        })
        .collect()
}

/// Level statistics of a sampled batch: stopped branches keep their final
/// value, which freezes the tracked scalar exactly like the stopped process.
fn batch_level_stats(batch: &[BranchSample], c: f64, root_scale: f64) -> Vec<LevelStats> {
    let max_depth = batch.iter().map(|s| s.depth()).max().unwrap_or(0);
    let n = batch.len() as f64;
    (0..=max_depth)
        .map(|k| {
            let mean = batch
                .iter()
                .map(|s| s.values.get(k).copied().unwrap_or_else(|| s.final_value()))
                .sum::<f64>()
                / n;
            let var = if batch.len() > 1 {
                batch
                    .iter()
                    .map(|s| {
                        let v = s.values.get(k).copied().unwrap_or_else(|| s.final_value());
                        (v - mean).powi(2)
                    })
                    .sum::<f64>()
                    / (n - 1.0)
            } else {
                0.0
            };
            LevelStats {
                level: k,
                expected_value: mean,
                bound: c.powi(k as i32) * root_scale,
                std_error: Some((var / n).sqrt()),
                mode: ProfileMode::MonteCarlo,
            }
        })
        .collect()
}

/// Largest exhaustively checkable depth: the deepest `t <= depth` with
/// `m^(t+1)` within both the node budget and a hard work cap.
fn capped_depth(m: usize, depth: usize, budget: u64) -> usize {
    let cap = budget.min(4096) as u128;
    let mut t = 0usize;
    let mut nodes: u128 = m as u128; // m^(t+1) at t = 0
    while t < depth {
        let next = nodes.saturating_mul(m as u128);
        if next > cap {
            break;
        }
        nodes = next;
        t += 1;
    }
    t
}

fn frame_json(
    cfg: &ScenarioConfig,
    info: &InstanceInfo,
    system: &AtomSystem,
    verification: FrameVerificationJson,
) -> FrameJson {
    FrameJson {
        header: FrameHeader {
            dim: info.dim,
            m: info.m,
            seed: cfg.master_seed,
            residual_trace_at_stop: system.residual_trace_at_stop,
            atom_tol: system.atom_tol,
        },
        atoms: system
            .atoms
            .iter()
            .map(|a| FrameAtomJson {
                k: a.step,
                r: a.rank_index,
                lambda: a.eigenvalue,
                vector: a.vector.iter().map(|z| [z.re, z.im]).collect(),
                source_word: a.source_word.display(info.m),
            })
            .collect(),
        verification,
    }
}

/// Runs one subcommand of a scenario and writes its report files. Checks are
/// recorded in the report; `all_passed` decides the process exit code.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    sub: Subcommand,
    opts: &RunOptions,
) -> Result<RunReport> {
    match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| WrError::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| execute(cfg, sub, opts))
        }
        None => execute(cfg, sub, opts),
    }
}

fn execute(cfg: &ScenarioConfig, sub: Subcommand, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let instance = generate_instance(cfg)?;
    let cache = instance.cache(cfg.budget)?;
    let spec = build_measure(cfg)?;
    spec.validate_for(&cache)?;

    let out_parent = opts.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let run_dir = out_parent.join(format!("run-{}", config_hash(cfg, sub)));
    std::fs::create_dir_all(&run_dir)?;

    let info = instance.info.clone();
    let root_scale = spec.root_scale(&cache);
    let c = instance.family.contraction_factor();
    let mut checks: Vec<CheckLine> = Vec::new();
    let mut lines: Vec<String> = Vec::new();
    let mut conditional: Option<ConditionalCheck> = None;
    let mut balance: Option<BalanceReport> = None;
    let mut extinction: Option<ExtinctionSummary> = None;
    let mut frame_block: Option<FrameVerificationJson> = None;

    lines.push(format!(
        "instance: dim {}, m {}, alpha {:.6}, contraction factor {:.6}, splitting {}",
        info.dim, info.m, info.alpha, info.contraction_factor, info.splitting_on_h0
    ));
    for w in &info.warnings {
        lines.push(format!("warning: {w}"));
    }

    match sub {
        Subcommand::Alpha => {}
        Subcommand::Enumerate => {
            let profile =
                sampler::expectation_profile(&cache, &spec, cfg.depth, ProfileMethod::Exhaustive)?;
            write_levels_csv(&run_dir.join("levels.csv"), &level_rows(&profile))?;

            let leaves = sampler::enumerate_level(&cache, &spec, cfg.depth)?;
            let mass: f64 = leaves.iter().map(|(_, p, _)| p).sum();
            checks.push(CheckLine::at_most(
                "cylinder_mass_defect",
                (mass - 1.0).abs(),
                1e-12,
            ));

            let cond_depth = capped_depth(info.m, cfg.depth.saturating_sub(1), cfg.budget);
            let cond = sampler::conditional_supermartingale_check(&cache, &spec, cond_depth)?;
            checks.push(CheckLine::at_most(
                "supermartingale_violation",
                cond.max_supermartingale_violation,
                1e-10 * root_scale,
            ));
            checks.push(CheckLine::at_most(
                "contraction_violation",
                cond.max_contraction_violation,
                1e-10 * root_scale,
            ));
            conditional = Some(cond);

            let bal =
                sampler::energy_balance_report(&cache, &spec, cfg.depth, ProfileMethod::Exhaustive)?;
            checks.push(CheckLine::at_most(
                "balance_defect",
                bal.defect,
                1e-10 * root_scale,
            ));
            checks.push(CheckLine::at_most(
                "balance_tail_defect",
                bal.max_tail_defect,
                1e-10 * root_scale,
            ));
            balance = Some(bal);
        }
        Subcommand::Simulate => {
            let n_samples = match cfg.mode {
                ModeConfig::MonteCarlo { n_samples } => n_samples,
                ModeConfig::Exhaustive => {
                    return Err(WrError::InvalidConfig(
                        "simulate needs monte_carlo mode (or --samples)".into(),
                    ))
                }
            };
            let batch = sample_batch(
                &cache,
                &spec,
                n_samples,
                cfg.depth,
                cfg.stop_tol,
                cfg.master_seed,
                cfg.retain_ops,
            )?;
            write_samples_csv(&run_dir.join("samples.csv"), &batch, info.m)?;

            let profile = batch_level_stats(&batch, c, root_scale);
            write_levels_csv(&run_dir.join("levels.csv"), &level_rows(&profile))?;

            let excess = profile
                .iter()
                .map(|s| s.expected_value - s.bound - 4.0 * s.std_error.unwrap_or(0.0))
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(CheckLine::at_most(
                "profile_bound_excess",
                excess,
                1e-10 * root_scale,
            ));

            extinction = Some(extinction_stats(&batch, c)?);
        }
        Subcommand::Frame => {
            let mut worker = instance.cache(cfg.budget)?;
            let sample = sampler::sample_branch(
                &mut worker,
                &spec,
                cfg.depth,
                cfg.stop_tol,
                StreamSeed::new(cfg.master_seed, 0),
                true,
            )?;
            let system = frame::branch_atoms(&sample, cfg.atom_tol)?;

            let mut probes: Vec<CVector> = (0..instance.family.h0_basis().ncols())
                .map(|j| instance.family.h0_basis().column(j).into_owned())
                .collect();
            if let Some(x) = cfg.probe_vector() {
                probes.push(x);
            }
            let max_parseval = probes
                .iter()
                .map(|x| frame::parseval_defect(&system, x, &instance.root))
                .fold(0.0_f64, f64::max);
            let s = frame::frame_operator(&system, info.dim)?;
            let frame_operator_defect = (s.matrix() - instance.root.matrix()).norm();
            let span = frame::span_defect(&system, instance.family.h0_basis())?;

            let root_trace = instance.root.trace();
            let root_norm = instance.root.matrix().norm();
            checks.push(CheckLine::at_most(
                "branch_extinct_trace",
                system.residual_trace_at_stop,
                1e-10 * root_trace,
            ));
            checks.push(CheckLine::at_most(
                "parseval_defect",
                max_parseval,
                1e-6 * root_trace,
            ));
            checks.push(CheckLine::at_most(
                "frame_operator_defect",
                frame_operator_defect,
                1e-6 * root_norm,
            ));
            checks.push(CheckLine::at_most("span_defect", span, 1e-6));

            let verification = FrameVerificationJson {
                max_parseval_defect: max_parseval,
                frame_operator_defect,
                span_defect: span,
            };
            write_json(
                &run_dir.join("frame.json"),
                &frame_json(cfg, &info, &system, verification),
            )?;
            frame_block = Some(FrameVerificationJson {
                max_parseval_defect: max_parseval,
                frame_operator_defect,
                span_defect: span,
            });
            lines.push(format!(
                "frame: {} atoms from a depth-{} branch, residual trace {:.3e}",
                system.len(),
                sample.depth(),
                system.residual_trace_at_stop
            ));
        }
        Subcommand::Check => {
            let root_norm = instance.root.matrix().norm();
            let mut one_step = 0.0_f64;
            for idx in 0..info.m {
                let p = instance.family.projection(idx);
                let child = crate::operator::wr_update(&instance.root, p)?;
                let diss = crate::operator::dissipated(&instance.root, p)?;
                let defect =
                    (instance.root.matrix() - child.matrix() - diss.matrix()).norm();
                one_step = one_step.max(defect);
            }
            checks.push(CheckLine::at_most(
                "one_step_identity_defect",
                one_step,
                1e-10 * root_norm,
            ));

            let mut worker = instance.cache(cfg.budget)?;
            let sample = sampler::sample_branch(
                &mut worker,
                &spec,
                cfg.depth,
                cfg.stop_tol,
                StreamSeed::new(cfg.master_seed, 0),
                false,
            )?;
            let telescoping = worker.branch_telescoping_defect(&sample.word)?;
            checks.push(CheckLine::at_most(
                "telescoping_defect",
                telescoping,
                1e-8 * root_norm,
            ));

            let t = capped_depth(info.m, cfg.depth, cfg.budget);
            let cond = sampler::conditional_supermartingale_check(&cache, &spec, t)?;
            checks.push(CheckLine::at_most(
                "supermartingale_violation",
                cond.max_supermartingale_violation,
                1e-10 * root_scale,
            ));
            checks.push(CheckLine::at_most(
                "contraction_violation",
                cond.max_contraction_violation,
                1e-10 * root_scale,
            ));
            conditional = Some(cond);

            let leaves = sampler::enumerate_level(&cache, &spec, t)?;
            let mass: f64 = leaves.iter().map(|(_, p, _)| p).sum();
            checks.push(CheckLine::at_most(
                "cylinder_mass_defect",
                (mass - 1.0).abs(),
                1e-12,
            ));

            let bal = sampler::energy_balance_report(&cache, &spec, t, ProfileMethod::Exhaustive)?;
            checks.push(CheckLine::at_most(
                "balance_defect",
                bal.defect,
                1e-10 * root_scale,
            ));
            checks.push(CheckLine::at_most(
                "balance_tail_defect",
                bal.max_tail_defect,
                1e-10 * root_scale,
            ));
            balance = Some(bal);
        }
    }

    let all_passed = checks.iter().all(|c| c.passed);
    for check in &checks {
        lines.push(format!(
            "check {}: {:.6e} <= {:.6e} ... {}",
            check.name,
            check.observed,
            check.limit,
            if check.passed { "pass" } else { "FAIL" }
        ));
    }

    let summary = Summary {
        config: cfg,
        subcommand: sub.as_str(),
        instance: &info,
        checks: &checks,
        all_passed,
        conditional: conditional.as_ref(),
        balance: balance.as_ref(),
        extinction: extinction.as_ref(),
        frame: frame_block.as_ref(),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;
    lines.push(format!("report: {}", run_dir.join("summary.json").display()));

    Ok(RunReport {
        run_dir,
        checks,
        all_passed,
        info,
        lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn worked_example_config(mode: ModeConfig) -> ScenarioConfig {
        ScenarioConfig {
            dim: 2,
            r0: R0Source::Explicit {
                matrix: OperatorData {
                    dim: 2,
                    entries: vec![
                        ComplexEntry::Real(1.0),
                        ComplexEntry::Real(0.0),
                        ComplexEntry::Real(0.0),
                        ComplexEntry::Real(1.0),
                    ],
                },
            },
            projections: ProjectionSource::CoordinateSplit { m: 2 },
            measure: MeasureConfig {
                kind: MeasureKindTag::Energy,
                x: Some(vec![
                    ComplexEntry::Pair([std::f64::consts::FRAC_1_SQRT_2, 0.0]),
                    ComplexEntry::Pair([std::f64::consts::FRAC_1_SQRT_2, 0.0]),
                ]),
                q: None,
                dead_tol: DEFAULT_DEAD_TOL,
            },
            depth: 4,
            stop_tol: 1e-12,
            mode,
            master_seed: 7,
            retain_ops: false,
            atom_tol: 1e-12,
            budget: DEFAULT_NODE_BUDGET,
            rank_tol: 1e-12,
        }
    }

    #[test]
    fn matrix_interchange_round_trips_exactly() {
        let m = CMatrix::from_fn(3, 3, |i, j| {
            Complex64::new((i * 3 + j) as f64 / 7.0, ((i + j) as f64).sin())
        });
        let data = OperatorData::from_matrix(&m);
        let json = serde_json::to_string(&data).unwrap();
        let back: OperatorData = serde_json::from_str(&json).unwrap();
        assert_eq!((back.to_matrix().unwrap() - m).norm(), 0.0);
    }

    #[test]
    fn bare_reals_are_promoted() {
        let json = r#"{"dim": 2, "entries": [1.0, 0.0, 0.0, [0.5, -0.25]]}"#;
        let data: OperatorData = serde_json::from_str(json).unwrap();
        let m = data.to_matrix().unwrap();
        assert_eq!(m[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(m[(1, 1)], Complex64::new(0.5, -0.25));
    }

    #[test]
    fn config_round_trip_is_canonical() {
        let cfg = worked_example_config(ModeConfig::Exhaustive);
        let json = cfg.canonical_json();
        let back = ScenarioConfig::from_json(&json).unwrap();
        assert_eq!(json, back.canonical_json());
    }

    #[test]
    fn instance_generation_reports_alpha_and_splitting() {
        let cfg = worked_example_config(ModeConfig::Exhaustive);
        let instance = generate_instance(&cfg).unwrap();
        assert_abs_diff_eq!(instance.info.alpha, 1.0, epsilon = 1e-12);
        assert!(instance.info.splitting_on_h0);
        assert_abs_diff_eq!(instance.info.contraction_factor, 0.5, epsilon = 1e-14);
        assert!(instance.info.warnings.is_empty());
    }

    #[test]
    fn overrides_update_seed_depth_and_mode() {
        let mut cfg = worked_example_config(ModeConfig::Exhaustive);
        apply_overrides(&mut cfg, Some(99), Some("monte-carlo"), Some(6), Some(50)).unwrap();
        assert_eq!(cfg.master_seed, 99);
        assert_eq!(cfg.depth, 6);
        assert!(matches!(cfg.mode, ModeConfig::MonteCarlo { n_samples: 50 }));

        let mut cfg = worked_example_config(ModeConfig::Exhaustive);
        assert!(apply_overrides(&mut cfg, None, Some("monte-carlo"), None, None).is_err());
        assert!(apply_overrides(&mut cfg, None, Some("bogus"), None, None).is_err());
    }

    #[test]
    fn enumerate_run_passes_and_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = worked_example_config(ModeConfig::Exhaustive);
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        let report = run_scenario(&cfg, Subcommand::Enumerate, &opts).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);

        let summary1 = std::fs::read(report.run_dir.join("summary.json")).unwrap();
        let levels1 = std::fs::read(report.run_dir.join("levels.csv")).unwrap();
        let report2 = run_scenario(&cfg, Subcommand::Enumerate, &opts).unwrap();
        assert_eq!(report.run_dir, report2.run_dir);
        assert_eq!(
            summary1,
            std::fs::read(report2.run_dir.join("summary.json")).unwrap()
        );
        assert_eq!(
            levels1,
            std::fs::read(report2.run_dir.join("levels.csv")).unwrap()
        );

        let text = String::from_utf8(levels1).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "n,expectation,bound,std_error,mode"
        );
        assert_eq!(lines.clone().count(), cfg.depth + 1);
    }

    #[test]
    fn simulate_run_writes_samples_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = worked_example_config(ModeConfig::MonteCarlo { n_samples: 32 });
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: Some(2),
        };
        let report = run_scenario(&cfg, Subcommand::Simulate, &opts).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);

        let samples = std::fs::read_to_string(report.run_dir.join("samples.csv")).unwrap();
        let mut lines = samples.lines();
        assert_eq!(
            lines.next().unwrap(),
            "sample_index,word,stopping_depth,final_residual,stopped_reason"
        );
        assert_eq!(lines.count(), 32);
        assert!(report.run_dir.join("levels.csv").exists());

        // Same config, different thread count: byte-identical outputs.
        let single = RunOptions {
            out_dir: Some(dir.path().join("single")),
            threads: Some(1),
        };
        let report_single = run_scenario(&cfg, Subcommand::Simulate, &single).unwrap();
        assert_eq!(
            std::fs::read(report.run_dir.join("samples.csv")).unwrap(),
            std::fs::read(report_single.run_dir.join("samples.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(report.run_dir.join("levels.csv")).unwrap(),
            std::fs::read(report_single.run_dir.join("levels.csv")).unwrap()
        );
    }

    #[test]
    fn frame_run_exports_atoms() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = worked_example_config(ModeConfig::Exhaustive);
        cfg.measure = MeasureConfig {
            kind: MeasureKindTag::Trace,
            x: None,
            q: None,
            dead_tol: DEFAULT_DEAD_TOL,
        };
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        let report = run_scenario(&cfg, Subcommand::Frame, &opts).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);

        let text = std::fs::read_to_string(report.run_dir.join("frame.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["header"]["dim"], 2);
        assert_eq!(parsed["atoms"].as_array().unwrap().len(), 2);
        assert!(parsed["verification"]["max_parseval_defect"].as_f64().unwrap() <= 1e-10);
    }

    #[test]
    fn check_run_passes_on_random_splitting_instance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            dim: 5,
            r0: R0Source::RandomPsd {
                seed: 3,
                rank: 5,
                trace: 5.0,
            },
            projections: ProjectionSource::RandomSubspaceSplit { m: 2, seed: 4 },
            measure: MeasureConfig {
                kind: MeasureKindTag::Trace,
                x: None,
                q: None,
                dead_tol: DEFAULT_DEAD_TOL,
            },
            depth: 8,
            stop_tol: 1e-12,
            mode: ModeConfig::Exhaustive,
            master_seed: 1,
            retain_ops: false,
            atom_tol: 1e-12,
            budget: DEFAULT_NODE_BUDGET,
            rank_tol: 1e-12,
        };
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        let report = run_scenario(&cfg, Subcommand::Check, &opts).unwrap();
        assert!(report.all_passed, "checks: {:?}", report.checks);
        assert!(report.checks.len() >= 6);
    }

    #[test]
    fn alpha_run_reports_zero_leakage_for_blind_instance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ScenarioConfig {
            dim: 6,
            r0: R0Source::RandomPsd {
                seed: 11,
                rank: 6,
                trace: 6.0,
            },
            projections: ProjectionSource::RandomUnstructured {
                m: 2,
                ranks: vec![2],
                seed: 12,
                blind: 2,
            },
            measure: MeasureConfig {
                kind: MeasureKindTag::Trace,
                x: None,
                q: None,
                dead_tol: DEFAULT_DEAD_TOL,
            },
            depth: 4,
            stop_tol: 1e-12,
            mode: ModeConfig::Exhaustive,
            master_seed: 0,
            retain_ops: false,
            atom_tol: 1e-12,
            budget: DEFAULT_NODE_BUDGET,
            rank_tol: 1e-12,
        };
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        let report = run_scenario(&cfg, Subcommand::Alpha, &opts).unwrap();
        assert!(report.all_passed);
        assert_abs_diff_eq!(report.info.alpha, 0.0, epsilon = 1e-12);
        assert!(report
            .info
            .warnings
            .iter()
            .any(|w| w.contains("leakage constant is zero")));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = worked_example_config(ModeConfig::Exhaustive);
        cfg.measure.x = None;
        assert!(cfg.validate().is_err());

        let mut cfg = worked_example_config(ModeConfig::MonteCarlo { n_samples: 0 });
        assert!(cfg.validate().is_err());
        cfg.mode = ModeConfig::Exhaustive;
        cfg.depth = 0;
        assert!(cfg.validate().is_err());

        let cfg = worked_example_config(ModeConfig::Exhaustive);
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: None,
        };
        // simulate without monte_carlo mode is a config error
        assert!(run_scenario(&cfg, Subcommand::Simulate, &opts).is_err());
    }

    #[test]
    fn capped_depth_respects_budget_and_cap() {
        assert_eq!(capped_depth(2, 50, DEFAULT_NODE_BUDGET), 11); // 2^12 = 4096
        assert_eq!(capped_depth(3, 2, DEFAULT_NODE_BUDGET), 2);
        assert_eq!(capped_depth(2, 50, 16), 3); // 2^4 = 16
    }
}
