//! Scenario files, homodyne-angle sweeps, controller grid search and result
//! emission.
//!
//! A scenario is JSON:
//!
//! ```json
//! {
//!   "name": "fig4",
//!   "plant": { "builder": "cavity", "kappa1": 0.5, "kappa2": 0.5, "chi": 0.0 },
//!   "controller": { "builder": "squeezer", "kappa1": 5.0, "kappa2": 5.0, "chi": -0.5 },
//!   "angles": { "start": 0.0, "stop": 180.0, "step": 1.0 },
//!   "homodyne": { "offsets_deg": [0.0] },
//!   "solver": { "tol": 1e-10, "condition_limit": 1e12, "noise": "identity" }
//! }
//! ```
//!
//! `controller` may be omitted or `null` for classical-only estimation.
//! Complex parameters are either a number or an `[re, im]` pair. Detector
//! `i` at sweep angle `θ` sits at `θ + offsets_deg[i]`; the grid is
//! half-open, `stop` is excluded.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use num_complex::Complex64;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doubled::{self, CMatrix};
use crate::homodyne::{quadrature_selector, HomodyneError};
use crate::interconnect::{classical_only, close_loop, AugmentedSystem, InterconnectError};
use crate::linalg::fro_norm;
use crate::qsystem::{
    build_beam_splitter_controller, build_cavity_plant, build_passthrough_controller, build_squeezer_controller,
    check_physical_realizability, check_static_unitarity, CoherentController, NotRealizable, PhysicalRealization,
    QuantumLinearSystem, SystemBuilder, SystemError,
};
use crate::synthesis::{
    is_hurwitz, joint_error_cost, synthesize, unfiltered_variance, FilterProblem, NoiseConvention, SolverOptions,
    SynthesisError,
};

/// Relative agreement required between the Riccati cost and the oracle.
pub const ORACLE_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Homodyne(#[from] HomodyneError),
    #[error(transparent)]
    Interconnect(#[from] InterconnectError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("joint-Lyapunov oracle: {0}")]
    Oracle(SynthesisError),
    #[error("not physically realizable: {0}")]
    NotRealizable(#[from] NotRealizable),
    #[error("{failed} of {total} rows failed; first at θ = {theta}°: {message}")]
    RowFailures {
        failed: usize,
        total: usize,
        theta: f64,
        message: String,
    },
    #[error("no feasible controller candidate")]
    NoFeasibleCandidate,
}

impl ExperimentError {
    /// Errors caused by the input files rather than by the numerics.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config(_)
            | ExperimentError::Io { .. }
            | ExperimentError::Parse { .. }
            | ExperimentError::System(_)
            | ExperimentError::Homodyne(_) => true,
            ExperimentError::Interconnect(e) => !matches!(e, InterconnectError::NotRealizable(_)),
            _ => false,
        }
    }
}

fn config(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ComplexLiteral {
    Real(f64),
    Pair([f64; 2]),
}

/// A complex number written as a real or as `[re, im]`.
fn complex_value<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
    Ok(match ComplexLiteral::deserialize(d)? {
        ComplexLiteral::Real(x) => Complex64::new(x, 0.0),
        ComplexLiteral::Pair([x, y]) => Complex64::new(x, y),
    })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct MatrixLiteral(#[serde(with = "doubled::literal")] pub CMatrix);

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInput {
    pub name: String,
    pub half_width: usize,
    pub g: MatrixLiteral,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub name: String,
    pub half_width: usize,
    pub h: MatrixLiteral,
    /// Feedthrough blocks keyed by input name; missing blocks are zero.
    #[serde(default)]
    pub k: BTreeMap<String, MatrixLiteral>,
}

/// A system given by its matrices in per-channel doubled order. Empty
/// literals (`[]`) stand for zero-sized blocks.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSystem {
    pub n: usize,
    pub f: MatrixLiteral,
    pub inputs: Vec<RawInput>,
    pub outputs: Vec<RawOutput>,
    #[serde(default)]
    pub cost: Option<MatrixLiteral>,
}

fn sized(m: &MatrixLiteral, rows: usize, cols: usize) -> CMatrix {
    if m.0.is_empty() {
        CMatrix::zeros(rows, cols)
    } else {
        m.0.clone()
    }
}

impl RawSystem {
    pub fn build(&self, tol: f64) -> Result<QuantumLinearSystem, SystemError> {
        let n2 = 2 * self.n;
        let mut b = SystemBuilder::new(self.n, sized(&self.f, n2, n2)).tolerance(tol);
        for i in &self.inputs {
            b = b.input(&i.name, i.half_width, sized(&i.g, n2, 2 * i.half_width));
        }
        for o in &self.outputs {
            let k: Vec<(&str, CMatrix)> =
                o.k.iter()
                    .map(|(name, m)| {
                        let w = self.inputs.iter().find(|i| &i.name == name).map_or(0, |i| i.half_width);
                        (name.as_str(), sized(m, 2 * o.half_width, 2 * w))
                    })
                    .collect();
            b = b.output(&o.name, o.half_width, sized(&o.h, 2 * o.half_width, n2), k);
        }
        if let Some(c) = &self.cost {
            b = b.cost(c.0.clone());
        }
        b.build()
    }
}

/// A system by builder name or by raw matrices.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "builder", rename_all = "snake_case")]
pub enum SystemSpec {
    /// Cavity plant with channels `A`, `U`, `Y` and cost `C`.
    Cavity {
        kappa1: f64,
        kappa2: f64,
        #[serde(default, deserialize_with = "complex_value")]
        chi: Complex64,
    },
    /// Squeezer wired as coherent controller.
    Squeezer {
        kappa1: f64,
        kappa2: f64,
        #[serde(default, deserialize_with = "complex_value")]
        chi: Complex64,
    },
    /// 50/50 (by default) static beam splitter, no feedback.
    BeamSplitter {
        #[serde(default = "default_mix_deg")]
        mix_deg: f64,
    },
    Passthrough {
        #[serde(default = "one")]
        half_width: usize,
    },
    Raw(RawSystem),
}

fn default_mix_deg() -> f64 {
    45.0
}

fn one() -> usize {
    1
}

impl SystemSpec {
    pub fn build(&self, tol: f64) -> Result<QuantumLinearSystem, SystemError> {
        match self {
            SystemSpec::Cavity { kappa1, kappa2, chi } => build_cavity_plant(*kappa1, *kappa2, *chi),
            SystemSpec::Squeezer { kappa1, kappa2, chi } => {
                Ok(build_squeezer_controller(*kappa1, *kappa2, *chi)?.into_system())
            }
            SystemSpec::BeamSplitter { mix_deg } => {
                if !mix_deg.is_finite() {
                    return Err(SystemError::InvalidParameter("mix_deg must be finite".into()));
                }
                Ok(build_beam_splitter_controller(mix_deg.to_radians()).into_system())
            }
            SystemSpec::Passthrough { half_width } => Ok(build_passthrough_controller(*half_width).into_system()),
            SystemSpec::Raw(raw) => raw.build(tol),
        }
    }

    pub fn build_controller(&self, tol: f64) -> Result<CoherentController, SystemError> {
        CoherentController::new(self.build(tol)?)
    }
}

/// Half-open angle grid `[start, stop)` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for AngleGrid {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 180.0,
            step: 1.0,
        }
    }
}

impl AngleGrid {
    pub fn single(theta: f64) -> Self {
        Self {
            start: theta,
            stop: theta + 1.0,
            step: 1.0,
        }
    }

    pub fn values(&self) -> Result<Vec<f64>, ExperimentError> {
        let AngleGrid { start, stop, step } = *self;
        if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
            return Err(config("angle grid must be finite"));
        }
        if step <= 0.0 {
            return Err(config(format!("angle step must be positive, got {step}")));
        }
        let count = ((stop - start) / step - 1e-9).ceil();
        if count < 1.0 {
            return Err(config(format!("angle grid [{start}, {stop}) is empty")));
        }
        if count > 1e7 {
            return Err(config("angle grid has more than 10^7 points"));
        }
        Ok((0..count as usize).map(|i| start + i as f64 * step).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomodyneSpec {
    /// Per-detector offsets added to the sweep angle.
    pub offsets_deg: Vec<f64>,
}

impl Default for HomodyneSpec {
    fn default() -> Self {
        Self { offsets_deg: vec![0.0] }
    }
}

impl HomodyneSpec {
    pub fn angles(&self, theta: f64) -> Vec<f64> {
        self.offsets_deg.iter().map(|o| theta + o).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub tol: f64,
    pub condition_limit: f64,
    pub noise: NoiseConvention,
    /// Tolerance of the realizability and Δ-structure checks.
    pub realizability_tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self {
            tol: d.tol,
            condition_limit: d.condition_limit,
            noise: d.noise,
            realizability_tol: doubled::DEFAULT_TOL,
        }
    }
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            condition_limit: self.condition_limit,
            noise: self.noise,
            ..SolverOptions::default()
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        for (name, v) in [
            ("tol", self.tol),
            ("condition_limit", self.condition_limit),
            ("realizability_tol", self.realizability_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config(format!("solver.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub plant: SystemSpec,
    #[serde(default)]
    pub controller: Option<SystemSpec>,
    #[serde(default)]
    pub angles: AngleGrid,
    #[serde(default)]
    pub homodyne: HomodyneSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub output: Option<OutputSpec>,
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Parse {
        path: path.to_owned(),
        source,
    })
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        read_json(path)
    }

    /// Build the closed loop (or the classical-only baseline).
    pub fn augmented(&self) -> Result<AugmentedSystem, ExperimentError> {
        self.solver.validate()?;
        let tol = self.solver.realizability_tol;
        let plant = self.plant.build(tol)?;
        let aug = match &self.controller {
            None => classical_only(&plant)?,
            Some(spec) => close_loop(&plant, &spec.build_controller(tol)?, tol)?,
        };
        if self.homodyne.offsets_deg.len() != aug.measured_half_width {
            return Err(config(format!(
                "measured field has {} channel(s) but homodyne.offsets_deg lists {}",
                aug.measured_half_width,
                self.homodyne.offsets_deg.len()
            )));
        }
        Ok(aug)
    }
}

/// How independent rows are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Rayon work-stealing pool; sequential when built without `parallel`.
    Parallel,
    Sequential,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// Map preserving input order.
fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta_deg: f64,
    pub cost: f64,
    pub gain_norm: f64,
    pub residual: f64,
    pub stabilizing: bool,
    pub oracle_cost: f64,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(theta_deg: f64, error: String) -> Self {
        Self {
            theta_deg,
            cost: f64::NAN,
            gain_norm: f64::NAN,
            residual: f64::NAN,
            stabilizing: false,
            oracle_cost: f64::NAN,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn failures(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    /// Fail if any row recorded an error.
    pub fn check(&self) -> Result<(), ExperimentError> {
        let failed = self.failures().count();
        match self.failures().next() {
            None => Ok(()),
            Some(first) => Err(ExperimentError::RowFailures {
                failed,
                total: self.rows.len(),
                theta: first.theta_deg,
                message: first.error.clone().unwrap_or_default(),
            }),
        }
    }

    /// Row with the smallest cost among successful rows.
    pub fn argmin(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.error.is_none())
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
    }
}

fn evaluate_row(aug: &AugmentedSystem, homodyne: &HomodyneSpec, theta: f64, opts: &SolverOptions) -> SweepRow {
    let run = || -> Result<SweepRow, ExperimentError> {
        let hd = quadrature_selector(&homodyne.angles(theta))?;
        let problem = FilterProblem::from_augmented(aug, &hd)?;
        let est = synthesize(&problem, opts)?;
        let oracle = joint_error_cost(&problem, &est.g_e, opts.noise).map_err(ExperimentError::Oracle)?;
        let mut row = SweepRow {
            theta_deg: theta,
            cost: est.cost,
            gain_norm: fro_norm(&est.g_e),
            residual: est.riccati.residual,
            stabilizing: est.riccati.stabilizing,
            oracle_cost: oracle,
            error: None,
        };
        if (oracle - est.cost).abs() >= ORACLE_TOL * (1.0 + est.cost.abs()) {
            row.error = Some(format!("oracle cost {oracle} disagrees with Riccati cost {}", est.cost));
        }
        Ok(row)
    };
    run().unwrap_or_else(|e| SweepRow::failed(theta, e.to_string()))
}

pub fn run_sweep(scenario: &Scenario) -> Result<SweepResult, ExperimentError> {
    run_sweep_with(scenario, Execution::default())
}

/// Evaluate every angle of the scenario grid. Per-row failures are kept in
/// the rows; see [`SweepResult::check`].
pub fn run_sweep_with(scenario: &Scenario, exec: Execution) -> Result<SweepResult, ExperimentError> {
    let thetas = scenario.angles.values()?;
    let aug = scenario.augmented()?;
    let opts = scenario.solver.options();
    info!(
        "sweeping {} angle(s) for scenario `{}` ({:?})",
        thetas.len(),
        scenario.name,
        exec
    );
    let rows = map_ordered(&thetas, exec, |&t| evaluate_row(&aug, &scenario.homodyne, t, &opts));
    let result = SweepResult { rows };
    for r in result.failures() {
        debug!("θ = {}°: {}", r.theta_deg, r.error.as_deref().unwrap_or(""));
    }
    if let Err(e) = result.check() {
        warn!("{e}");
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub theta_deg: f64,
    pub cost: f64,
    pub oracle_cost: f64,
    pub relative_gap: f64,
    pub unfiltered_variance: f64,
    pub agrees: bool,
}

/// Riccati cost against the joint-Lyapunov oracle at a single angle.
pub fn oracle_report(scenario: &Scenario, theta: f64) -> Result<OracleReport, ExperimentError> {
    if !theta.is_finite() {
        return Err(config("theta must be finite"));
    }
    let aug = scenario.augmented()?;
    let opts = scenario.solver.options();
    let hd = quadrature_selector(&scenario.homodyne.angles(theta))?;
    let problem = FilterProblem::from_augmented(&aug, &hd)?;
    let est = synthesize(&problem, &opts)?;
    let oracle = joint_error_cost(&problem, &est.g_e, opts.noise).map_err(ExperimentError::Oracle)?;
    let gap = (oracle - est.cost).abs() / (1.0 + est.cost.abs());
    Ok(OracleReport {
        theta_deg: theta,
        cost: est.cost,
        oracle_cost: oracle,
        relative_gap: gap,
        unfiltered_variance: unfiltered_variance(&problem, opts.noise)?,
        agrees: gap < ORACLE_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealizabilityReport {
    Dynamic(PhysicalRealization),
    Static { unitarity_defect: f64 },
}

/// Certify a system: `(Θ, M, N)` when it has internal modes, unitarity of
/// the scattering matrix otherwise.
pub fn realizability_report(spec: &SystemSpec, tol: f64) -> Result<RealizabilityReport, ExperimentError> {
    let sys = spec.build(tol)?;
    if sys.n() == 0 {
        let defect = check_static_unitarity(&sys, tol)?;
        Ok(RealizabilityReport::Static {
            unitarity_defect: defect,
        })
    } else {
        Ok(RealizabilityReport::Dynamic(check_physical_realizability(&sys, tol)?))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSearchConfig {
    pub plant: SystemSpec,
    pub chi: Vec<f64>,
    pub kappa: Vec<f64>,
    #[serde(default)]
    pub angles: AngleGrid,
    #[serde(default)]
    pub homodyne: HomodyneSpec,
    #[serde(default)]
    pub solver: SolverSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCandidate {
    pub chi: f64,
    /// Shared rate `κ1 = κ2` of the squeezer controller.
    pub kappa: f64,
    pub theta_deg: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearchResult {
    pub best: GridCandidate,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Exhaustive search over squeezer controllers `(χ, κ1 = κ2 = κ)` and
/// homodyne angles. Candidates whose closed loop is not asymptotically
/// stable are skipped. Costs within `1e-12 (1 + J)` tie; ties go to the
/// smallest `|χ|`, then `κ`, then `θ`.
pub fn grid_search_controller(
    plant: &QuantumLinearSystem,
    chi_grid: &[f64],
    kappa_grid: &[f64],
    theta_grid: &[f64],
    homodyne: &HomodyneSpec,
    solver: &SolverSpec,
    exec: Execution,
) -> Result<GridSearchResult, ExperimentError> {
    if chi_grid.is_empty() || kappa_grid.is_empty() || theta_grid.is_empty() {
        return Err(config("grid search needs nonempty χ, κ and θ grids"));
    }
    solver.validate()?;
    let opts = solver.options();
    let tol = solver.realizability_tol;

    let mut pairs: Vec<(f64, f64)> = chi_grid
        .iter()
        .flat_map(|&chi| kappa_grid.iter().map(move |&k| (chi, k)))
        .collect();
    pairs.sort_by(|a, b| {
        a.0.abs()
            .total_cmp(&b.0.abs())
            .then(a.0.total_cmp(&b.0))
            .then(a.1.total_cmp(&b.1))
    });
    let mut thetas = theta_grid.to_vec();
    thetas.sort_by(f64::total_cmp);

    let per_pair = map_ordered(&pairs, exec, |&(chi, kappa)| {
        let aug = match build_squeezer_controller(kappa, kappa, Complex64::new(chi, 0.0))
            .map_err(ExperimentError::from)
            .and_then(|ctrl| close_loop(plant, &ctrl, tol).map_err(ExperimentError::from))
        {
            Ok(aug) if is_hurwitz(&aug.f, 1e-9 * (1.0 + fro_norm(&aug.f))) => aug,
            Ok(_) => {
                warn!("skipping χ = {chi}, κ = {kappa}: closed loop is not asymptotically stable");
                return (Vec::new(), thetas.len());
            }
            Err(e) => {
                warn!("skipping χ = {chi}, κ = {kappa}: {e}");
                return (Vec::new(), thetas.len());
            }
        };
        let mut found = Vec::new();
        let mut skipped = 0;
        for &theta in &thetas {
            let cost = quadrature_selector(&homodyne.angles(theta))
                .map_err(ExperimentError::from)
                .and_then(|hd| FilterProblem::from_augmented(&aug, &hd).map_err(ExperimentError::from))
                .and_then(|p| synthesize(&p, &opts).map_err(ExperimentError::from));
            match cost {
                Ok(est) => found.push(GridCandidate {
                    chi,
                    kappa,
                    theta_deg: theta,
                    cost: est.cost,
                }),
                Err(e) => {
                    debug!("skipping χ = {chi}, κ = {kappa}, θ = {theta}: {e}");
                    skipped += 1;
                }
            }
        }
        (found, skipped)
    });

    let mut best: Option<GridCandidate> = None;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (found, s) in per_pair {
        skipped += s;
        for cand in found {
            evaluated += 1;
            match best {
                Some(b) if cand.cost >= b.cost - 1e-12 * (1.0 + b.cost.abs()) => {}
                _ => best = Some(cand),
            }
        }
    }
    let best = best.ok_or(ExperimentError::NoFeasibleCandidate)?;
    Ok(GridSearchResult {
        best,
        evaluated,
        skipped,
    })
}

pub fn run_grid_search(cfg: &GridSearchConfig, exec: Execution) -> Result<GridSearchResult, ExperimentError> {
    let plant = cfg.plant.build(cfg.solver.realizability_tol)?;
    let thetas = cfg.angles.values()?;
    grid_search_controller(&plant, &cfg.chi, &cfg.kappa, &thetas, &cfg.homodyne, &cfg.solver, exec)
}

pub const CSV_HEADER: [&str; 6] = [
    "theta_deg",
    "cost",
    "gain_norm",
    "residual",
    "stabilizing",
    "oracle_cost",
];

/// Twelve significant digits.
fn fmt12(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.11e}")
    } else {
        "NaN".into()
    }
}

fn round12(x: f64) -> Option<f64> {
    x.is_finite().then(|| fmt12(x).parse().expect("formatted float parses"))
}

pub fn write_csv<W: Write>(result: &SweepResult, out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &result.rows {
        w.write_record([
            fmt12(r.theta_deg),
            fmt12(r.cost),
            fmt12(r.gain_norm),
            fmt12(r.residual),
            r.stabilizing.to_string(),
            fmt12(r.oracle_cost),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct JsonRow {
    theta_deg: Option<f64>,
    cost: Option<f64>,
    gain_norm: Option<f64>,
    residual: Option<f64>,
    stabilizing: bool,
    oracle_cost: Option<f64>,
}

pub fn write_json<W: Write>(result: &SweepResult, mut out: W) -> std::io::Result<()> {
    let rows: Vec<JsonRow> = result
        .rows
        .iter()
        .map(|r| JsonRow {
            theta_deg: round12(r.theta_deg),
            cost: round12(r.cost),
            gain_norm: round12(r.gain_norm),
            residual: round12(r.residual),
            stabilizing: r.stabilizing,
            oracle_cost: round12(r.oracle_cost),
        })
        .collect();
    serde_json::to_writer_pretty(&mut out, &rows)?;
    out.write_all(b"\n")
}

pub fn write_result<W: Write>(result: &SweepResult, format: Format, out: W) -> std::io::Result<()> {
    match format {
        Format::Csv => write_csv(result, out).map_err(std::io::Error::other),
        Format::Json => write_json(result, out),
    }
}

pub fn emit(result: &SweepResult, format: Format, path: &Path) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write_result(result, format, &mut out).map_err(io)?;
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig(controller: Option<SystemSpec>, grid: AngleGrid) -> Scenario {
        Scenario {
            name: "test".into(),
            plant: SystemSpec::Cavity {
                kappa1: 0.5,
                kappa2: 0.5,
                chi: Complex64::new(0.0, 0.0),
            },
            controller,
            angles: grid,
            homodyne: HomodyneSpec::default(),
            solver: SolverSpec::default(),
            output: None,
        }
    }

    fn squeezer(chi: f64) -> Option<SystemSpec> {
        Some(SystemSpec::Squeezer {
            kappa1: 5.0,
            kappa2: 5.0,
            chi: Complex64::new(chi, 0.0),
        })
    }

    #[test]
    fn angle_grid_is_half_open() {
        assert_eq!(AngleGrid::default().values().unwrap().len(), 180);
        let g = AngleGrid {
            start: 0.0,
            stop: 1.0,
            step: 0.3,
        };
        assert_eq!(g.values().unwrap().len(), 4);
        assert_eq!(AngleGrid::single(135.0).values().unwrap(), vec![135.0]);
        let bad = AngleGrid {
            start: 0.0,
            stop: 10.0,
            step: 0.0,
        };
        assert!(bad.values().unwrap_err().is_config());
        let empty = AngleGrid {
            start: 5.0,
            stop: 5.0,
            step: 1.0,
        };
        assert!(empty.values().is_err());
    }

    #[test]
    fn single_angle_classical_row() {
        let res = run_sweep(&fig(None, AngleGrid::single(135.0))).unwrap();
        assert_eq!(res.rows.len(), 1);
        let r = &res.rows[0];
        assert!((r.cost - 1.0).abs() < 1e-10);
        assert!(r.gain_norm < 1e-8);
        assert!(r.stabilizing && r.error.is_none());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let grid = AngleGrid {
            start: 0.0,
            stop: 180.0,
            step: 15.0,
        };
        let s = fig(squeezer(-0.5), grid);
        let a = run_sweep_with(&s, Execution::Parallel).unwrap();
        let b = run_sweep_with(&s, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn squeezer_cost_has_half_turn_symmetry() {
        let grid = AngleGrid {
            start: 0.0,
            stop: 360.0,
            step: 10.0,
        };
        let res = run_sweep(&fig(squeezer(-0.5), grid)).unwrap();
        for i in 0..18 {
            assert!((res.rows[i].cost - res.rows[i + 18].cost).abs() < 1e-8);
        }
    }

    #[test]
    fn scenario_json_parses() {
        let text = r#"{
            "name": "x",
            "plant": {"builder": "cavity", "kappa1": 0.5, "kappa2": 0.5},
            "controller": {"builder": "squeezer", "kappa1": 5, "kappa2": 5, "chi": [-0.5, 0.0]},
            "angles": {"start": 130, "stop": 140, "step": 5},
            "solver": {"noise": "symmetrized"}
        }"#;
        let s: Scenario = serde_json::from_str(text).unwrap();
        assert_eq!(s.controller, squeezer(-0.5));
        assert_eq!(s.solver.noise, NoiseConvention::Symmetrized);
        assert_eq!(s.angles.values().unwrap(), vec![130.0, 135.0]);
        let bad = r#"{"plant": {"builder": "cavity", "kappa1": 0.5, "kappa2": 0.5}, "bogus": 1}"#;
        assert!(serde_json::from_str::<Scenario>(bad).is_err());
    }

    #[test]
    fn raw_controller_matches_builder() {
        let text = r#"{
            "builder": "raw",
            "n": 1,
            "f": [[-5.0, 0.5], [0.5, -5.0]],
            "inputs": [
                {"name": "A_tilde", "half_width": 1, "g": [[-2.2360679774997896, 0], [0, -2.2360679774997896]]},
                {"name": "Y", "half_width": 1, "g": [[-2.2360679774997896, 0], [0, -2.2360679774997896]]}
            ],
            "outputs": [
                {"name": "Y_tilde", "half_width": 1, "h": [[2.2360679774997896, 0], [0, 2.2360679774997896]],
                 "k": {"A_tilde": [[1, 0], [0, 1]]}},
                {"name": "U", "half_width": 1, "h": [[2.2360679774997896, 0], [0, 2.2360679774997896]],
                 "k": {"Y": [[1, 0], [0, 1]]}}
            ]
        }"#;
        let raw: SystemSpec = serde_json::from_str(text).unwrap();
        let built = squeezer(-0.5).unwrap();
        let a = raw.build(1e-9).unwrap();
        let b = built.build(1e-9).unwrap();
        assert!(doubled::max_abs(&(a.f() - b.f())) < 1e-15);
        assert!(doubled::max_abs(&(a.g("Y") - b.g("Y"))) < 1e-15);
        assert!(doubled::max_abs(&(a.h("U") - b.h("U"))) < 1e-15);
        assert_eq!(a.k("U", "Y"), b.k("U", "Y"));
    }

    #[test]
    fn offsets_must_match_measured_width() {
        let mut s = fig(Some(SystemSpec::BeamSplitter { mix_deg: 45.0 }), AngleGrid::single(0.0));
        assert!(run_sweep(&s).unwrap_err().is_config());
        s.homodyne.offsets_deg = vec![0.0, 90.0];
        let res = run_sweep(&s).unwrap();
        assert!((res.rows[0].cost - 1.0).abs() < 1e-8);
    }

    #[test]
    fn realizability_reports() {
        let cav = SystemSpec::Cavity {
            kappa1: 0.5,
            kappa2: 0.5,
            chi: Complex64::new(0.0, 0.0),
        };
        assert!(matches!(
            realizability_report(&cav, 1e-9).unwrap(),
            RealizabilityReport::Dynamic(_)
        ));
        let bs = SystemSpec::BeamSplitter { mix_deg: 30.0 };
        assert!(matches!(
            realizability_report(&bs, 1e-9).unwrap(),
            RealizabilityReport::Static { .. }
        ));
    }

    #[test]
    fn grid_search_prefers_squeezing() {
        let plant = build_cavity_plant(0.5, 0.5, Complex64::new(0.0, 0.0)).unwrap();
        let thetas = [45.0, 135.0];
        let res = grid_search_controller(
            &plant,
            &[0.0, -0.5],
            &[5.0],
            &thetas,
            &HomodyneSpec::default(),
            &SolverSpec::default(),
            Execution::default(),
        )
        .unwrap();
        assert_eq!(res.best.chi, -0.5);
        assert_eq!(res.best.theta_deg, 135.0);
        assert!((res.best.cost - 0.904921).abs() < 1e-5);
        assert_eq!(res.evaluated, 4);
    }

    #[test]
    fn grid_search_passive_ties_break_to_smallest() {
        let plant = build_cavity_plant(0.5, 0.5, Complex64::new(0.0, 0.0)).unwrap();
        let res = grid_search_controller(
            &plant,
            &[0.0],
            &[5.0, 0.5],
            &[90.0, 0.0, 45.0],
            &HomodyneSpec::default(),
            &SolverSpec::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert!((res.best.cost - 1.0).abs() < 1e-10);
        assert_eq!((res.best.kappa, res.best.theta_deg), (0.5, 0.0));
    }

    #[test]
    fn grid_search_without_candidates() {
        let plant = build_cavity_plant(0.5, 0.5, Complex64::new(0.0, 0.0)).unwrap();
        let err = grid_search_controller(
            &plant,
            &[0.0],
            &[-1.0],
            &[0.0],
            &HomodyneSpec::default(),
            &SolverSpec::default(),
            Execution::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, ExperimentError::NoFeasibleCandidate));
    }

    #[test]
    fn csv_and_json_layout() {
        let res = SweepResult {
            rows: vec![
                SweepRow {
                    theta_deg: 135.0,
                    cost: 0.9049212345678912,
                    gain_norm: 0.25,
                    residual: 1e-16,
                    stabilizing: true,
                    oracle_cost: 0.9049212345678913,
                    error: None,
                },
                SweepRow::failed(136.0, "boom".into()),
            ],
        };
        let mut buf = Vec::new();
        write_csv(&res, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines[0], "theta_deg,cost,gain_norm,residual,stabilizing,oracle_cost");
        assert_eq!(
            lines[1],
            "1.35000000000e2,9.04921234568e-1,2.50000000000e-1,1.00000000000e-16,true,9.04921234568e-1"
        );
        assert_eq!(lines[2], "1.36000000000e2,NaN,NaN,NaN,false,NaN");
        assert!(!text.contains('\r'));

        let mut buf = Vec::new();
        write_json(&res, &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let obj = v[0].as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        let mut expected = CSV_HEADER.to_vec();
        expected.sort();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort();
        assert_eq!(keys_sorted, expected);
        assert_eq!(v[0]["cost"].as_f64().unwrap(), 0.904921234568);
        assert!(v[1]["cost"].is_null());
    }

    #[test]
    fn empty_result_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&SweepResult::default(), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", CSV_HEADER.join(",")));
    }
}
