//! Plant, sensor suite, and scenario configuration: definition, JSON
//! loading, validation, and the stacked centralized measurement model.
//!
//! Everything here is immutable once validated and safe to share across
//! concurrent workers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, TimeGrid, UnconditionalTrajectory, TIME_EPS};

/// A time-varying matrix, piecewise constant between breakpoints. Evaluation
/// picks the last breakpoint at or before `t`.
#[derive(Debug, Clone)]
pub enum MatrixSpec {
    Constant(DMatrix<f64>),
    Piecewise(Vec<(f64, DMatrix<f64>)>),
}

impl MatrixSpec {
    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        match self {
            MatrixSpec::Constant(m) => m,
            MatrixSpec::Piecewise(entries) => {
                let idx = entries.partition_point(|(start, _)| *start <= t + TIME_EPS);
                // Coverage from the scenario start is checked at validation;
                // clamp to the first entry for any earlier query.
                &entries[idx.saturating_sub(1)].1
            }
        }
    }

    /// Every stored matrix, for shape and definiteness checks.
    pub fn matrices(&self) -> Vec<&DMatrix<f64>> {
        match self {
            MatrixSpec::Constant(m) => vec![m],
            MatrixSpec::Piecewise(entries) => entries.iter().map(|(_, m)| m).collect(),
        }
    }

    fn first_start(&self) -> Option<f64> {
        match self {
            MatrixSpec::Constant(_) => None,
            MatrixSpec::Piecewise(entries) => entries.first().map(|(t, _)| *t),
        }
    }

    fn breakpoints_sorted(&self) -> bool {
        match self {
            MatrixSpec::Constant(_) => true,
            MatrixSpec::Piecewise(entries) => {
                entries.windows(2).all(|w| w[0].0 < w[1].0 - TIME_EPS)
            }
        }
    }
}

/// Closed time interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start - TIME_EPS && t <= self.end + TIME_EPS
    }
}

/// Additive dynamics perturbation active on a closed interval, applied to
/// the truth simulator only. Estimators never see it.
#[derive(Debug, Clone)]
pub struct DeltaWindow {
    pub interval: Interval,
    pub add: DMatrix<f64>,
}

/// Time-varying linear plant `x' = F x + G v` with white process noise of
/// intensity `Q` and Gaussian initial state.
#[derive(Debug, Clone)]
pub struct LtvSystem {
    pub n: usize,
    pub r: usize,
    pub f: MatrixSpec,
    pub g: MatrixSpec,
    pub q: MatrixSpec,
    pub x0_mean: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub delta: Vec<DeltaWindow>,
}

impl LtvSystem {
    /// Nominal dynamics matrix, as used by every estimator.
    #[inline]
    pub fn dynamics(&self, t: f64) -> &DMatrix<f64> {
        self.f.at(t)
    }

    /// Dynamics seen by the truth simulator: nominal plus any active
    /// perturbation windows.
    pub fn truth_dynamics(&self, t: f64) -> DMatrix<f64> {
        let mut f = self.f.at(t).clone();
        for w in &self.delta {
            if w.interval.contains(t) {
                f += &w.add;
            }
        }
        f
    }

    /// Process-noise covariance term `G Q G'`.
    pub fn process_noise_cov(&self, t: f64) -> DMatrix<f64> {
        let g = self.g.at(t);
        g * self.q.at(t) * g.transpose()
    }
}

/// One sensor: `y = H x + w` with white measurement noise of intensity `R`
/// and an optional availability schedule (`None` means always on).
#[derive(Debug, Clone)]
pub struct SensorModel {
    pub m: usize,
    pub h: MatrixSpec,
    pub r: MatrixSpec,
    pub availability: Option<Vec<Interval>>,
}

impl SensorModel {
    pub fn available_at(&self, t: f64) -> bool {
        match &self.availability {
            None => true,
            Some(windows) => windows.iter().any(|w| w.contains(t)),
        }
    }
}

/// Ordered list of sensors observing the same plant.
#[derive(Debug, Clone)]
pub struct SensorSuite {
    pub sensors: Vec<SensorModel>,
}

impl SensorSuite {
    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }
}

/// Run configuration: time span, horizon length, prediction lead, step, and
/// Monte-Carlo parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub t0: f64,
    pub t_end: f64,
    /// Horizon length `T`: estimators use measurements from `[t - T, t]` only.
    pub horizon: f64,
    /// Prediction lead: estimates refer to `t + lead`.
    pub lead: f64,
    /// Integration step.
    pub step: f64,
    /// Output every `eval_stride` steps.
    pub eval_stride: usize,
    pub mc_runs: usize,
    pub rng_seed: u64,
}

/// Stacked measurement model over the active sensors: rows of `H` and the
/// diagonal blocks of `R` appear in ascending sensor-index order.
pub fn stack_sensors(
    suite: &SensorSuite,
    active: &[usize],
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let active = normalize_active(suite, active)?;
    let n = suite.sensors[active[0]].h.at(t).ncols();
    let m_total: usize = active.iter().map(|&i| suite.sensors[i].m).sum();

    let mut h = DMatrix::<f64>::zeros(m_total, n);
    let mut r = DMatrix::<f64>::zeros(m_total, m_total);
    let mut row = 0;
    for &i in &active {
        let s = &suite.sensors[i];
        h.view_mut((row, 0), (s.m, n)).copy_from(s.h.at(t));
        r.view_mut((row, row), (s.m, s.m)).copy_from(s.r.at(t));
        row += s.m;
    }
    Ok((h, r))
}

/// Sorted, deduplicated, range-checked copy of an active sensor set.
pub(crate) fn normalize_active(suite: &SensorSuite, active: &[usize]) -> Result<Vec<usize>> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let mut v = active.to_vec();
    v.sort_unstable();
    v.dedup();
    for &i in &v {
        if i >= suite.len() {
            return Err(Error::SensorIndex {
                index: i,
                count: suite.len(),
            });
        }
    }
    Ok(v)
}

/// A validated scenario: the immutable inputs plus the shared grid and the
/// precomputed unconditional moment trajectory every horizon pass reads its
/// initial conditions from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub system: LtvSystem,
    pub suite: SensorSuite,
    pub cfg: ScenarioConfig,
    grid: TimeGrid,
    end_index: usize,
    horizon_steps: usize,
    lead_steps: usize,
    uncond: UnconditionalTrajectory,
}

impl Scenario {
    /// Master grid over `[t0, t_end + lead]`.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Grid index of `t_end` (the last output instant).
    pub fn end_index(&self) -> usize {
        self.end_index
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn lead_steps(&self) -> usize {
        self.lead_steps
    }

    pub fn unconditional(&self) -> &UnconditionalTrajectory {
        &self.uncond
    }

    /// Grid indices at which output is produced: every `eval_stride` steps
    /// from `t0` through `t_end`.
    pub fn output_indices(&self) -> Vec<usize> {
        (0..=self.end_index)
            .step_by(self.cfg.eval_stride)
            .collect()
    }

    /// Start of the (possibly truncated) horizon for an output at index `k`.
    /// Before one full horizon has elapsed the window is `[t0, t]`.
    pub fn horizon_start_index(&self, k: usize) -> usize {
        k.saturating_sub(self.horizon_steps)
    }

    /// Output instants before `t0 + T` run on a truncated horizon.
    pub fn is_warmup(&self, k: usize) -> bool {
        k < self.horizon_steps
    }

    /// Grid index and horizon window for an output at time `t`.
    pub fn horizon_window_at(&self, t: f64) -> Result<(usize, TimeGrid)> {
        let k = self.grid.index_of(t)?;
        if k > self.end_index {
            return Err(Error::GridMismatch(format!(
                "t = {t} lies beyond t_end = {}",
                self.cfg.t_end
            )));
        }
        let k0 = self.horizon_start_index(k);
        Ok((k, self.grid.window(k0, k)?))
    }

    /// True when sensor `i` has data at every grid point of `[k0, k1]`.
    pub fn sensor_available_over(&self, sensor: usize, k0: usize, k1: usize) -> bool {
        (k0..=k1).all(|k| self.suite.sensors[sensor].available_at(self.grid.point(k)))
    }

    /// Sensors with full-horizon data for an output at index `k`.
    pub fn active_sensors_at(&self, k: usize) -> Vec<usize> {
        let k0 = self.horizon_start_index(k);
        (0..self.suite.len())
            .filter(|&i| self.sensor_available_over(i, k0, k))
            .collect()
    }
}

fn is_multiple_of(value: f64, step: f64) -> bool {
    let ratio = value / step;
    (ratio - ratio.round()).abs() <= 1e-9 * (1.0 + ratio.abs())
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = 1.0 + max_abs(m);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-9 * scale {
                return false;
            }
        }
    }
    true
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m) && min_eigenvalue(m) >= -1e-10 * (1.0 + max_abs(m))
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    is_symmetric(m) && m.clone().cholesky().is_some()
}

fn check_spec(
    spec: &MatrixSpec,
    what: &str,
    rows: usize,
    cols: usize,
    t0: f64,
    issues: &mut Vec<String>,
) {
    for m in spec.matrices() {
        if m.nrows() != rows || m.ncols() != cols {
            issues.push(format!(
                "{what}: expected {rows}x{cols}, found {}x{}",
                m.nrows(),
                m.ncols()
            ));
        }
    }
    if !spec.breakpoints_sorted() {
        issues.push(format!("{what}: breakpoints must be strictly increasing"));
    }
    if let Some(first) = spec.first_start() {
        if first > t0 + TIME_EPS {
            issues.push(format!(
                "{what}: first breakpoint at t = {first} leaves [{t0}, {first}) undefined"
            ));
        }
    }
}

/// Validate a scenario against every type invariant, collecting all
/// violations. On success the unconditional moment trajectory over the full
/// grid is precomputed and stored on the returned [`Scenario`].
pub fn validate(system: LtvSystem, suite: SensorSuite, cfg: ScenarioConfig) -> Result<Scenario> {
    let mut issues = Vec::new();

    if !(cfg.step > 0.0) || !cfg.step.is_finite() {
        issues.push(format!("h must be positive, got {}", cfg.step));
    }
    if !(cfg.horizon > 0.0) {
        issues.push(format!("T must be positive, got {}", cfg.horizon));
    }
    if cfg.lead < 0.0 {
        issues.push(format!("Delta must be nonnegative, got {}", cfg.lead));
    }
    if cfg.eval_stride < 1 {
        issues.push("eval_stride must be at least 1".into());
    }
    if cfg.mc_runs < 1 {
        issues.push("mc_runs must be at least 1".into());
    }
    if cfg.t_end <= cfg.t0 {
        issues.push(format!(
            "t_end = {} must exceed t0 = {}",
            cfg.t_end, cfg.t0
        ));
    }
    if cfg.t_end - cfg.t0 < cfg.horizon - TIME_EPS {
        issues.push(format!(
            "span t_end - t0 = {} is shorter than the horizon T = {}",
            cfg.t_end - cfg.t0,
            cfg.horizon
        ));
    }
    if cfg.step > 0.0 {
        if !is_multiple_of(cfg.horizon, cfg.step) {
            issues.push(format!(
                "T = {} is not a multiple of h = {}",
                cfg.horizon, cfg.step
            ));
        }
        if !is_multiple_of(cfg.lead, cfg.step) {
            issues.push(format!(
                "Delta = {} is not a multiple of h = {}",
                cfg.lead, cfg.step
            ));
        }
        if !is_multiple_of(cfg.t_end - cfg.t0, cfg.step) {
            issues.push(format!(
                "t_end - t0 = {} is not a multiple of h = {}",
                cfg.t_end - cfg.t0,
                cfg.step
            ));
        }
    }

    let n = system.n;
    let r = system.r;
    if n < 1 {
        issues.push("state dimension n must be at least 1".into());
    }
    if r < 1 {
        issues.push("process-noise dimension r must be at least 1".into());
    }
    if system.x0_mean.len() != n {
        issues.push(format!(
            "x0_mean has length {}, expected {n}",
            system.x0_mean.len()
        ));
    }
    if system.p0.nrows() != n || system.p0.ncols() != n {
        issues.push(format!(
            "P0 is {}x{}, expected {n}x{n}",
            system.p0.nrows(),
            system.p0.ncols()
        ));
    } else if !is_psd(&system.p0) {
        issues.push("P0 must be symmetric positive semidefinite".into());
    }

    check_spec(&system.f, "F", n, n, cfg.t0, &mut issues);
    check_spec(&system.g, "G", n, r, cfg.t0, &mut issues);
    check_spec(&system.q, "Q", r, r, cfg.t0, &mut issues);
    for m in system.q.matrices() {
        if m.nrows() == r && m.ncols() == r && !is_psd(m) {
            issues.push("Q must be symmetric positive semidefinite at all times".into());
        }
    }
    for (idx, w) in system.delta.iter().enumerate() {
        if w.add.nrows() != n || w.add.ncols() != n {
            issues.push(format!(
                "delta window {idx}: perturbation is {}x{}, expected {n}x{n}",
                w.add.nrows(),
                w.add.ncols()
            ));
        }
        if w.interval.start > w.interval.end {
            issues.push(format!(
                "delta window {idx}: interval [{}, {}] is empty",
                w.interval.start, w.interval.end
            ));
        }
    }

    if suite.is_empty() {
        issues.push("sensor suite must contain at least one sensor".into());
    }
    for (i, s) in suite.sensors.iter().enumerate() {
        if s.m < 1 {
            issues.push(format!("sensor {i}: measurement dimension must be at least 1"));
        }
        check_spec(&s.h, &format!("sensor {i} H"), s.m, n, cfg.t0, &mut issues);
        check_spec(&s.r, &format!("sensor {i} R"), s.m, s.m, cfg.t0, &mut issues);
        for m in s.r.matrices() {
            if m.nrows() == s.m && m.ncols() == s.m && !is_pd(m) {
                issues.push(format!(
                    "sensor {i}: R must be symmetric positive definite (gain needs R^-1)"
                ));
            }
        }
        if let Some(windows) = &s.availability {
            for (j, w) in windows.iter().enumerate() {
                if w.start > w.end {
                    issues.push(format!(
                        "sensor {i}: availability interval {j} [{}, {}] is empty",
                        w.start, w.end
                    ));
                }
            }
            for pair in windows.windows(2) {
                if pair[1].start <= pair[0].end + TIME_EPS {
                    issues.push(format!(
                        "sensor {i}: availability intervals must be sorted and disjoint"
                    ));
                }
            }
        }
    }

    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }

    let total_steps = ((cfg.t_end - cfg.t0 + cfg.lead) / cfg.step).round() as usize;
    let grid = TimeGrid::new(cfg.t0, cfg.step, total_steps)?;
    let horizon_steps = (cfg.horizon / cfg.step).round() as usize;
    let lead_steps = (cfg.lead / cfg.step).round() as usize;
    let end_index = total_steps - lead_steps;

    let uncond = numerics::propagate_lyapunov(
        &system,
        cfg.t0,
        grid.end(),
        cfg.step,
        system.x0_mean.clone(),
        system.p0.clone(),
    )
    .map_err(|e| Error::Validation(vec![format!("unconditional moment propagation: {e}")]))?;

    Ok(Scenario {
        system,
        suite,
        cfg,
        grid,
        end_index,
        horizon_steps,
        lead_steps,
        uncond,
    })
}

// --- scenario document (JSON schema) ---

fn default_eval_stride() -> usize {
    1
}

fn default_mc_runs() -> usize {
    1
}

/// On-disk scenario document. Matrices are row-major arrays of rows;
/// time-varying entries are either a constant matrix or a list of
/// `{t_start, matrix}` breakpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub t0: f64,
    pub t_end: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "Delta")]
    pub lead: f64,
    pub h: f64,
    #[serde(default = "default_eval_stride")]
    pub eval_stride: usize,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    #[serde(default)]
    pub rng_seed: u64,
    pub system: SystemDoc,
    pub sensors: Vec<SensorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    pub n: usize,
    pub r: usize,
    #[serde(rename = "F")]
    pub f: MatrixSpecDoc,
    #[serde(rename = "G")]
    pub g: MatrixSpecDoc,
    #[serde(rename = "Q")]
    pub q: MatrixSpecDoc,
    pub x0_mean: Vec<f64>,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub delta: Vec<DeltaDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorDoc {
    #[serde(rename = "H")]
    pub h: MatrixSpecDoc,
    #[serde(rename = "R")]
    pub r: MatrixSpecDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaDoc {
    pub interval: [f64; 2],
    pub add: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpecDoc {
    Constant(Vec<Vec<f64>>),
    Piecewise(Vec<BreakpointDoc>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakpointDoc {
    pub t_start: f64,
    pub matrix: Vec<Vec<f64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str, issues: &mut Vec<String>) -> DMatrix<f64> {
    if rows.is_empty() {
        issues.push(format!("{what}: matrix has no rows"));
        return DMatrix::zeros(0, 0);
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        issues.push(format!("{what}: ragged rows"));
        return DMatrix::zeros(0, 0);
    }
    DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied())
}

fn spec_from_doc(doc: &MatrixSpecDoc, what: &str, issues: &mut Vec<String>) -> MatrixSpec {
    match doc {
        MatrixSpecDoc::Constant(rows) => MatrixSpec::Constant(matrix_from_rows(rows, what, issues)),
        MatrixSpecDoc::Piecewise(entries) => {
            if entries.is_empty() {
                issues.push(format!("{what}: piecewise spec has no breakpoints"));
            }
            MatrixSpec::Piecewise(
                entries
                    .iter()
                    .map(|e| (e.t_start, matrix_from_rows(&e.matrix, what, issues)))
                    .collect(),
            )
        }
    }
}

impl ScenarioDoc {
    /// Structural conversion into the runtime types. Shape and definiteness
    /// checks happen in [`validate`].
    pub fn into_parts(self) -> Result<(LtvSystem, SensorSuite, ScenarioConfig)> {
        let mut issues = Vec::new();

        let f = spec_from_doc(&self.system.f, "F", &mut issues);
        let g = spec_from_doc(&self.system.g, "G", &mut issues);
        let q = spec_from_doc(&self.system.q, "Q", &mut issues);
        let p0 = matrix_from_rows(&self.system.p0, "P0", &mut issues);
        let delta = self
            .system
            .delta
            .iter()
            .map(|d| DeltaWindow {
                interval: Interval {
                    start: d.interval[0],
                    end: d.interval[1],
                },
                add: matrix_from_rows(&d.add, "delta", &mut issues),
            })
            .collect();

        let system = LtvSystem {
            n: self.system.n,
            r: self.system.r,
            f,
            g,
            q,
            x0_mean: DVector::from_vec(self.system.x0_mean.clone()),
            p0,
            delta,
        };

        let sensors = self
            .sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let h = spec_from_doc(&s.h, &format!("sensor {i} H"), &mut issues);
                let m = h.matrices().first().map(|m| m.nrows()).unwrap_or(0);
                SensorModel {
                    m,
                    h,
                    r: spec_from_doc(&s.r, &format!("sensor {i} R"), &mut issues),
                    availability: s.availability.as_ref().map(|windows| {
                        windows
                            .iter()
                            .map(|w| Interval {
                                start: w[0],
                                end: w[1],
                            })
                            .collect()
                    }),
                }
            })
            .collect();

        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }

        let cfg = ScenarioConfig {
            t0: self.t0,
            t_end: self.t_end,
            horizon: self.horizon,
            lead: self.lead,
            step: self.h,
            eval_stride: self.eval_stride,
            mc_runs: self.mc_runs,
            rng_seed: self.rng_seed,
        };

        Ok((system, SensorSuite { sensors }, cfg))
    }

    /// Parse and validate in one go.
    pub fn into_scenario(self) -> Result<Scenario> {
        let (system, suite, cfg) = self.into_parts()?;
        validate(system, suite, cfg)
    }
}

/// Parse a scenario document from JSON text.
pub fn parse_scenario(text: &str) -> Result<ScenarioDoc> {
    Ok(serde_json::from_str(text)?)
}

/// Load, parse, and validate a scenario file.
pub fn load_scenario(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)?.into_scenario()
}
