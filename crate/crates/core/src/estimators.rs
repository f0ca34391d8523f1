//! Receding-horizon filter and predictor engines.
//!
//! Each estimate at time `t` is produced by a fresh pass over the horizon
//! window `[t - T, t]`: initial conditions come from the unconditional moment
//! trajectory, the filter ODEs are integrated forward through the window, and
//! the predictor ODEs carry the result to `t + lead`. The centralized engine
//! stacks every active sensor; the local engines use a single sensor each and
//! also hand their gain trajectories to the fusion pass.
//!
//! Mean and covariance ride through the measurement update as one combined
//! RK4 state, so the gain seen by the mean equation always matches the
//! current covariance. Measurements are held constant over each step (they
//! exist only at grid points).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{normalize_active, LtvSystem, Scenario, SensorSuite};
use crate::numerics::{rk4_step, symmetrize, MeanCov, TimeGrid};

/// A mean/covariance estimate at one instant.
#[derive(Debug, Clone)]
pub struct EstimatorState {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Filter gains recorded at every grid point of a horizon window. Consumers
/// replay them with zero-order hold: the gain at point `k` applies to the
/// whole step `[k, k+1)`.
#[derive(Debug, Clone)]
pub struct GainTrajectory {
    pub grid: TimeGrid,
    pub gains: Vec<DMatrix<f64>>,
}

/// Measurements over a horizon window, aligned with its grid. `None` marks
/// grid points where the sensor produced no data.
#[derive(Debug, Clone)]
pub struct HorizonMeasurements {
    pub grid: TimeGrid,
    /// Indexed `[sensor][grid point]`.
    pub samples: Vec<Vec<Option<DVector<f64>>>>,
}

impl HorizonMeasurements {
    /// True when sensor `i` has a sample at every point of the window.
    pub fn sensor_complete(&self, sensor: usize) -> bool {
        self.samples
            .get(sensor)
            .map(|s| s.len() == self.grid.count + 1 && s.iter().all(Option::is_some))
            .unwrap_or(false)
    }
}

/// Unconditional mean and covariance at the horizon start `t - T`, looked up
/// from the trajectory precomputed once per scenario.
pub fn horizon_initial_conditions(scn: &Scenario, t: f64, horizon: f64) -> Result<EstimatorState> {
    let start = t - horizon;
    if start < scn.cfg.t0 - crate::numerics::TIME_EPS {
        return Err(Error::GridMismatch(format!(
            "horizon start t - T = {start} precedes scenario start {}",
            scn.cfg.t0
        )));
    }
    scn.unconditional().state_at(start)
}

fn stack_h(suite: &SensorSuite, active: &[usize], t: f64) -> DMatrix<f64> {
    let n = suite.sensors[active[0]].h.at(t).ncols();
    let m_total: usize = active.iter().map(|&i| suite.sensors[i].m).sum();
    let mut h = DMatrix::zeros(m_total, n);
    let mut row = 0;
    for &i in active {
        let block = suite.sensors[i].h.at(t);
        h.view_mut((row, 0), (block.nrows(), n)).copy_from(block);
        row += block.nrows();
    }
    h
}

fn stack_r(suite: &SensorSuite, active: &[usize], t: f64) -> DMatrix<f64> {
    let m_total: usize = active.iter().map(|&i| suite.sensors[i].m).sum();
    let mut r = DMatrix::zeros(m_total, m_total);
    let mut row = 0;
    for &i in active {
        let block = suite.sensors[i].r.at(t);
        r.view_mut((row, row), (block.nrows(), block.nrows()))
            .copy_from(block);
        row += block.nrows();
    }
    r
}

/// Filter gain `L = P H' R^-1`. A singular `R` (prevented by validation)
/// yields NaNs, which the integrator reports as a propagation failure.
fn gain(suite: &SensorSuite, active: &[usize], t: f64, p: &DMatrix<f64>) -> DMatrix<f64> {
    let h = stack_h(suite, active, t);
    let r = stack_r(suite, active, t);
    let a = p * h.transpose();
    match r.cholesky() {
        Some(chol) => chol.solve(&a.transpose()).transpose(),
        None => DMatrix::from_element(p.nrows(), h.nrows(), f64::NAN),
    }
}

/// Riccati covariance derivative `F P + P F' + G Q G' - P H' R^-1 H P`.
fn riccati_derivative(
    system: &LtvSystem,
    suite: &SensorSuite,
    active: &[usize],
    t: f64,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let f = system.dynamics(t);
    let h = stack_h(suite, active, t);
    let a = p * h.transpose();
    let r = stack_r(suite, active, t);
    let info = match r.cholesky() {
        Some(chol) => &a * chol.solve(&a.transpose()),
        None => DMatrix::from_element(p.nrows(), p.nrows(), f64::NAN),
    };
    f * p + p * f.transpose() + system.process_noise_cov(t) - info
}

/// Covariance-only horizon pass: integrates the Riccati equation over the
/// window and records the gain at every grid point. Measurement-independent,
/// so one pass serves every Monte-Carlo run.
pub(crate) fn covariance_pass(
    system: &LtvSystem,
    suite: &SensorSuite,
    active: &[usize],
    grid: &TimeGrid,
    cov0: DMatrix<f64>,
) -> Result<(DMatrix<f64>, GainTrajectory)> {
    let mut gains = Vec::with_capacity(grid.count + 1);
    let mut deriv =
        |t: f64, p: &DMatrix<f64>| riccati_derivative(system, suite, active, t, p);
    let mut p = cov0;
    for k in 0..grid.count {
        let t = grid.point(k);
        gains.push(gain(suite, active, t, &p));
        p = rk4_step(&mut deriv, t, &p, grid.h)?;
        symmetrize(&mut p);
    }
    gains.push(gain(suite, active, grid.end(), &p));
    Ok((
        p,
        GainTrajectory {
            grid: *grid,
            gains,
        },
    ))
}

/// Joint mean/covariance horizon pass with measurements held constant over
/// each step.
fn joint_pass(
    system: &LtvSystem,
    suite: &SensorSuite,
    active: &[usize],
    grid: &TimeGrid,
    init: EstimatorState,
    stacked: &[DVector<f64>],
) -> Result<(EstimatorState, GainTrajectory)> {
    let mut gains = Vec::with_capacity(grid.count + 1);
    let mut state = MeanCov {
        mean: init.mean,
        cov: init.cov,
    };
    for k in 0..grid.count {
        let t = grid.point(k);
        gains.push(gain(suite, active, t, &state.cov));
        let y = &stacked[k];
        let mut deriv = |tau: f64, s: &MeanCov| {
            let f = system.dynamics(tau);
            let h = stack_h(suite, active, tau);
            let l = gain(suite, active, tau, &s.cov);
            let innovation = y - &h * &s.mean;
            MeanCov {
                mean: f * &s.mean + &l * innovation,
                cov: riccati_derivative(system, suite, active, tau, &s.cov),
            }
        };
        state = rk4_step(&mut deriv, t, &state, grid.h)?;
        symmetrize(&mut state.cov);
    }
    gains.push(gain(suite, active, grid.end(), &state.cov));
    Ok((
        EstimatorState {
            t: grid.end(),
            mean: state.mean,
            cov: state.cov,
        },
        GainTrajectory {
            grid: *grid,
            gains,
        },
    ))
}

fn check_window(meas: &HorizonMeasurements, window: &TimeGrid) -> Result<()> {
    if !meas.grid.same_as(window) {
        return Err(Error::GridMismatch(format!(
            "measurement window [{}, {}] does not match horizon [{}, {}]",
            meas.grid.t0,
            meas.grid.end(),
            window.t0,
            window.end()
        )));
    }
    Ok(())
}

fn stacked_measurements(
    suite: &SensorSuite,
    meas: &HorizonMeasurements,
    active: &[usize],
) -> Vec<DVector<f64>> {
    let m_total: usize = active.iter().map(|&i| suite.sensors[i].m).sum();
    (0..=meas.grid.count)
        .map(|p| {
            let mut y = DVector::zeros(m_total);
            let mut row = 0;
            for &i in active {
                let v = meas.samples[i][p].as_ref().expect("checked complete");
                y.rows_mut(row, v.len()).copy_from(v);
                row += v.len();
            }
            y
        })
        .collect()
}

/// Centralized receding-horizon filter at time `t`: one Riccati pass over
/// the horizon using all active sensors stacked. Every active sensor must
/// have data on the full window; the centralized estimator cannot run
/// otherwise.
pub fn run_crhf(
    scn: &Scenario,
    t: f64,
    meas: &HorizonMeasurements,
    active: &[usize],
) -> Result<(EstimatorState, GainTrajectory)> {
    let active = normalize_active(&scn.suite, active)?;
    let (k, window) = scn.horizon_window_at(t)?;
    check_window(meas, &window)?;
    let missing: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&i| !meas.sensor_complete(i))
        .collect();
    if !missing.is_empty() {
        return Err(Error::CrhfUnavailable { t, missing });
    }
    let init = scn.unconditional().state_at_index(scn.horizon_start_index(k));
    let stacked = stacked_measurements(&scn.suite, meas, &active);
    joint_pass(&scn.system, &scn.suite, &active, &window, init, &stacked)
}

/// Local receding-horizon filter for one sensor.
pub fn run_local_rhf(
    scn: &Scenario,
    sensor: usize,
    t: f64,
    meas: &HorizonMeasurements,
) -> Result<(EstimatorState, GainTrajectory)> {
    if sensor >= scn.suite.len() {
        return Err(Error::SensorIndex {
            index: sensor,
            count: scn.suite.len(),
        });
    }
    let (k, window) = scn.horizon_window_at(t)?;
    check_window(meas, &window)?;
    if !meas.sensor_complete(sensor) {
        return Err(Error::LocalUnavailable { sensor, t });
    }
    let init = scn.unconditional().state_at_index(scn.horizon_start_index(k));
    let active = [sensor];
    let stacked = stacked_measurements(&scn.suite, meas, &active);
    joint_pass(&scn.system, &scn.suite, &active, &window, init, &stacked)
}

/// Centralized receding-horizon predictor: filter pass, then predictor ODEs
/// over the lead interval.
pub fn run_crhp(
    scn: &Scenario,
    t: f64,
    meas: &HorizonMeasurements,
    active: &[usize],
) -> Result<EstimatorState> {
    let (state, _) = run_crhf(scn, t, meas, active)?;
    predict_from(scn, state)
}

/// Local receding-horizon predictor for one sensor.
pub fn run_local_rhp(
    scn: &Scenario,
    sensor: usize,
    t: f64,
    meas: &HorizonMeasurements,
) -> Result<EstimatorState> {
    let (state, _) = run_local_rhf(scn, sensor, t, meas)?;
    predict_from(scn, state)
}

/// Carry a filtered state to `t + lead`. A zero lead returns the input
/// unchanged.
pub fn predict_from(scn: &Scenario, state: EstimatorState) -> Result<EstimatorState> {
    if scn.lead_steps() == 0 {
        return Ok(state);
    }
    let k = scn.grid().index_of(state.t)?;
    let target = scn.grid().point(k + scn.lead_steps());
    crate::numerics::propagate_prediction(&scn.system, state.t, target, scn.cfg.step, &state)
}

/// Replay the centralized filter mean with precomputed gains, holding gain
/// and measurement constant over each step. Used by the Monte-Carlo harness,
/// where the covariance pass behind `gains` is shared across runs.
pub fn replay_crhf_mean(
    scn: &Scenario,
    t: f64,
    meas: &HorizonMeasurements,
    active: &[usize],
    gains: &GainTrajectory,
) -> Result<DVector<f64>> {
    let active = normalize_active(&scn.suite, active)?;
    let (k, window) = scn.horizon_window_at(t)?;
    check_window(meas, &window)?;
    if !gains.grid.same_as(&window) {
        return Err(Error::GridMismatch(
            "gain trajectory does not cover the horizon window".into(),
        ));
    }
    let missing: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&i| !meas.sensor_complete(i))
        .collect();
    if !missing.is_empty() {
        return Err(Error::CrhfUnavailable { t, missing });
    }
    let init = scn.unconditional().state_at_index(scn.horizon_start_index(k));
    let stacked = stacked_measurements(&scn.suite, meas, &active);
    replay_mean(&scn.system, &scn.suite, &active, &window, init.mean, &stacked, gains)
}

/// Replay a local filter mean with precomputed gains.
pub fn replay_local_rhf_mean(
    scn: &Scenario,
    sensor: usize,
    t: f64,
    meas: &HorizonMeasurements,
    gains: &GainTrajectory,
) -> Result<DVector<f64>> {
    if sensor >= scn.suite.len() {
        return Err(Error::SensorIndex {
            index: sensor,
            count: scn.suite.len(),
        });
    }
    let (k, window) = scn.horizon_window_at(t)?;
    check_window(meas, &window)?;
    if !gains.grid.same_as(&window) {
        return Err(Error::GridMismatch(
            "gain trajectory does not cover the horizon window".into(),
        ));
    }
    if !meas.sensor_complete(sensor) {
        return Err(Error::LocalUnavailable { sensor, t });
    }
    let init = scn.unconditional().state_at_index(scn.horizon_start_index(k));
    let active = [sensor];
    let stacked = stacked_measurements(&scn.suite, meas, &active);
    replay_mean(&scn.system, &scn.suite, &active, &window, init.mean, &stacked, gains)
}

fn replay_mean(
    system: &LtvSystem,
    suite: &SensorSuite,
    active: &[usize],
    grid: &TimeGrid,
    mean0: DVector<f64>,
    stacked: &[DVector<f64>],
    gains: &GainTrajectory,
) -> Result<DVector<f64>> {
    let mut mean = mean0;
    for k in 0..grid.count {
        let t = grid.point(k);
        let l = &gains.gains[k];
        let y = &stacked[k];
        let mut deriv = |tau: f64, x: &DVector<f64>| {
            let h = stack_h(suite, active, tau);
            system.dynamics(tau) * x + l * (y - &h * x)
        };
        mean = rk4_step(&mut deriv, t, &mean, grid.h)?;
    }
    Ok(mean)
}
