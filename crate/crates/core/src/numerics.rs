//! Fixed-step deterministic ODE propagation shared by every estimator:
//! vector ODEs for means, Lyapunov ODEs for covariances, and the horizon
//! Riccati pass built on top of them in [`crate::estimators`].
//!
//! All propagation runs classical fourth-order Runge-Kutta on a shared time
//! grid. Keeping one grid for every pass lets gain trajectories computed by
//! the filter pass be replayed exactly by the cross-covariance pass.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::EstimatorState;
use crate::model::LtvSystem;

/// Absolute tolerance for matching instants against grid points and interval
/// endpoints. Grid times are formed as `t0 + k*h`, so any mismatch is a few
/// ulps, far below this.
pub const TIME_EPS: f64 = 1e-9;

/// Uniform time grid: point `k` is exactly `t0 + k * h`, never accumulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub h: f64,
    /// Number of steps; the grid has `count + 1` points.
    pub count: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, h: f64, count: usize) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() || !t0.is_finite() {
            return Err(Error::GridMismatch(format!(
                "invalid grid: t0 = {t0}, h = {h}"
            )));
        }
        Ok(Self { t0, h, count })
    }

    #[inline]
    pub fn point(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.point(self.count)
    }

    /// Index of a grid point, rejecting instants that do not lie on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let raw = (t - self.t0) / self.h;
        let k = raw.round();
        if k < 0.0 || k > self.count as f64 {
            return Err(Error::GridMismatch(format!(
                "t = {t} outside grid [{}, {}]",
                self.t0,
                self.end()
            )));
        }
        let k = k as usize;
        if (self.point(k) - t).abs() > TIME_EPS * (1.0 + t.abs()) {
            return Err(Error::GridMismatch(format!("t = {t} not on the grid")));
        }
        Ok(k)
    }

    /// Sub-grid spanning points `k0..=k1` of this grid.
    pub fn window(&self, k0: usize, k1: usize) -> Result<TimeGrid> {
        if k0 > k1 || k1 > self.count {
            return Err(Error::GridMismatch(format!(
                "window {k0}..={k1} outside 0..={}",
                self.count
            )));
        }
        TimeGrid::new(self.point(k0), self.h, k1 - k0)
    }

    /// True when the two grids describe the same instants.
    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.count == other.count
            && (self.h - other.h).abs() <= TIME_EPS
            && (self.t0 - other.t0).abs() <= TIME_EPS * (1.0 + self.t0.abs())
    }
}

/// Number of RK4 steps between two grid-aligned instants.
pub(crate) fn steps_between(from: f64, to: f64, h: f64) -> Result<usize> {
    let d = to - from;
    if d < -TIME_EPS {
        return Err(Error::GridMismatch(format!(
            "backward propagation requested: {from} -> {to}"
        )));
    }
    let raw = (d / h).round();
    if (from + raw * h - to).abs() > TIME_EPS * (1.0 + to.abs()) {
        return Err(Error::GridMismatch(format!(
            "interval [{from}, {to}] is not a whole number of steps of h = {h}"
        )));
    }
    Ok(raw.max(0.0) as usize)
}

/// Covariance trajectory sampled at every point of a grid.
#[derive(Debug, Clone)]
pub struct MatrixTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.count + 1 {
            return Err(Error::GridMismatch(format!(
                "trajectory has {} values for {} grid points",
                values.len(),
                grid.count + 1
            )));
        }
        Ok(Self { grid, values })
    }
}

/// Unconditional mean and covariance of the plant over a grid, obtained by
/// integrating the moment equations from the initial statistics. Horizon
/// passes read their initial conditions out of this trajectory.
#[derive(Debug, Clone)]
pub struct UnconditionalTrajectory {
    pub grid: TimeGrid,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl UnconditionalTrajectory {
    pub fn state_at_index(&self, k: usize) -> EstimatorState {
        EstimatorState {
            t: self.grid.point(k),
            mean: self.means[k].clone(),
            cov: self.covs[k].clone(),
        }
    }

    pub fn state_at(&self, t: f64) -> Result<EstimatorState> {
        Ok(self.state_at_index(self.grid.index_of(t)?))
    }
}

/// State that can ride through an RK4 step: cloneable with an in-place
/// `self += a * other` and a finiteness check.
pub trait OdeState: Clone {
    fn scaled_add(&mut self, a: f64, other: &Self);
    fn all_finite(&self) -> bool;
}

impl OdeState for DVector<f64> {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        self.iter_mut()
            .zip(other.iter())
            .for_each(|(s, o)| *s += a * o);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

impl OdeState for DMatrix<f64> {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        self.iter_mut()
            .zip(other.iter())
            .for_each(|(s, o)| *s += a * o);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}

/// Joint mean/covariance state, integrated as one combined vector so both
/// equations see identical intermediate times.
#[derive(Debug, Clone)]
pub struct MeanCov {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl OdeState for MeanCov {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        self.mean.scaled_add(a, &other.mean);
        self.cov.scaled_add(a, &other.cov);
    }
    fn all_finite(&self) -> bool {
        self.mean.all_finite() && self.cov.all_finite()
    }
}

/// One classical RK4 step from `t` to `t + h`.
///
/// Derivatives are checked for finiteness; a NaN or infinity aborts the
/// propagation with the offending time in the error.
pub fn rk4_step<S, F>(f: &mut F, t: f64, x: &S, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    let half = 0.5 * h;

    let k1 = f(t, x);
    let mut stage = x.clone();
    stage.scaled_add(half, &k1);
    let k2 = f(t + half, &stage);

    stage.clone_from(x);
    stage.scaled_add(half, &k2);
    let k3 = f(t + half, &stage);

    stage.clone_from(x);
    stage.scaled_add(h, &k3);
    let k4 = f(t + h, &stage);

    if !(k1.all_finite() && k2.all_finite() && k3.all_finite() && k4.all_finite()) {
        return Err(Error::NonFinite { t });
    }

    let sixth = h / 6.0;
    let third = h / 3.0;
    let mut out = x.clone();
    out.scaled_add(sixth, &k1);
    out.scaled_add(third, &k2);
    out.scaled_add(third, &k3);
    out.scaled_add(sixth, &k4);
    if !out.all_finite() {
        return Err(Error::NonFinite { t });
    }
    Ok(out)
}

/// `m <- (m + m') / 2`, suppressing asymmetric drift from finite arithmetic.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Mean/covariance moment ODEs integrated over `[from, to]`, recording the
/// whole trajectory. The covariance obeys `P' = F P + P F' + G Q G'` and is
/// re-symmetrized after every step.
pub fn propagate_lyapunov(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    mean0: DVector<f64>,
    cov0: DMatrix<f64>,
) -> Result<UnconditionalTrajectory> {
    let steps = steps_between(from, to, h)?;
    let grid = TimeGrid::new(from, h, steps)?;
    let mut means = Vec::with_capacity(steps + 1);
    let mut covs = Vec::with_capacity(steps + 1);

    let mut deriv = |t: f64, s: &MeanCov| -> MeanCov {
        let f = system.dynamics(t);
        let q = system.process_noise_cov(t);
        MeanCov {
            mean: f * &s.mean,
            cov: f * &s.cov + &s.cov * f.transpose() + q,
        }
    };

    let mut state = MeanCov {
        mean: mean0,
        cov: cov0,
    };
    means.push(state.mean.clone());
    covs.push(state.cov.clone());
    for k in 0..steps {
        state = rk4_step(&mut deriv, grid.point(k), &state, h)?;
        symmetrize(&mut state.cov);
        means.push(state.mean.clone());
        covs.push(state.cov.clone());
    }

    Ok(UnconditionalTrajectory { grid, means, covs })
}

/// Kalman-predictor propagation of an estimate over a lead interval.
///
/// Same moment ODEs (and the same code path) as [`propagate_lyapunov`],
/// applied to a conditional state. A zero-length interval returns the input
/// unchanged.
pub fn propagate_prediction(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    state: &EstimatorState,
) -> Result<EstimatorState> {
    let traj = propagate_lyapunov(system, from, to, h, state.mean.clone(), state.cov.clone())?;
    Ok(EstimatorState {
        t: traj.grid.end(),
        mean: traj.means.last().unwrap().clone(),
        cov: traj.covs.last().unwrap().clone(),
    })
}

/// Covariance-only propagation `P' = F P + P F' + G Q G'` over `[from, to]`,
/// re-symmetrized after every step.
pub fn propagate_cov(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let steps = steps_between(from, to, h)?;
    let mut deriv = |t: f64, p: &DMatrix<f64>| {
        let f = system.dynamics(t);
        f * p + p * f.transpose() + system.process_noise_cov(t)
    };
    let mut p = cov.clone();
    for k in 0..steps {
        p = rk4_step(&mut deriv, from + k as f64 * h, &p, h)?;
        symmetrize(&mut p);
    }
    Ok(p)
}

/// Mean-only propagation `x' = F x` over `[from, to]`.
pub fn propagate_mean(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    let steps = steps_between(from, to, h)?;
    let mut deriv = |t: f64, x: &DVector<f64>| system.dynamics(t) * x;
    let mut x = mean.clone();
    for k in 0..steps {
        x = rk4_step(&mut deriv, from + k as f64 * h, &x, h)?;
    }
    Ok(x)
}

/// Homogeneous propagation of a cross-covariance block over a prediction
/// interval: `P' = F P + P F'`, with no process-noise term. The block is not
/// symmetric in general and is left un-symmetrized.
pub fn propagate_cross_prediction(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let steps = steps_between(from, to, h)?;
    let mut deriv = |t: f64, m: &DMatrix<f64>| {
        let f = system.dynamics(t);
        f * m + m * f.transpose()
    };
    let mut p = p.clone();
    for k in 0..steps {
        p = rk4_step(&mut deriv, from + k as f64 * h, &p, h)?;
    }
    Ok(p)
}

/// Cross-covariance prediction including the shared process-noise term:
/// `P' = F P + P F' + G Q G'`.
///
/// Over a prediction interval both local errors accumulate the same process
/// noise, so their empirical cross-covariance carries the full noise term,
/// exactly like a diagonal block. See `cross_cov_oracle` in
/// [`crate::simulation`] for the measurement of both forms.
pub fn propagate_cross_prediction_driven(
    system: &LtvSystem,
    from: f64,
    to: f64,
    h: f64,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let steps = steps_between(from, to, h)?;
    let mut deriv = |t: f64, m: &DMatrix<f64>| {
        let f = system.dynamics(t);
        f * m + m * f.transpose() + system.process_noise_cov(t)
    };
    let mut p = p.clone();
    for k in 0..steps {
        p = rk4_step(&mut deriv, from + k as f64 * h, &p, h)?;
    }
    Ok(p)
}
