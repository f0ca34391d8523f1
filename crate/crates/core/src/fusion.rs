//! Distributed fusion of local estimators: pairwise error cross-covariances,
//! optimal matrix weights, and the fused estimate.
//!
//! Local estimators watching the same plant have correlated errors because
//! the plant is driven by one shared process noise. The weights that combine
//! them optimally therefore need the full grid of pairwise cross-covariances,
//! integrated here from the gain trajectories the local filter passes
//! recorded.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorState, GainTrajectory};
use crate::model::Scenario;
use crate::numerics::{self, rk4_step, symmetrize, TIME_EPS};

/// Grid of pairwise error cross-covariances over an active sensor subset at
/// one instant. `blocks[a][a]` is the local covariance of `active[a]`;
/// `blocks[a][b]` the cross-covariance between the estimators of `active[a]`
/// and `active[b]`.
#[derive(Debug, Clone)]
pub struct CrossCovState {
    pub t: f64,
    /// Sensor indices the blocks refer to, ascending.
    pub active: Vec<usize>,
    pub blocks: Vec<Vec<DMatrix<f64>>>,
}

impl CrossCovState {
    pub fn new(t: f64, active: Vec<usize>, blocks: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        let count = active.len();
        if count == 0 || blocks.len() != count || blocks.iter().any(|row| row.len() != count) {
            return Err(Error::FusionMismatch(
                "cross-covariance grid shape does not match the active set".into(),
            ));
        }
        let n = blocks[0][0].nrows();
        let mut scale = 0.0_f64;
        for row in &blocks {
            for b in row {
                if b.nrows() != n || b.ncols() != n {
                    return Err(Error::FusionMismatch(
                        "cross-covariance blocks must all be n x n".into(),
                    ));
                }
                scale = scale.max(b.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
            }
        }
        for a in 0..count {
            for b in 0..count {
                let diff = (&blocks[a][b] - blocks[b][a].transpose()).abs().max();
                if diff > 1e-8 * (1.0 + scale) {
                    return Err(Error::FusionMismatch(format!(
                        "block ({a}, {b}) is not the transpose of block ({b}, {a})"
                    )));
                }
            }
        }
        Ok(Self { t, active, blocks })
    }

    /// Number of fused estimators.
    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.blocks[0][0].nrows()
    }

    /// The full `nN x nN` block matrix.
    pub fn block_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let count = self.len();
        let mut big = DMatrix::zeros(n * count, n * count);
        for a in 0..count {
            for b in 0..count {
                big.view_mut((a * n, b * n), (n, n)).copy_from(&self.blocks[a][b]);
            }
        }
        big
    }
}

/// Fused estimate, its covariance, and the weights that produced it.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub weights: Vec<DMatrix<f64>>,
    pub active: Vec<usize>,
    /// True when the weight system was degenerate and equal weights were
    /// used instead.
    pub degenerate_fallback: bool,
}

/// Joint error-system construction for a sensor pair: the two local error
/// processes driven by the composite noise `[w_i' w_j' v']'`. Its cross
/// intensity `B_i Q_xi B_j'` collapses to `G Q G'` because the measurement
/// noises of distinct sensors are uncorrelated, which is why the shared
/// process noise is all that couples two local filters over the horizon.
#[derive(Debug, Clone)]
pub struct JointErrorSystem {
    pub b_i: DMatrix<f64>,
    pub b_j: DMatrix<f64>,
    pub q_xi: DMatrix<f64>,
}

impl JointErrorSystem {
    pub fn new(
        gain_i: &DMatrix<f64>,
        gain_j: &DMatrix<f64>,
        g: &DMatrix<f64>,
        r_i: &DMatrix<f64>,
        r_j: &DMatrix<f64>,
        q: &DMatrix<f64>,
    ) -> Self {
        let n = g.nrows();
        let (mi, mj, r) = (gain_i.ncols(), gain_j.ncols(), g.ncols());
        let total = mi + mj + r;

        let mut b_i = DMatrix::zeros(n, total);
        b_i.view_mut((0, 0), (n, mi)).copy_from(&(-gain_i));
        b_i.view_mut((0, mi + mj), (n, r)).copy_from(g);

        let mut b_j = DMatrix::zeros(n, total);
        b_j.view_mut((0, mi), (n, mj)).copy_from(&(-gain_j));
        b_j.view_mut((0, mi + mj), (n, r)).copy_from(g);

        let mut q_xi = DMatrix::zeros(total, total);
        q_xi.view_mut((0, 0), (mi, mi)).copy_from(r_i);
        q_xi.view_mut((mi, mi), (mj, mj)).copy_from(r_j);
        q_xi.view_mut((mi + mj, mi + mj), (r, r)).copy_from(q);

        Self { b_i, b_j, q_xi }
    }

    /// `B_i Q_xi B_j'`, the coupling intensity between the two error
    /// processes. Equals `G Q G'`.
    pub fn cross_noise_cov(&self) -> DMatrix<f64> {
        &self.b_i * &self.q_xi * self.b_j.transpose()
    }
}

/// Cross-covariance between two local estimators at time `t`, integrated
/// over the horizon window from the shared unconditional covariance:
/// `P' = (F - L_i H_i) P + P (F - L_j H_j)' + G Q G'`,
/// with the recorded gains held constant over each step.
pub fn cross_cov_horizon(
    scn: &Scenario,
    i: usize,
    j: usize,
    t: f64,
    gains_i: &GainTrajectory,
    gains_j: &GainTrajectory,
) -> Result<DMatrix<f64>> {
    if i == j {
        return Err(Error::IdenticalPair);
    }
    for &s in &[i, j] {
        if s >= scn.suite.len() {
            return Err(Error::SensorIndex {
                index: s,
                count: scn.suite.len(),
            });
        }
    }
    let (k, window) = scn.horizon_window_at(t)?;
    if !gains_i.grid.same_as(&window) || !gains_j.grid.same_as(&window) {
        return Err(Error::GridMismatch(
            "gain trajectories do not cover the horizon window".into(),
        ));
    }

    let mut p = scn
        .unconditional()
        .state_at_index(scn.horizon_start_index(k))
        .cov;
    for step in 0..window.count {
        let tk = window.point(step);
        let l_i = &gains_i.gains[step];
        let l_j = &gains_j.gains[step];
        let mut deriv = |tau: f64, m: &DMatrix<f64>| {
            let f = scn.system.dynamics(tau);
            let f_i = f - l_i * scn.suite.sensors[i].h.at(tau);
            let f_j = f - l_j * scn.suite.sensors[j].h.at(tau);
            &f_i * m + m * f_j.transpose() + scn.system.process_noise_cov(tau)
        };
        p = rk4_step(&mut deriv, tk, &p, window.h)?;
    }
    Ok(p)
}

/// Homogeneous propagation of a cross-covariance block over the lead
/// interval (thin wrapper over the numerics primitive).
pub fn cross_cov_predict(scn: &Scenario, t: f64, p_ij: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = scn.grid().index_of(t)?;
    let target = scn.grid().point(k + scn.lead_steps());
    numerics::propagate_cross_prediction(&scn.system, t, target, scn.cfg.step, p_ij)
}

/// Cross-covariance propagation over the lead interval including the shared
/// process-noise term, matching what coupled simulations measure. This is
/// the form the fused covariance schedule uses.
pub fn cross_cov_predict_driven(
    scn: &Scenario,
    t: f64,
    p_ij: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = scn.grid().index_of(t)?;
    let target = scn.grid().point(k + scn.lead_steps());
    numerics::propagate_cross_prediction_driven(&scn.system, t, target, scn.cfg.step, p_ij)
}

/// Equal weights `(1/N) I`, the symmetric limit used when the weight system
/// is degenerate.
pub fn equal_weights(n: usize, count: usize) -> Vec<DMatrix<f64>> {
    vec![DMatrix::identity(n, n) / count as f64; count]
}

/// Optimal fusion weights from one structured linear solve.
///
/// The stationarity conditions `sum_i W_i (P_ij - P_iN) = 0` for
/// `j = 1..N-1` together with the constraint `sum_i W_i = I` form an
/// `nN x nN` system solved here by LU decomposition. Condition estimates
/// above `1e12` are rejected as degenerate.
pub fn fusion_weights(cross: &CrossCovState) -> Result<Vec<DMatrix<f64>>> {
    let count = cross.len();
    let n = cross.dim();
    if count == 1 {
        return Ok(vec![DMatrix::identity(n, n)]);
    }

    // Block column j < N-1 holds P[i][j] - P[i][N-1]; the last block column
    // holds the identity constraint. Transposed so unknown weights stack as
    // column blocks.
    let dim = n * count;
    let mut system = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..count {
        for j in 0..count - 1 {
            let block = &cross.blocks[i][j] - &cross.blocks[i][count - 1];
            system
                .view_mut((j * n, i * n), (n, n))
                .copy_from(&block.transpose());
        }
        system
            .view_mut(((count - 1) * n, i * n), (n, n))
            .copy_from(&DMatrix::identity(n, n));
    }

    let singular = system.clone().singular_values();
    let smax = singular.iter().fold(0.0_f64, |a, &b| a.max(b));
    let smin = singular.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::DegenerateFusion { cond });
    }

    let mut rhs = DMatrix::<f64>::zeros(dim, n);
    rhs.view_mut(((count - 1) * n, 0), (n, n))
        .copy_from(&DMatrix::identity(n, n));

    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::DegenerateFusion { cond })?;

    Ok((0..count)
        .map(|i| solution.view((i * n, 0), (n, n)).transpose())
        .collect())
}

/// Reference weight computation through the explicit block-inverse form:
/// block row sums of the inverted cross-covariance matrix, normalized by the
/// total block sum. Kept as a cross-check for the linear-solve path.
pub fn fusion_weights_block_inverse(cross: &CrossCovState) -> Result<Vec<DMatrix<f64>>> {
    let count = cross.len();
    let n = cross.dim();
    if count == 1 {
        return Ok(vec![DMatrix::identity(n, n)]);
    }

    let big = cross.block_matrix();
    let singular = big.clone().singular_values();
    let smax = singular.iter().fold(0.0_f64, |a, &b| a.max(b));
    let smin = singular.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::DegenerateFusion { cond });
    }

    let inv = big
        .lu()
        .try_inverse()
        .ok_or(Error::DegenerateFusion { cond })?;

    let mut row_sums = Vec::with_capacity(count);
    let mut total = DMatrix::<f64>::zeros(n, n);
    for i in 0..count {
        let mut s = DMatrix::<f64>::zeros(n, n);
        for j in 0..count {
            s += inv.view((i * n, j * n), (n, n));
        }
        total += &s;
        row_sums.push(s);
    }
    let total_inv = total
        .lu()
        .try_inverse()
        .ok_or(Error::DegenerateFusion { cond })?;

    Ok(row_sums.into_iter().map(|s| s * &total_inv).collect())
}

/// Fuse local estimates with the optimal weights. A degenerate weight system
/// (near-identical locals) falls back to equal weights, which satisfy the
/// constraint and are the symmetric limit.
pub fn fuse(locals: &[EstimatorState], cross: &CrossCovState) -> Result<FusionResult> {
    let count = cross.len();
    if locals.len() != count {
        return Err(Error::FusionMismatch(format!(
            "{} local states for {} active sensors",
            locals.len(),
            count
        )));
    }
    let n = cross.dim();
    for s in locals {
        if (s.t - cross.t).abs() > TIME_EPS * (1.0 + cross.t.abs()) {
            return Err(Error::FusionMismatch(format!(
                "local state at t = {} does not match cross-covariance at t = {}",
                s.t, cross.t
            )));
        }
        if s.mean.len() != n {
            return Err(Error::FusionMismatch("state dimension mismatch".into()));
        }
    }

    let (weights, degenerate_fallback) = match fusion_weights(cross) {
        Ok(w) => (w, false),
        Err(Error::DegenerateFusion { cond }) => {
            log::warn!(
                "fusion weight system degenerate at t = {} (cond {:.3e}); using equal weights",
                cross.t,
                cond
            );
            (equal_weights(n, count), true)
        }
        Err(e) => return Err(e),
    };

    let mut mean = DVector::<f64>::zeros(n);
    for (w, s) in weights.iter().zip(locals) {
        mean += w * &s.mean;
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for a in 0..count {
        for b in 0..count {
            cov += &weights[a] * &cross.blocks[a][b] * weights[b].transpose();
        }
    }
    symmetrize(&mut cov);

    Ok(FusionResult {
        t: cross.t,
        mean,
        cov,
        weights,
        active: cross.active.clone(),
        degenerate_fallback,
    })
}
