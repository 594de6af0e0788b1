//! Chance-constrained longitudinal controller.
//!
//! The overtaken vehicle's acceleration enters the longitudinal model as a
//! Gaussian disturbance centred on the lateral game's prediction. Mean and
//! covariance are propagated over the horizon and every collision half-plane
//! is tightened by a quantile margin, which keeps the program a convex QP.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf_inv;
use thiserror::Error;

use crate::geometry::{BoundaryLine, GeometryError, OccupancyParams, VehicleGeometry};
use crate::lateral::{LateralOutput, SharedSequences};
use crate::qp::{condense, refine_active_set, CondensedSystem, DenseQp, OutputMap, QpError, QpSolver, QpStatus, Step};
use crate::vehicle::{longitudinal_model, Limits, ModelError, SimParams, WorldState};

#[derive(Debug, Error)]
pub enum LongitudinalError {
    #[error("risk level {0} outside (0, 0.5)")]
    Risk(f64),
    #[error("standard deviation {0} is negative")]
    NegativeStd(f64),
    #[error("variance {value} at step {step} is negative or non-finite")]
    Variance { step: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lateral output covers {got} steps, horizon needs {need}")]
    MissingLateral { got: usize, need: usize },
    #[error("non-finite measurement")]
    NonFinite,
    #[error("longitudinal program infeasible even with softened collision rows")]
    Infeasible,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Admissible probability of violating one collision row.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Risk(f64);

impl Risk {
    pub fn new(beta: f64) -> Result<Self, LongitudinalError> {
        if beta > 0.0 && beta < 0.5 {
            Ok(Self(beta))
        } else {
            Err(LongitudinalError::Risk(beta))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Standard-normal quantile `√2 · erf⁻¹(1 − 2β)`.
    pub fn multiplier(self) -> f64 {
        std::f64::consts::SQRT_2 * erf_inv(1.0 - 2.0 * self.0)
    }
}

impl Default for Risk {
    fn default() -> Self {
        Self(0.05)
    }
}

impl TryFrom<f64> for Risk {
    type Error = LongitudinalError;

    fn try_from(beta: f64) -> Result<Self, Self::Error> {
        Self::new(beta)
    }
}

impl From<Risk> for f64 {
    fn from(r: Risk) -> f64 {
        r.0
    }
}

/// Distance by which a row with standard deviation `std` must be tightened.
pub fn chance_margin(risk: Risk, std: f64) -> Result<f64, LongitudinalError> {
    if !(std >= 0.0) {
        return Err(LongitudinalError::NegativeStd(std));
    }
    Ok(risk.multiplier() * std)
}

/// Mean and covariance of `[rel_x, speed, ov_speed]` for `k = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<Vector3<f64>>,
    pub cov: Vec<Matrix3<f64>>,
}

impl GaussianMoments {
    pub fn horizon(&self) -> usize {
        self.mean.len().saturating_sub(1)
    }
}

fn check_variances(sigma2: &[f64]) -> Result<(), LongitudinalError> {
    match sigma2.iter().position(|s| !(*s >= 0.0) || !s.is_finite()) {
        Some(step) => Err(LongitudinalError::Variance { step, value: sigma2[step] }),
        None => Ok(()),
    }
}

fn covariances(a: &Matrix3<f64>, e: &Vector3<f64>, sigma2: &[f64]) -> Vec<Matrix3<f64>> {
    let mut out = Vec::with_capacity(sigma2.len() + 1);
    let mut cov = Matrix3::zeros();
    out.push(cov);
    for &s in sigma2 {
        cov = a * cov * a.transpose() + e * e.transpose() * s;
        out.push(cov);
    }
    out
}

/// Propagates the moments from a deterministic initial state.
pub fn propagate_moments(
    x0: Vector3<f64>,
    accel: &[f64],
    ov_accel_mean: &[f64],
    sigma2: &[f64],
    params: &SimParams,
) -> Result<GaussianMoments, LongitudinalError> {
    let n = accel.len();
    if ov_accel_mean.len() != n || sigma2.len() != n {
        return Err(LongitudinalError::Dimension(format!(
            "{n} accelerations, {} disturbance means, {} variances",
            ov_accel_mean.len(),
            sigma2.len()
        )));
    }
    check_variances(sigma2)?;
    let (a, b, e) = longitudinal_model(params)?;
    let mut mean = Vec::with_capacity(n + 1);
    let mut x = x0;
    mean.push(x);
    for (u, w) in accel.iter().zip(ov_accel_mean) {
        x = a * x + b * *u + e * *w;
        mean.push(x);
    }
    Ok(GaussianMoments { mean, cov: covariances(&a, &e, sigma2) })
}

/// Cost weights: linear reward on the gap, quadratic speed tracking and effort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongitudinalWeights {
    pub progress: f64,
    pub speed: f64,
    pub effort: f64,
}

impl Default for LongitudinalWeights {
    fn default() -> Self {
        Self { progress: 6.0, speed: 1.0, effort: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalConfig {
    pub horizon: usize,
    pub sim: SimParams,
    pub limits: Limits,
    pub occupancy: OccupancyParams,
    pub weights: LongitudinalWeights,
    pub risk: Risk,
    pub speed_min: f64,
    /// Quadratic penalty on the shared slack of the softened program.
    pub slack_weight: f64,
}

impl Default for LongitudinalConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            sim: SimParams::default(),
            limits: Limits::default(),
            occupancy: VehicleGeometry::default().derive().expect("default geometry is valid"),
            weights: LongitudinalWeights::default(),
            risk: Risk::default(),
            speed_min: 0.0,
            slack_weight: 1e4,
        }
    }
}

/// One tightened collision row `slope · E[rel_x(k)] ≤ rel_y*(k) − intercept − margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceRow {
    pub step: usize,
    pub line: BoundaryLine,
    /// Lateral position planned by the lateral controller.
    pub rel_y: f64,
    /// Standard deviation of `slope · rel_x(k)`.
    pub std: f64,
    pub margin: f64,
}

impl ChanceRow {
    /// Right-hand side of the row on the mean gap.
    pub fn bound(&self) -> f64 {
        self.rel_y - self.line.intercept - self.margin
    }

    /// Whether a sampled gap satisfies the untightened half-plane.
    pub fn holds(&self, rel_x: f64) -> bool {
        self.line.slope * rel_x <= self.rel_y - self.line.intercept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub risk: Risk,
    pub rows: Vec<ChanceRow>,
}

/// Assembled longitudinal program over the acceleration sequence.
#[derive(Debug, Clone)]
pub struct LongitudinalProblem {
    pub qp: DenseQp,
    pub chance: ChanceSpec,
    /// Inequality row of each chance row, `None` for rows no input can move.
    pub chance_index: Vec<Option<usize>>,
    /// Moments under zero input; the covariances hold for every input.
    pub free: GaussianMoments,
    pub system: CondensedSystem,
}

impl LongitudinalProblem {
    /// Chance rows whose left side is constant and already violated.
    pub fn violated_constant_rows(&self) -> Vec<usize> {
        self.chance
            .rows
            .iter()
            .zip(&self.chance_index)
            .filter(|(row, idx)| idx.is_none() && row.line.slope * self.free.mean[row.step][0] > row.bound() + 1e-12)
            .map(|(row, _)| row.step)
            .collect()
    }

    /// Appends a nonnegative slack shared by every chance row.
    pub fn softened(&self, weight: f64) -> DenseQp {
        let n = self.qp.num_vars();
        let m = self.qp.a_ineq.nrows();
        let extra: Vec<&ChanceRow> = self
            .chance
            .rows
            .iter()
            .zip(&self.chance_index)
            .filter(|(_, idx)| idx.is_none())
            .map(|(row, _)| row)
            .collect();
        let rows = m + extra.len() + 1;
        let mut a = DMatrix::zeros(rows, n + 1);
        a.view_mut((0, 0), (m, n)).copy_from(&self.qp.a_ineq);
        let mut lb = DVector::from_element(rows, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(rows, f64::INFINITY);
        lb.rows_mut(0, m).copy_from(&self.qp.lb);
        ub.rows_mut(0, m).copy_from(&self.qp.ub);
        for idx in self.chance_index.iter().flatten() {
            a[(*idx, n)] = -1.0;
        }
        for (j, row) in extra.iter().enumerate() {
            a[(m + j, n)] = -1.0;
            ub[m + j] = row.bound() - row.line.slope * self.free.mean[row.step][0];
        }
        a[(rows - 1, n)] = 1.0;
        lb[rows - 1] = 0.0;
        let mut h = DMatrix::zeros(n + 1, n + 1);
        h.view_mut((0, 0), (n, n)).copy_from(&self.qp.h);
        h[(n, n)] = 2.0 * weight;
        let mut g = DVector::zeros(n + 1);
        g.rows_mut(0, n).copy_from(&self.qp.g);
        let mut qp = DenseQp::new(h, g).with_inequalities(a, lb, ub);
        qp.offset = self.qp.offset;
        qp
    }
}

fn lateral_len(lateral: &LateralOutput) -> usize {
    [lateral.rel_y.len(), lateral.rel_x.len(), lateral.ov_speed.len()]
        .into_iter()
        .min()
        .unwrap_or(0)
        .saturating_sub(1)
        .min(lateral.ov_accel.len())
}

/// Builds the program for one iteration.
///
/// `shared` supplies the ego speeds planned at the previous iteration, which
/// place the rear anchor of the approach segment; the front anchor uses the
/// fresh overtaken-vehicle speed prediction.
pub fn build_longitudinal_qp(
    state: &WorldState,
    lateral: &LateralOutput,
    shared: &SharedSequences,
    sigma2: &[f64],
    cfg: &LongitudinalConfig,
) -> Result<LongitudinalProblem, LongitudinalError> {
    if !state.is_finite() {
        return Err(LongitudinalError::NonFinite);
    }
    let n = cfg.horizon;
    if lateral_len(lateral) < n {
        return Err(LongitudinalError::MissingLateral { got: lateral_len(lateral), need: n });
    }
    if shared.ego_speed.is_empty() {
        return Err(LongitudinalError::Dimension("empty shared ego speed sequence".into()));
    }
    if sigma2.len() != n {
        return Err(LongitudinalError::Dimension(format!("{} variances for horizon {n}", sigma2.len())));
    }
    check_variances(sigma2)?;

    let (a, b, e) = longitudinal_model(&cfg.sim)?;
    let step = Step {
        a: DMatrix::from_column_slice(3, 3, a.as_slice()),
        b: DVector::from_column_slice(b.as_slice()),
        e: DVector::from_column_slice(e.as_slice()),
    };
    let speed_map = OutputMap::new(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]), DVector::zeros(1));
    let cost_map = OutputMap::new(
        DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0]),
    );
    let x0 = Vector3::new(state.rel_x, state.speed, state.ov_speed);
    let sys = condense(
        &vec![step; n],
        DVector::from_column_slice(x0.as_slice()),
        DVector::from_column_slice(&lateral.ov_accel[..n]),
        &speed_map,
        &cost_map,
    )?;
    let free_states = sys.states(&DVector::zeros(n));
    let free = GaussianMoments {
        mean: (0..=n).map(|k| Vector3::from_iterator(free_states.rows(3 * k, 3).iter().copied())).collect(),
        cov: covariances(&a, &e, sigma2),
    };

    let w = &cfg.weights;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut offset = 0.0;
    let z_free = sys.cost_free();
    for k in 0..n {
        let gap = sys.b.row(sys.state_row(k, 0));
        let speed = sys.dz.row(2 * k);
        let effort = sys.dz.row(2 * k + 1);
        let dv = z_free[2 * k] - state.ov_speed;
        h += speed.tr_mul(&speed) * (2.0 * w.speed) + effort.tr_mul(&effort) * (2.0 * w.effort);
        g += speed.transpose() * (2.0 * w.speed * dv) - gap.transpose() * w.progress;
        offset += w.speed * dv * dv - w.progress * free.mean[k][0];
    }

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut lb = Vec::new();
    let mut ub = Vec::new();
    for k in 0..n {
        let mut row = DVector::zeros(n);
        row[k] = 1.0;
        rows.push(row);
        lb.push(cfg.limits.accel_min);
        ub.push(cfg.limits.accel_max);
    }
    let speed_free = sys.constraint_free();
    for k in 1..=n {
        rows.push(sys.df.row(k).transpose());
        lb.push(cfg.speed_min - speed_free[k]);
        ub.push(cfg.limits.ego_speed_max - speed_free[k]);
    }

    let occ = &cfg.occupancy;
    let ego_at = |k: usize| shared.ego_speed[k.min(shared.ego_speed.len() - 1)];
    let mut chance_rows = Vec::with_capacity(n.saturating_sub(1));
    let mut chance_index = Vec::with_capacity(n.saturating_sub(1));
    for k in 1..n {
        let (rear, front) = occ.anchors(ego_at(k), lateral.ov_speed[k]);
        let line = occ.line(occ.phase_at(lateral.rel_x[k]), rear, front)?;
        let std = line.slope.abs() * free.cov[k][(0, 0)].max(0.0).sqrt();
        let row = ChanceRow { step: k, line, rel_y: lateral.rel_y[k], std, margin: chance_margin(cfg.risk, std)? };
        let coeff = sys.b.row(sys.state_row(k, 0)).transpose() * line.slope;
        if coeff.amax() == 0.0 {
            chance_index.push(None);
        } else {
            chance_index.push(Some(rows.len()));
            rows.push(coeff);
            lb.push(f64::NEG_INFINITY);
            ub.push(row.bound() - line.slope * free.mean[k][0]);
        }
        chance_rows.push(row);
    }

    let a_ineq = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let mut qp = DenseQp::new(h, g).with_inequalities(a_ineq, DVector::from_vec(lb), DVector::from_vec(ub));
    qp.offset = offset;
    qp.validate()?;
    Ok(LongitudinalProblem {
        qp,
        chance: ChanceSpec { risk: cfg.risk, rows: chance_rows },
        chance_index,
        free,
        system: sys,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalOutput {
    pub accel: Vec<f64>,
    /// Planned ego speed for `k = 0..=N`.
    pub speed: Vec<f64>,
    pub moments: GaussianMoments,
    pub chance: ChanceSpec,
    pub soft: bool,
    pub slack: f64,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Default)]
pub struct LongitudinalController {
    pub config: LongitudinalConfig,
    solver: QpSolver,
}

impl LongitudinalController {
    pub fn new(config: LongitudinalConfig) -> Self {
        Self { config, solver: QpSolver::default() }
    }

    /// Solves the program, softening the collision rows when they cannot all hold.
    pub fn step(
        &mut self,
        state: &WorldState,
        lateral: &LateralOutput,
        shared: &SharedSequences,
        sigma2: f64,
    ) -> Result<LongitudinalOutput, LongitudinalError> {
        let n = self.config.horizon;
        let problem = build_longitudinal_qp(state, lateral, shared, &vec![sigma2; n], &self.config)?;
        let hard = if problem.violated_constant_rows().is_empty() {
            Some(self.solve_exact(&problem.qp)?).filter(|s| s.status == QpStatus::Optimal)
        } else {
            None
        };
        let (u, soft, slack, objective, iterations) = match hard {
            Some(s) => (s.u, false, 0.0, s.objective, s.iterations),
            None => {
                let qp = problem.softened(self.config.slack_weight);
                let s = self.solve_exact(&qp)?;
                if s.status != QpStatus::Optimal {
                    return Err(LongitudinalError::Infeasible);
                }
                (s.u.rows(0, n).into_owned(), true, s.u[n].max(0.0), s.objective, s.iterations)
            }
        };
        let accel: Vec<f64> = u.iter().copied().collect();
        let x0 = Vector3::new(state.rel_x, state.speed, state.ov_speed);
        let moments = propagate_moments(x0, &accel, &lateral.ov_accel[..n], &vec![sigma2; n], &self.config.sim)?;
        Ok(LongitudinalOutput {
            speed: moments.mean.iter().map(|m| m[1]).collect(),
            accel,
            moments,
            chance: problem.chance,
            soft,
            slack,
            objective,
            iterations,
        })
    }

    fn solve_exact(&mut self, qp: &DenseQp) -> Result<crate::qp::QpSolution, LongitudinalError> {
        let sol = self.solver.solve(qp, None)?;
        if sol.status != QpStatus::Optimal {
            return Ok(sol);
        }
        Ok(refine_active_set(qp, &sol, &mut self.solver)?.unwrap_or(sol))
    }
}
