//! Stackelberg lateral controller.
//!
//! The ego vehicle (leader) chooses its steering sequence knowing that the
//! overtaken vehicle (follower) answers with the acceleration sequence that
//! minimises its own cost. The follower's optimality conditions are embedded
//! into the leader's QP and the resulting program is solved in [`mpec`].

pub mod mpec;

pub use mpec::{
    solve_mpec, solve_mpec_exhaustive, MpecOptions, MpecProblem, MpecResiduals, MpecSolution, MpecStatus, PairState,
};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundaryLine, GeometryError, OccupancyParams, Phase, VehicleGeometry};
use crate::qp::{
    condense_lateral, condense_ov, refine_active_set, CondensedSystem, DenseQp, QpError, QpSolver, QpStatus,
};
use crate::vehicle::{lateral_ltv, Limits, ModelError, SimParams, WorldState};

#[derive(Debug, Error)]
pub enum MpecError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shared sequence has {got} entries, horizon needs {need}")]
    MissingShared { got: usize, need: usize },
    #[error("no complementarity pattern admits a feasible point")]
    Infeasible,
    #[error("node budget exhausted after {nodes} nodes without an incumbent")]
    Budget { nodes: usize },
    #[error("non-finite measurement")]
    NonFinite,
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Diagonal cost weights of the ego lateral game.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaderWeights {
    pub rel_y: f64,
    pub heading: f64,
    pub steer: f64,
}

impl Default for LeaderWeights {
    fn default() -> Self {
        Self { rel_y: 0.5, heading: 2000.0, steer: 4000.0 }
    }
}

/// Diagonal cost weights of the predicted overtaken-vehicle response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowerWeights {
    pub headway: f64,
    pub speed: f64,
    pub effort: f64,
    /// Target headway time, s.
    pub target_headway: f64,
}

impl Default for FollowerWeights {
    fn default() -> Self {
        Self { headway: 0.02, speed: 1.0, effort: 4.0, target_headway: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralConfig {
    pub horizon: usize,
    pub sim: SimParams,
    pub limits: Limits,
    pub occupancy: OccupancyParams,
    pub leader: LeaderWeights,
    pub follower: FollowerWeights,
    pub mpec: MpecOptions,
    /// Distance behind the rear approach anchor from which the ego already
    /// aims for the passing lane. `None` keeps the alongside-only target.
    pub pull_out_lead: Option<f64>,
}

impl Default for LateralConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            sim: SimParams::default(),
            limits: Limits::default(),
            occupancy: VehicleGeometry::default().derive().expect("default geometry is valid"),
            leader: LeaderWeights::default(),
            follower: FollowerWeights::default(),
            mpec: MpecOptions::default(),
            pull_out_lead: None,
        }
    }
}

/// Predictions exchanged between iterations: entry `k` is the previous
/// iteration's prediction for step `k + 1`, i.e. the current step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedSequences {
    pub ego_speed: Vec<f64>,
    pub ov_speed: Vec<f64>,
}

impl SharedSequences {
    /// Constant-speed hold used before any prediction exists.
    pub fn hold(state: &WorldState, horizon: usize) -> Self {
        Self { ego_speed: vec![state.speed; horizon], ov_speed: vec![state.ov_speed; horizon] }
    }

    /// Drops the first element of each `N + 1` prediction.
    pub fn shifted(ego_speed: &[f64], ov_speed: &[f64], horizon: usize) -> Result<Self, MpecError> {
        for seq in [ego_speed, ov_speed] {
            if seq.len() < horizon + 1 {
                return Err(MpecError::MissingShared { got: seq.len(), need: horizon + 1 });
            }
        }
        Ok(Self { ego_speed: ego_speed[1..=horizon].to_vec(), ov_speed: ov_speed[1..=horizon].to_vec() })
    }

    fn check(&self, horizon: usize) -> Result<(), MpecError> {
        for seq in [&self.ego_speed, &self.ov_speed] {
            if seq.len() < horizon || seq.iter().any(|v| !v.is_finite()) {
                return Err(MpecError::MissingShared { got: seq.len(), need: horizon });
            }
        }
        Ok(())
    }

    fn ego_at(&self, k: usize) -> f64 {
        self.ego_speed[k.min(self.ego_speed.len() - 1)]
    }

    fn ov_at(&self, k: usize) -> f64 {
        self.ov_speed[k.min(self.ov_speed.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FollowerSpec {
    /// Weights on `[rel_x, ov_speed, ov_accel]`.
    pub weights: Matrix3<f64>,
    pub reference: Vector3<f64>,
    /// Bounds on `[ov_speed, ov_accel]`.
    pub lower: Vector2<f64>,
    pub upper: Vector2<f64>,
    pub headway_gate: bool,
    pub target_headway: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeaderSpec {
    /// Weights on `[rel_y, heading, steer]`.
    pub weights: Matrix3<f64>,
    pub reference: Vector3<f64>,
    pub lower: Vector3<f64>,
    pub upper: Vector3<f64>,
}

/// Headway distance the follower tracks while the gate is open.
pub fn headway_target(occ: &OccupancyParams, ov_speed: f64, target_headway: f64) -> f64 {
    occ.standstill_gap + ov_speed * target_headway
}

/// Lane the ego aims for: the passing lane while alongside, the initial lane otherwise.
pub fn lateral_target(occ: &OccupancyParams, rel_x: f64) -> f64 {
    if (occ.span_start..=occ.span_end).contains(&rel_x) {
        occ.lane_width
    } else {
        0.0
    }
}

/// [`lateral_target`] extended backwards to `lead` metres behind the rear
/// approach anchor at the current ego speed.
pub fn pull_out_target(occ: &OccupancyParams, rel_x: f64, ego_speed: f64, lead: f64) -> f64 {
    let (rear, _) = occ.anchors(ego_speed, 0.0);
    if (rear - lead..=occ.span_end).contains(&rel_x) {
        occ.lane_width
    } else {
        lateral_target(occ, rel_x)
    }
}

pub fn build_follower(
    state: &WorldState,
    shared: &SharedSequences,
    cfg: &LateralConfig,
) -> Result<(FollowerSpec, CondensedSystem), MpecError> {
    if !state.is_finite() {
        return Err(MpecError::NonFinite);
    }
    shared.check(cfg.horizon)?;
    let occ = &cfg.occupancy;
    let w = &cfg.follower;
    let target = headway_target(occ, state.ov_speed, w.target_headway);
    let gate = occ.span_end <= state.rel_x && state.rel_x <= target;
    let spec = FollowerSpec {
        weights: Matrix3::from_diagonal(&Vector3::new(if gate { w.headway } else { 0.0 }, w.speed, w.effort)),
        reference: Vector3::new(target, state.ov_speed, 0.0),
        lower: Vector2::new(cfg.sim.ov_speed_min, cfg.limits.accel_min),
        upper: Vector2::new(cfg.sim.ov_speed_max, cfg.limits.accel_max),
        headway_gate: gate,
        target_headway: w.target_headway,
    };
    let sys = condense_ov(
        Vector2::new(state.rel_x, state.ov_speed),
        &shared.ego_speed[..cfg.horizon],
        &cfg.sim,
        cfg.horizon,
    )?;
    Ok((spec, sys))
}

pub fn build_leader(
    state: &WorldState,
    shared: &SharedSequences,
    cfg: &LateralConfig,
) -> Result<(LeaderSpec, CondensedSystem), MpecError> {
    if !state.is_finite() {
        return Err(MpecError::NonFinite);
    }
    shared.check(cfg.horizon)?;
    let occ = &cfg.occupancy;
    let w = &cfg.leader;
    let (y_lo, y_hi) = occ.road_bounds();
    let spec = LeaderSpec {
        weights: Matrix3::from_diagonal(&Vector3::new(w.rel_y, w.heading, w.steer)),
        reference: Vector3::new(
            match cfg.pull_out_lead {
                Some(lead) => pull_out_target(occ, state.rel_x, state.speed, lead),
                None => lateral_target(occ, state.rel_x),
            },
            0.0,
            0.0,
        ),
        lower: Vector3::new(y_lo, -occ.max_heading, -cfg.limits.max_steer()),
        upper: Vector3::new(y_hi, occ.max_heading, cfg.limits.max_steer()),
    };
    let ltv = lateral_ltv(&shared.ego_speed, &cfg.sim, cfg.horizon)?;
    let sys = condense_lateral(Vector2::new(state.rel_y, state.heading), &ltv, cfg.horizon)?;
    Ok((spec, sys))
}

/// Collision boundary selected for each prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// Longitudinal offsets predicted from the shared sequences.
    pub rel_x: Vec<f64>,
    pub lines: Vec<BoundaryLine>,
}

/// Rolls the gap forward with the shared speeds and picks one segment per step.
pub fn coupling_lines(
    state: &WorldState,
    shared: &SharedSequences,
    cfg: &LateralConfig,
) -> Result<Coupling, MpecError> {
    shared.check(cfg.horizon)?;
    let occ = &cfg.occupancy;
    let n = cfg.horizon;
    let mut rel_x = Vec::with_capacity(n + 1);
    let mut x = state.rel_x;
    for k in 0..=n {
        rel_x.push(x);
        x += cfg.sim.dt * (shared.ego_at(k) - shared.ov_at(k));
    }
    let lines = rel_x
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let (rear, front) = occ.anchors(shared.ego_at(k), shared.ov_at(k));
            occ.line(occ.phase_at(x), rear, front)
        })
        .collect::<Result<_, _>>()?;
    Ok(Coupling { rel_x, lines })
}

fn block_weights(w: &Matrix3<f64>, steps: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(3 * steps, 3 * steps);
    for k in 0..steps {
        out.view_mut((3 * k, 3 * k), (3, 3)).copy_from(w);
    }
    out
}

fn stacked_reference(r: &Vector3<f64>, steps: usize) -> DVector<f64> {
    DVector::from_fn(3 * steps, |i, _| r[i % 3])
}

/// `(H, g, offset)` of `(z − z̃)ᵀ Q (z − z̃)` with `z = free + D u`.
fn tracking_cost(
    d: &DMatrix<f64>,
    free: &DVector<f64>,
    q: &DMatrix<f64>,
    reference: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let e = free - reference;
    let dq = d.tr_mul(q);
    let h = &dq * d * 2.0;
    let g = &dq * &e * 2.0;
    let offset = e.dot(&(q * &e));
    (h, g, offset)
}

/// Builds the single-level program over `[steer (N), ov_accel (N)]`.
///
/// Rows that no decision can influence are left out of the leader block;
/// their follower counterparts stay but their multipliers are fixed at zero.
pub fn assemble_mpec(
    leader: &(LeaderSpec, CondensedSystem),
    follower: &(FollowerSpec, CondensedSystem),
    coupling: &Coupling,
) -> Result<MpecProblem, MpecError> {
    let (ls, lsys) = leader;
    let (fs, fsys) = follower;
    let n = lsys.horizon;
    if fsys.horizon != n || coupling.lines.len() != n + 1 {
        return Err(MpecError::Dimension(format!(
            "leader horizon {n}, follower horizon {}, {} coupling lines",
            fsys.horizon,
            coupling.lines.len()
        )));
    }
    let steps = n + 1;
    let nu = 2 * n;

    let (hy, gy, offset) = tracking_cost(
        &lsys.dz,
        &lsys.cost_free(),
        &block_weights(&ls.weights, steps),
        &stacked_reference(&ls.reference, steps),
    );
    let mut leader_h = DMatrix::zeros(nu, nu);
    leader_h.view_mut((0, 0), (n, n)).copy_from(&hy);
    let mut leader_g = DVector::zeros(nu);
    leader_g.rows_mut(0, n).copy_from(&gy);

    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut lb = Vec::new();
    let mut ub = Vec::new();
    let free_f = lsys.constraint_free();
    for r in 0..3 * steps {
        let d = lsys.df.row(r);
        if d.amax() == 0.0 {
            continue;
        }
        let mut row = DVector::zeros(nu);
        row.rows_mut(0, n).copy_from(&d.transpose());
        rows.push(row);
        lb.push(ls.lower[r % 3] - free_f[r]);
        ub.push(ls.upper[r % 3] - free_f[r]);
    }

    let lat_states = lsys.states(&DVector::zeros(n));
    let ov_states = fsys.states(&DVector::zeros(n));
    let mut soft_rows = Vec::new();
    for (k, line) in coupling.lines.iter().enumerate() {
        let y_row = lsys.state_row(k, 0);
        let x_row = fsys.state_row(k, 0);
        // slope · rel_x(k) + intercept ≤ rel_y(k)
        let mut row = DVector::zeros(nu);
        row.rows_mut(0, n).copy_from(&(-lsys.b.row(y_row).transpose()));
        row.rows_mut(n, n).copy_from(&(fsys.b.row(x_row).transpose() * line.slope));
        if row.amax() == 0.0 {
            continue;
        }
        soft_rows.push(rows.len());
        rows.push(row);
        lb.push(f64::NEG_INFINITY);
        ub.push(lat_states[y_row] - line.intercept - line.slope * ov_states[x_row]);
    }
    let leader_rows = DMatrix::from_fn(rows.len(), nu, |i, j| rows[i][j]);

    let (hf, gf, _) = tracking_cost(
        &fsys.dz,
        &fsys.cost_free(),
        &block_weights(&fs.weights, steps),
        &stacked_reference(&fs.reference, steps),
    );
    let m = 2 * steps;
    let mut follower_rows = DMatrix::zeros(m, nu);
    follower_rows.columns_mut(n, n).copy_from(&fsys.df);
    let free_o = fsys.constraint_free();
    let follower_lb = DVector::from_fn(m, |r, _| fs.lower[r % 2] - free_o[r]);
    let follower_ub = DVector::from_fn(m, |r, _| fs.upper[r % 2] - free_o[r]);

    let problem = MpecProblem {
        n_leader: n,
        n_follower: n,
        leader_h,
        leader_g,
        leader_offset: offset,
        leader_rows,
        leader_lb: DVector::from_vec(lb),
        leader_ub: DVector::from_vec(ub),
        soft_rows,
        follower_h: hf,
        follower_g: gf,
        follower_cross: DMatrix::zeros(n, n),
        follower_rows,
        follower_lb,
        follower_ub,
    };
    problem.validate()?;
    Ok(problem)
}

/// The follower's own problem with the leader's exogenous inputs fixed,
/// summed step by step from its specification.
pub fn follower_qp(spec: &FollowerSpec, sys: &CondensedSystem) -> DenseQp {
    let n = sys.horizon;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut offset = 0.0;
    let free = sys.cost_free();
    for k in 0..=n {
        let d = sys.dz.rows(3 * k, 3);
        let e = free.rows(3 * k, 3) - spec.reference;
        let qd = spec.weights * d;
        h += d.tr_mul(&qd) * 2.0;
        g += qd.tr_mul(&e) * 2.0;
        offset += e.dot(&(spec.weights * e));
    }
    let free_f = sys.constraint_free();
    let lb = DVector::from_fn(2 * (n + 1), |r, _| spec.lower[r % 2] - free_f[r]);
    let ub = DVector::from_fn(2 * (n + 1), |r, _| spec.upper[r % 2] - free_f[r]);
    let mut qp = DenseQp::new(h, g).with_inequalities(sys.df.clone(), lb, ub);
    qp.offset = offset;
    qp
}

/// Solves [`follower_qp`] directly; `None` when it is infeasible.
pub fn solve_follower(
    spec: &FollowerSpec,
    sys: &CondensedSystem,
    solver: &mut QpSolver,
) -> Result<Option<DVector<f64>>, MpecError> {
    let qp = follower_qp(spec, sys);
    let sol = solver.solve(&qp, None)?;
    if sol.status == QpStatus::Infeasible {
        return Ok(None);
    }
    Ok(Some(refine_active_set(&qp, &sol, solver)?.map_or(sol.u, |r| r.u)))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LateralDiagnostics {
    pub nodes: usize,
    pub objective: f64,
    pub status: Option<MpecStatus>,
    pub soft: bool,
    pub slack: f64,
    pub residual: f64,
    /// Largest gap between the embedded follower decision and a direct solve.
    pub audit_error: f64,
    pub target_rel_y: f64,
    pub headway_gate: bool,
    pub active_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralOutput {
    pub steer: Vec<f64>,
    pub ov_accel: Vec<f64>,
    pub ov_speed: Vec<f64>,
    pub rel_y: Vec<f64>,
    pub heading: Vec<f64>,
    pub rel_x: Vec<f64>,
    pub phases: Vec<Phase>,
    pub diagnostics: LateralDiagnostics,
}

/// Owns solver workspace and the previous complementarity pattern.
#[derive(Debug)]
pub struct LateralController {
    pub config: LateralConfig,
    solver: QpSolver,
    warm: Option<Vec<PairState>>,
}

impl LateralController {
    pub fn new(config: LateralConfig) -> Self {
        Self { config, solver: QpSolver::default(), warm: None }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn warm_pattern(&self) -> Option<&[PairState]> {
        self.warm.as_deref()
    }

    pub fn step(&mut self, state: &WorldState, shared: &SharedSequences) -> Result<LateralOutput, MpecError> {
        let cfg = &self.config;
        let n = cfg.horizon;
        let follower = build_follower(state, shared, cfg)?;
        let leader = build_leader(state, shared, cfg)?;
        let coupling = coupling_lines(state, shared, cfg)?;
        let problem = assemble_mpec(&leader, &follower, &coupling)?;
        let sol = solve_mpec(&problem, self.warm.as_deref(), &cfg.mpec, &mut self.solver)?;

        let audit_error = self.audit(&follower, &sol.u_follower)?;
        self.warm = Some(shift_pattern(&sol.pattern, n + 1));

        let lat = leader.1.states(&sol.u_leader);
        let ov = follower.1.states(&sol.u_follower);
        let pick = |x: &DVector<f64>, i: usize| (0..=n).map(|k| x[2 * k + i]).collect::<Vec<_>>();
        Ok(LateralOutput {
            steer: sol.u_leader.iter().copied().collect(),
            ov_accel: sol.u_follower.iter().copied().collect(),
            ov_speed: pick(&ov, 1),
            rel_y: pick(&lat, 0),
            heading: pick(&lat, 1),
            rel_x: pick(&ov, 0),
            phases: coupling.lines.iter().map(|l| l.phase).collect(),
            diagnostics: LateralDiagnostics {
                nodes: sol.nodes,
                objective: sol.objective,
                status: Some(sol.status),
                soft: sol.slack.is_some(),
                slack: sol.slack.unwrap_or(0.0),
                residual: sol.residuals.max(),
                audit_error,
                target_rel_y: leader.0.reference[0],
                headway_gate: follower.0.headway_gate,
                active_pairs: sol.pattern.iter().filter(|p| **p == PairState::Active).count(),
            },
        })
    }

    fn audit(&mut self, follower: &(FollowerSpec, CondensedSystem), u: &DVector<f64>) -> Result<f64, MpecError> {
        Ok(match solve_follower(&follower.0, &follower.1, &mut self.solver)? {
            Some(direct) => (direct - u).amax(),
            None => f64::INFINITY,
        })
    }
}

/// Moves every follower row one step earlier for the next iteration.
fn shift_pattern(pattern: &[PairState], steps: usize) -> Vec<PairState> {
    let m = 2 * steps;
    let mut out = pattern.to_vec();
    for side in 0..2 {
        for k in 0..steps {
            let from = (k + 1).min(steps - 1);
            for c in 0..2 {
                out[side * m + 2 * k + c] = pattern[side * m + 2 * from + c];
            }
        }
    }
    out
}
