//! Leader QP with an embedded convex follower, solved over complementarity
//! patterns.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::MpecError;
use crate::qp::{refine_active_set, DenseQp, QpSolution, QpSolver, QpStatus};

/// How a node treats one multiplier/slack pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairState {
    /// Complementarity relaxed.
    Free,
    /// Multiplier fixed at zero.
    MultZero,
    /// Constraint side held at its bound.
    Active,
}

/// Single-level program: a leader QP over `u = [u_leader, u_follower]`
/// constrained by the optimality conditions of a convex follower QP
///
/// ```text
/// min_{u_f} ½ u_fᵀ Hf u_f + (gf + Cross · u_l)ᵀ u_f   s.t.  flo ≤ F u ≤ fup
/// ```
///
/// Pairs are ordered `[lower sides (m); upper sides (m)]`, and the full
/// decision vector is `[u; λ_lower; λ_upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpecProblem {
    pub n_leader: usize,
    pub n_follower: usize,
    pub leader_h: DMatrix<f64>,
    pub leader_g: DVector<f64>,
    pub leader_offset: f64,
    pub leader_rows: DMatrix<f64>,
    pub leader_lb: DVector<f64>,
    pub leader_ub: DVector<f64>,
    /// Leader rows softened by the fallback slack.
    pub soft_rows: Vec<usize>,
    pub follower_h: DMatrix<f64>,
    pub follower_g: DVector<f64>,
    pub follower_cross: DMatrix<f64>,
    pub follower_rows: DMatrix<f64>,
    pub follower_lb: DVector<f64>,
    pub follower_ub: DVector<f64>,
}

impl MpecProblem {
    pub fn num_primal(&self) -> usize {
        self.n_leader + self.n_follower
    }

    pub fn num_rows(&self) -> usize {
        self.follower_rows.nrows()
    }

    pub fn num_pairs(&self) -> usize {
        2 * self.num_rows()
    }

    pub fn num_vars(&self) -> usize {
        self.num_primal() + self.num_pairs()
    }

    pub fn validate(&self) -> Result<(), MpecError> {
        let (nl, nf, nu, m) = (self.n_leader, self.n_follower, self.num_primal(), self.num_rows());
        let checks = [
            (self.leader_h.shape() == (nu, nu), "leader Hessian"),
            (self.leader_g.len() == nu, "leader gradient"),
            (self.leader_rows.ncols() == nu, "leader rows"),
            (self.leader_lb.len() == self.leader_rows.nrows(), "leader lower bounds"),
            (self.leader_ub.len() == self.leader_rows.nrows(), "leader upper bounds"),
            (self.follower_h.shape() == (nf, nf), "follower Hessian"),
            (self.follower_g.len() == nf, "follower gradient"),
            (self.follower_cross.shape() == (nf, nl), "follower cross term"),
            (self.follower_rows.ncols() == nu, "follower rows"),
            (self.follower_lb.len() == m && self.follower_ub.len() == m, "follower bounds"),
            (self.soft_rows.iter().all(|&r| r < self.leader_rows.nrows()), "soft rows"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(MpecError::Dimension(format!("{what} has the wrong shape"))),
            None => Ok(()),
        }
    }

    fn follower_block(&self) -> DMatrix<f64> {
        self.follower_rows.columns(self.n_leader, self.n_follower).into_owned()
    }

    /// Pairs whose multiplier can be fixed at zero without loss: the side is
    /// unbounded or the row does not depend on the follower's decision.
    pub fn prefixed(&self) -> Vec<bool> {
        let m = self.num_rows();
        let block = self.follower_block();
        let mut out = vec![false; 2 * m];
        for i in 0..m {
            let constant = block.row(i).amax() == 0.0;
            out[i] = constant || !self.follower_lb[i].is_finite();
            out[m + i] = constant || !self.follower_ub[i].is_finite();
        }
        out
    }

    /// Follower stationarity `S · [u; λ_lower; λ_upper] = rhs`.
    pub fn stationarity(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (nl, nf, m) = (self.n_leader, self.n_follower, self.num_rows());
        let mut s = DMatrix::zeros(nf, self.num_vars());
        s.view_mut((0, 0), (nf, nl)).copy_from(&self.follower_cross);
        s.view_mut((0, nl), (nf, nf)).copy_from(&self.follower_h);
        let block_t = self.follower_block().transpose();
        s.view_mut((0, nl + nf), (nf, m)).copy_from(&(-&block_t));
        s.view_mut((0, nl + nf + m), (nf, m)).copy_from(&block_t);
        (s, -&self.follower_g)
    }

    pub fn leader_objective(&self, u: &DVector<f64>) -> f64 {
        let u = u.rows(0, self.num_primal());
        0.5 * u.dot(&(&self.leader_h * u)) + self.leader_g.dot(&u) + self.leader_offset
    }

    /// `λ · slack` for every pair (zero for unbounded sides).
    pub fn complementarity(&self, w: &DVector<f64>) -> DVector<f64> {
        let (nu, m) = (self.num_primal(), self.num_rows());
        let f = &self.follower_rows * w.rows(0, nu);
        DVector::from_fn(2 * m, |j, _| {
            let i = j % m;
            let (lambda, slack) = if j < m {
                (w[nu + i], f[i] - self.follower_lb[i])
            } else {
                (w[nu + m + i], self.follower_ub[i] - f[i])
            };
            if slack.is_finite() {
                (lambda * slack).abs()
            } else {
                0.0
            }
        })
    }

    pub fn residuals(&self, w: &DVector<f64>) -> MpecResiduals {
        let nu = self.num_primal();
        let u = w.rows(0, nu).into_owned();
        let (s, rhs) = self.stationarity();
        let stationarity = (&s * w - rhs).amax();
        let primal = |a: &DMatrix<f64>, lb: &DVector<f64>, ub: &DVector<f64>| {
            let au = a * &u;
            (0..au.len()).map(|i| (lb[i] - au[i]).max(au[i] - ub[i]).max(0.0)).fold(0.0, f64::max)
        };
        let leader = primal(&self.leader_rows, &self.leader_lb, &self.leader_ub);
        let follower = primal(&self.follower_rows, &self.follower_lb, &self.follower_ub);
        let dual = w.rows(nu, self.num_pairs()).iter().fold(0.0f64, |acc, &l| acc.max(-l));
        MpecResiduals {
            stationarity,
            primal: leader.max(follower),
            dual,
            complementarity: self.complementarity(w).amax(),
        }
    }

    /// Leader objective and rows over the full variable vector.
    fn leader_block(&self) -> DenseQp {
        let (nu, nv) = (self.num_primal(), self.num_vars());
        // Normalised so the solver's absolute tolerances stay meaningful;
        // callers evaluate the true objective with `leader_objective`.
        let scale = self.leader_h.amax().max(self.leader_g.amax()).max(1.0);
        let mut h = DMatrix::zeros(nv, nv);
        h.view_mut((0, 0), (nu, nu)).copy_from(&(&self.leader_h / scale));
        let mut g = DVector::zeros(nv);
        g.rows_mut(0, nu).copy_from(&(&self.leader_g / scale));
        let mut qp = DenseQp::new(h, g);
        qp.offset = self.leader_offset / scale;

        let pad = |a: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows(), nv);
            out.columns_mut(0, nu).copy_from(a);
            out
        };
        qp.push_inequalities(&pad(&self.leader_rows), &self.leader_lb, &self.leader_ub);
        qp
    }

    /// Relaxation for a node.
    pub fn relaxation(&self, pattern: &[PairState], cap: f64) -> DenseQp {
        let (nu, m, nv) = (self.num_primal(), self.num_rows(), self.num_vars());
        let mut qp = self.leader_block();
        self.push_follower_rows(&mut qp, pattern, nu, nv);

        let mut lam = DMatrix::zeros(2 * m, nv);
        lam.columns_mut(nu, 2 * m).fill_with_identity();
        let lam_ub =
            DVector::from_iterator(2 * m, pattern.iter().map(|p| if *p == PairState::MultZero { 0.0 } else { cap }));
        qp.push_inequalities(&lam, &DVector::zeros(2 * m), &lam_ub);

        let (s, rhs) = self.stationarity();
        qp.push_equalities(&s, &rhs);
        qp
    }

    /// Leader problem with the follower decision and multipliers fixed.
    pub fn pinned_relaxation(&self, response: &FollowerResponse) -> DenseQp {
        let (nl, nf, m, nv) = (self.n_leader, self.n_follower, self.num_rows(), self.num_vars());
        let mut qp = self.leader_block();
        let mut a = DMatrix::zeros(nf + 2 * m, nv);
        a.view_mut((0, nl), (nf + 2 * m, nf + 2 * m)).fill_with_identity();
        let mut b = DVector::zeros(nf + 2 * m);
        b.rows_mut(0, nf).copy_from(&response.u);
        b.rows_mut(nf, 2 * m).copy_from(&response.lambda);
        qp.push_equalities(&a, &b);
        qp
    }

    fn push_follower_rows(&self, qp: &mut DenseQp, pattern: &[PairState], nu: usize, nv: usize) {
        let m = self.num_rows();
        let mut rows = DMatrix::zeros(m, nv);
        rows.columns_mut(0, nu).copy_from(&self.follower_rows);
        let mut flo = self.follower_lb.clone();
        let mut fup = self.follower_ub.clone();
        for i in 0..m {
            let (lo, up) = (self.follower_lb[i], self.follower_ub[i]);
            match (pattern[i] == PairState::Active, pattern[m + i] == PairState::Active) {
                (true, false) => fup[i] = lo,
                (false, true) => flo[i] = up,
                // Crossed unless the row is an equality.
                (true, true) => (flo[i], fup[i]) = (up, lo),
                (false, false) => {}
            }
        }
        qp.push_inequalities(&rows, &flo, &fup);
    }

    /// Copy with one nonnegative slack appended to the leader block that
    /// relaxes every soft row, penalised by `weight · slack²`.
    pub fn with_soft_slack(&self, weight: f64) -> MpecProblem {
        let (nl, nf) = (self.n_leader, self.n_follower);
        let nu = nl + nf + 1;
        let widen = |a: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows(), nu);
            out.columns_mut(0, nl).copy_from(&a.columns(0, nl));
            out.columns_mut(nl + 1, nf).copy_from(&a.columns(nl, nf));
            out
        };
        let mut h = widen(&widen(&self.leader_h).transpose()).transpose();
        h[(nl, nl)] = 2.0 * weight;
        let mut g = DVector::zeros(nu);
        g.rows_mut(0, nl).copy_from(&self.leader_g.rows(0, nl));
        g.rows_mut(nl + 1, nf).copy_from(&self.leader_g.rows(nl, nf));

        let r = self.leader_rows.nrows();
        let mut rows = DMatrix::zeros(r + 1, nu);
        rows.rows_mut(0, r).copy_from(&widen(&self.leader_rows));
        for &i in &self.soft_rows {
            // Soft rows are one-sided upper bounds.
            rows[(i, nl)] = -1.0;
        }
        rows[(r, nl)] = 1.0;
        let mut lb = DVector::zeros(r + 1);
        lb.rows_mut(0, r).copy_from(&self.leader_lb);
        let mut ub = DVector::from_element(r + 1, f64::INFINITY);
        ub.rows_mut(0, r).copy_from(&self.leader_ub);
        let mut cross = DMatrix::zeros(nf, nl + 1);
        cross.columns_mut(0, nl).copy_from(&self.follower_cross);

        MpecProblem {
            n_leader: nl + 1,
            n_follower: nf,
            leader_h: h,
            leader_g: g,
            leader_offset: self.leader_offset,
            leader_rows: rows,
            leader_lb: lb,
            leader_ub: ub,
            soft_rows: self.soft_rows.clone(),
            follower_h: self.follower_h.clone(),
            follower_g: self.follower_g.clone(),
            follower_cross: cross,
            follower_rows: widen(&self.follower_rows),
            follower_lb: self.follower_lb.clone(),
            follower_ub: self.follower_ub.clone(),
        }
    }

    /// When the follower ignores the leader and is strictly convex its
    /// response is a single point, computed here once.
    pub fn unique_response(&self, solver: &mut QpSolver) -> Result<Option<FollowerResponse>, MpecError> {
        let nl = self.n_leader;
        let independent = self.follower_cross.amax() == 0.0 && self.follower_rows.columns(0, nl).amax() == 0.0;
        if !independent || self.follower_h.clone().cholesky().is_none() {
            return Ok(None);
        }
        let qp = DenseQp::new(self.follower_h.clone(), self.follower_g.clone()).with_inequalities(
            self.follower_block(),
            self.follower_lb.clone(),
            self.follower_ub.clone(),
        );
        let sol = solver.solve(&qp, None)?;
        if sol.status == QpStatus::Infeasible {
            return Ok(None);
        }
        let sol = refine_active_set(&qp, &sol, solver)?.unwrap_or(sol);
        let m = self.num_rows();
        let prefixed = self.prefixed();
        let lambda = DVector::from_fn(2 * m, |j, _| {
            let l = if j < m { sol.lambda_lower[j] } else { sol.lambda_upper[j - m] };
            if prefixed[j] {
                0.0
            } else {
                l.max(0.0)
            }
        });
        let pattern = lambda.iter().map(|&l| if l > 0.0 { PairState::Active } else { PairState::MultZero }).collect();
        Ok(Some(FollowerResponse { u: sol.u, lambda, pattern }))
    }
}

/// Optimal follower decision with its multipliers `[lower; upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FollowerResponse {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub pattern: Vec<PairState>,
}

/// Constraint residuals of a candidate `[u; λ_lower; λ_upper]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MpecResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl MpecResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MpecStatus {
    Optimal,
    /// Node budget ran out; best incumbent returned.
    Budget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpecSolution {
    pub u_leader: DVector<f64>,
    pub u_follower: DVector<f64>,
    pub lambda_lower: DVector<f64>,
    pub lambda_upper: DVector<f64>,
    /// `MultZero` or `Active` for every pair.
    pub pattern: Vec<PairState>,
    pub objective: f64,
    pub nodes: usize,
    pub status: MpecStatus,
    pub residuals: MpecResiduals,
    /// Fallback slack value when the soft problem had to be solved.
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpecOptions {
    pub node_budget: usize,
    pub complementarity_tol: f64,
    pub multiplier_cap: f64,
    /// Pin the follower to its unique response when it ignores the leader.
    pub tighten_reaction: bool,
    /// Fallback slack penalty; `None` disables the fallback.
    pub slack_weight: Option<f64>,
}

impl Default for MpecOptions {
    fn default() -> Self {
        Self {
            node_budget: 5000,
            complementarity_tol: 1e-6,
            multiplier_cap: 1e5,
            tighten_reaction: true,
            slack_weight: Some(1e4),
        }
    }
}

struct Node {
    bound: f64,
    depth: usize,
    pattern: Vec<PairState>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // Max-heap: smallest bound first, deeper first on ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then(self.depth.cmp(&other.depth))
    }
}

struct Incumbent {
    w: DVector<f64>,
    objective: f64,
    pattern: Vec<PairState>,
}

struct Search<'a> {
    problem: &'a MpecProblem,
    options: &'a MpecOptions,
    solver: &'a mut QpSolver,
    prefixed: Vec<bool>,
    incumbent: Option<Incumbent>,
    nodes: usize,
}

impl Search<'_> {
    fn relax(&mut self, pattern: &[PairState]) -> Result<Option<QpSolution>, MpecError> {
        let qp = self.problem.relaxation(pattern, self.options.multiplier_cap);
        self.solve_node(&qp)
    }

    fn solve_node(&mut self, qp: &DenseQp) -> Result<Option<QpSolution>, MpecError> {
        self.nodes += 1;
        let sol = self.solver.solve(qp, None)?;
        if sol.status == QpStatus::Infeasible || sol.u.iter().any(|x| !x.is_finite()) {
            return Ok(None);
        }
        // Snap to the identified vertex when it checks out.
        Ok(Some(refine_active_set(qp, &sol, self.solver)?.unwrap_or(sol)))
    }

    fn prune_level(&self) -> f64 {
        match &self.incumbent {
            Some(inc) => inc.objective - 1e-9 * (1.0 + inc.objective.abs()),
            None => f64::INFINITY,
        }
    }

    /// Offers a point whose pairs all satisfy the tolerance.
    fn offer(&mut self, sol: &QpSolution, fixed: &[PairState]) {
        let w = &sol.u;
        let products = self.problem.complementarity(w);
        if products.amax() > self.options.complementarity_tol {
            return;
        }
        let objective = self.problem.leader_objective(w);
        if objective >= self.prune_level() {
            return;
        }
        let (nu, m) = (self.problem.num_primal(), self.problem.num_rows());
        let f = &self.problem.follower_rows * w.rows(0, nu);
        let pattern = fixed
            .iter()
            .enumerate()
            .map(|(j, p)| match p {
                PairState::Free => {
                    let i = j % m;
                    let slack =
                        if j < m { f[i] - self.problem.follower_lb[i] } else { self.problem.follower_ub[i] - f[i] };
                    if w[nu + j] > slack {
                        PairState::Active
                    } else {
                        PairState::MultZero
                    }
                }
                other => *other,
            })
            .collect();
        self.incumbent = Some(Incumbent { w: w.clone(), objective, pattern });
    }

    /// Solves a fully fixed pattern.
    fn dive(&mut self, pattern: &[PairState]) -> Result<(), MpecError> {
        let fixed: Vec<PairState> =
            pattern.iter().zip(&self.prefixed).map(|(p, &pre)| if pre { PairState::MultZero } else { *p }).collect();
        if let Some(sol) = self.relax(&fixed)? {
            self.offer(&sol, &fixed);
        }
        Ok(())
    }

    fn best_first(&mut self) -> Result<bool, MpecError> {
        let root: Vec<PairState> =
            self.prefixed.iter().map(|&pre| if pre { PairState::MultZero } else { PairState::Free }).collect();
        let mut heap = BinaryHeap::new();
        heap.push(Node { bound: f64::NEG_INFINITY, depth: 0, pattern: root });
        while let Some(node) = heap.pop() {
            if node.bound >= self.prune_level() {
                break;
            }
            if self.nodes >= self.options.node_budget {
                return Ok(false);
            }
            let Some(sol) = self.relax(&node.pattern)? else { continue };
            let bound = self.problem.leader_objective(&sol.u);
            if bound >= self.prune_level() {
                continue;
            }
            let products = self.problem.complementarity(&sol.u);
            let branch = node
                .pattern
                .iter()
                .enumerate()
                .filter(|(_, p)| **p == PairState::Free)
                .map(|(j, _)| (j, products[j]))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match branch {
                Some((j, worst)) if worst > self.options.complementarity_tol => {
                    for state in [PairState::MultZero, PairState::Active] {
                        let mut pattern = node.pattern.clone();
                        pattern[j] = state;
                        heap.push(Node { bound, depth: node.depth + 1, pattern });
                    }
                }
                _ => self.offer(&sol, &node.pattern),
            }
        }
        Ok(true)
    }
}

fn finish(problem: &MpecProblem, inc: Incumbent, nodes: usize, status: MpecStatus) -> MpecSolution {
    let (nl, nf, m) = (problem.n_leader, problem.n_follower, problem.num_rows());
    let w = inc.w;
    MpecSolution {
        u_leader: w.rows(0, nl).into_owned(),
        u_follower: w.rows(nl, nf).into_owned(),
        lambda_lower: w.rows(nl + nf, m).into_owned(),
        lambda_upper: w.rows(nl + nf + m, m).into_owned(),
        pattern: inc.pattern,
        objective: inc.objective,
        nodes,
        status,
        residuals: problem.residuals(&w),
        slack: None,
    }
}

fn search(
    problem: &MpecProblem,
    warm: Option<&[PairState]>,
    options: &MpecOptions,
    solver: &mut QpSolver,
) -> Result<(Option<Incumbent>, usize, bool), MpecError> {
    let response = if options.tighten_reaction { problem.unique_response(solver)? } else { None };
    let mut s = Search { problem, options, solver, prefixed: problem.prefixed(), incumbent: None, nodes: 0 };
    if let Some(r) = response {
        // Every feasible point shares this follower decision, so one leader
        // solve settles the whole tree.
        if let Some(sol) = s.solve_node(&problem.pinned_relaxation(&r))? {
            s.offer(&sol, &r.pattern);
        }
        return Ok((s.incumbent, s.nodes, true));
    }
    if let Some(w) = warm.filter(|w| w.len() == problem.num_pairs()) {
        s.dive(w)?;
    }
    let complete = s.best_first()?;
    Ok((s.incumbent, s.nodes, complete))
}

/// Branch-and-bound over complementarity pairs.
///
/// A follower that ignores the leader and has a unique response is fixed at
/// it; otherwise the warm pattern is tried before best-first search from the
/// fully relaxed root.
pub fn solve_mpec(
    problem: &MpecProblem,
    warm: Option<&[PairState]>,
    options: &MpecOptions,
    solver: &mut QpSolver,
) -> Result<MpecSolution, MpecError> {
    problem.validate()?;
    let (inc, nodes, complete) = search(problem, warm, options, solver)?;
    let status = if complete { MpecStatus::Optimal } else { MpecStatus::Budget };
    if let Some(inc) = inc {
        return Ok(finish(problem, inc, nodes, status));
    }
    if !complete {
        return Err(MpecError::Budget { nodes });
    }
    let Some(weight) = options.slack_weight.filter(|_| !problem.soft_rows.is_empty()) else {
        return Err(MpecError::Infeasible);
    };
    let soft = problem.with_soft_slack(weight);
    let (inc, more, complete) = search(&soft, None, options, solver)?;
    let status = if complete { MpecStatus::Optimal } else { MpecStatus::Budget };
    let inc = match inc {
        Some(inc) => inc,
        None if complete => return Err(MpecError::Infeasible),
        None => return Err(MpecError::Budget { nodes: nodes + more }),
    };
    let nl = problem.n_leader;
    let full = finish(&soft, inc, nodes + more, status);
    let mut u_leader = DVector::zeros(nl);
    u_leader.copy_from(&full.u_leader.rows(0, nl));
    Ok(MpecSolution { slack: Some(full.u_leader[nl]), u_leader, ..full })
}

/// Solves every admissible complementarity pattern and keeps the best.
///
/// Pairs whose multiplier is irrelevant stay at zero and a row is never held
/// at two distinct bounds; every other combination is tried.
pub fn solve_mpec_exhaustive(
    problem: &MpecProblem,
    solver: &mut QpSolver,
    cap: f64,
) -> Result<MpecSolution, MpecError> {
    problem.validate()?;
    let m = problem.num_rows();
    let prefixed = problem.prefixed();
    let choices: Vec<Vec<(PairState, PairState)>> = (0..m)
        .map(|i| {
            let mut c = vec![(PairState::MultZero, PairState::MultZero)];
            if !prefixed[i] {
                c.push((PairState::Active, PairState::MultZero));
            }
            if !prefixed[m + i] {
                c.push((PairState::MultZero, PairState::Active));
            }
            if !prefixed[i] && !prefixed[m + i] && problem.follower_lb[i] == problem.follower_ub[i] {
                c.push((PairState::Active, PairState::Active));
            }
            c
        })
        .collect();
    let total: usize = choices.iter().map(Vec::len).product();
    let mut best: Option<Incumbent> = None;
    let mut pattern = vec![PairState::MultZero; 2 * m];
    for mut code in 0..total {
        for (i, c) in choices.iter().enumerate() {
            let (lo, up) = c[code % c.len()];
            code /= c.len();
            pattern[i] = lo;
            pattern[m + i] = up;
        }
        let qp = problem.relaxation(&pattern, cap);
        let sol = solver.solve(&qp, None)?;
        if sol.status == QpStatus::Infeasible {
            continue;
        }
        let sol = refine_active_set(&qp, &sol, solver)?.unwrap_or(sol);
        let objective = problem.leader_objective(&sol.u);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(Incumbent { w: sol.u, objective, pattern: pattern.clone() });
        }
    }
    let inc = best.ok_or(MpecError::Infeasible)?;
    Ok(finish(problem, inc, total, MpecStatus::Optimal))
}
