use nalgebra::{DMatrix, DVector};

use super::{DenseQp, QpError, QpSolution, QpStatus, WarmStart};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub tol_stationarity: f64,
    pub tol_complementarity: f64,
    pub tol_primal: f64,
    pub max_iter: usize,
    /// Most negative eigenvalue accepted as round-off.
    pub psd_tol: f64,
    /// Diagonal shift applied to semidefinite cost matrices.
    pub psd_shift: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol_stationarity: 1e-6,
            tol_complementarity: 1e-6,
            tol_primal: 1e-8,
            max_iter: 100,
            psd_tol: 1e-10,
            psd_shift: 1e-10,
        }
    }
}

/// Mehrotra predictor-corrector interior-point solver.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub options: QpOptions,
    /// Iterations spent by the most recent call.
    pub last_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy)]
enum EqOrigin {
    Eq(usize),
    Pinned(usize),
}

/// Problem in internal form: `min ½uᵀHu + gᵀu  s.t.  Gu ≥ h, Au = b`.
struct Standard {
    h: DMatrix<f64>,
    g: DVector<f64>,
    gm: DMatrix<f64>,
    hv: DVector<f64>,
    ineq: Vec<(usize, Side)>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    eq: Vec<EqOrigin>,
}

enum Prepared {
    Ready(Box<Standard>),
    Infeasible,
}

const FRACTION_TO_BOUNDARY: f64 = 0.995;
const REG_PRIMAL: f64 = 1e-11;
const REG_DUAL: f64 = 1e-11;

impl QpSolver {
    pub fn new(options: QpOptions) -> Self {
        Self { options, last_iterations: 0 }
    }

    pub fn solve(&mut self, qp: &DenseQp, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
        qp.validate()?;
        self.last_iterations = 0;
        let std = match self.prepare(qp)? {
            Prepared::Ready(s) => *s,
            Prepared::Infeasible => return Ok(self.infeasible(qp, warm)),
        };
        let n = qp.num_vars();
        let (u, y, z, iterations, converged) = if std.gm.nrows() == 0 {
            let (u, y) = solve_equality_only(&std);
            (u, y, DVector::zeros(0), 1, true)
        } else {
            self.interior_point(&std, warm)
        };
        self.last_iterations = iterations;

        let m = qp.a_ineq.nrows();
        let mut lambda_lower = DVector::zeros(m);
        let mut lambda_upper = DVector::zeros(m);
        let mut nu = DVector::zeros(qp.a_eq.nrows());
        for (k, &(row, side)) in std.ineq.iter().enumerate() {
            match side {
                Side::Lower => lambda_lower[row] = z[k],
                Side::Upper => lambda_upper[row] = z[k],
            }
        }
        for (k, origin) in std.eq.iter().enumerate() {
            match *origin {
                EqOrigin::Eq(i) => nu[i] = y[k],
                EqOrigin::Pinned(i) if y[k] >= 0.0 => lambda_upper[i] = y[k],
                EqOrigin::Pinned(i) => lambda_lower[i] = -y[k],
            }
        }
        debug_assert_eq!(u.len(), n);
        let mut sol = QpSolution {
            objective: qp.objective(&u),
            u,
            lambda_lower,
            lambda_upper,
            nu,
            status: QpStatus::MaxIter,
            kkt_residual: f64::INFINITY,
            iterations,
        };
        let (stat, comp, prim) = kkt_measures(qp, &sol);
        sol.kkt_residual = stat.max(comp).max(prim);
        let o = &self.options;
        sol.status = if stat <= o.tol_stationarity && comp <= o.tol_complementarity && prim <= o.tol_primal {
            QpStatus::Optimal
        } else if !converged && prim > o.tol_primal {
            QpStatus::Infeasible
        } else {
            QpStatus::MaxIter
        };
        if sol.status == QpStatus::Optimal && std.gm.nrows() > 0 {
            // Snap onto the identified active set; its equality solve is direct.
            if let Some(mut exact) = super::refine_active_set(qp, &sol, self)? {
                exact.iterations = iterations;
                self.last_iterations = iterations;
                return Ok(exact);
            }
            self.last_iterations = iterations;
        }
        Ok(sol)
    }

    fn infeasible(&self, qp: &DenseQp, warm: Option<&WarmStart>) -> QpSolution {
        let n = qp.num_vars();
        let u = warm.and_then(|w| w.u.clone()).unwrap_or_else(|| DVector::zeros(n));
        QpSolution {
            objective: f64::INFINITY,
            u,
            lambda_lower: DVector::zeros(qp.a_ineq.nrows()),
            lambda_upper: DVector::zeros(qp.a_ineq.nrows()),
            nu: DVector::zeros(qp.a_eq.nrows()),
            status: QpStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            iterations: 0,
        }
    }

    fn prepare(&self, qp: &DenseQp) -> Result<Prepared, QpError> {
        let n = qp.num_vars();
        let mut h = (&qp.h + qp.h.transpose()) * 0.5;
        if h.clone().cholesky().is_none() {
            let scale = h.amax().max(1.0);
            let shifted = &h + DMatrix::identity(n, n) * (self.options.psd_tol * scale);
            if shifted.cholesky().is_none() {
                let min_eig = h.clone().symmetric_eigen().eigenvalues.min();
                if min_eig < -self.options.psd_tol * scale {
                    return Err(QpError::NotConvex(min_eig));
                }
            }
            for i in 0..n {
                h[(i, i)] += self.options.psd_shift;
            }
        }

        let mut g_rows: Vec<DVector<f64>> = Vec::new();
        let mut hv = Vec::new();
        let mut ineq = Vec::new();
        let mut a_rows: Vec<DVector<f64>> = Vec::new();
        let mut b = Vec::new();
        let mut eq = Vec::new();

        for i in 0..qp.a_eq.nrows() {
            let row = qp.a_eq.row(i).transpose();
            if row.amax() == 0.0 {
                if qp.b_eq[i].abs() > self.options.tol_primal {
                    return Ok(Prepared::Infeasible);
                }
                continue;
            }
            a_rows.push(row);
            b.push(qp.b_eq[i]);
            eq.push(EqOrigin::Eq(i));
        }
        for i in 0..qp.a_ineq.nrows() {
            let (lo, hi) = (qp.lb[i], qp.ub[i]);
            let scale = 1.0 + lo.abs().max(hi.abs()).min(1e300);
            if lo > hi + 1e-14 * scale {
                return Ok(Prepared::Infeasible);
            }
            let row = qp.a_ineq.row(i).transpose();
            if row.amax() == 0.0 {
                if lo > self.options.tol_primal || hi < -self.options.tol_primal {
                    return Ok(Prepared::Infeasible);
                }
                continue;
            }
            if lo.is_finite() && hi.is_finite() && hi - lo <= 1e-14 * scale {
                a_rows.push(row);
                b.push(0.5 * (lo + hi));
                eq.push(EqOrigin::Pinned(i));
                continue;
            }
            if lo.is_finite() {
                g_rows.push(row.clone());
                hv.push(lo);
                ineq.push((i, Side::Lower));
            }
            if hi.is_finite() {
                g_rows.push(-row);
                hv.push(-hi);
                ineq.push((i, Side::Upper));
            }
        }

        // Drop linearly dependent equality rows, then require the survivors to
        // reproduce every dropped right-hand side.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut keep = Vec::new();
        for (k, row) in a_rows.iter().enumerate() {
            let mut r = row.clone();
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
            let norm = r.norm();
            if norm > 1e-10 * row.norm() {
                basis.push(r / norm);
                keep.push(k);
            }
        }
        let a_all = rows_to_matrix(&a_rows, n);
        let b_all = DVector::from_vec(b);
        if keep.len() < a_rows.len() {
            let a_keep = rows_to_matrix(&keep.iter().map(|&k| a_rows[k].clone()).collect::<Vec<_>>(), n);
            let b_keep = DVector::from_iterator(keep.len(), keep.iter().map(|&k| b_all[k]));
            let gram = &a_keep * a_keep.transpose();
            let coef = gram.lu().solve(&b_keep).unwrap_or_else(|| DVector::zeros(keep.len()));
            let u_ls = a_keep.transpose() * coef;
            let resid = (&a_all * &u_ls - &b_all).amax();
            if resid > 1e-9 * (1.0 + b_all.amax()) {
                return Ok(Prepared::Infeasible);
            }
        }
        let eq_kept: Vec<EqOrigin> = keep.iter().map(|&k| eq[k]).collect();
        let a = rows_to_matrix(&keep.iter().map(|&k| a_rows[k].clone()).collect::<Vec<_>>(), n);
        let b = DVector::from_iterator(keep.len(), keep.iter().map(|&k| b_all[k]));

        Ok(Prepared::Ready(Box::new(Standard {
            h,
            g: qp.g.clone(),
            gm: rows_to_matrix(&g_rows, n),
            hv: DVector::from_vec(hv),
            ineq,
            a,
            b,
            eq: eq_kept,
        })))
    }

    #[allow(clippy::type_complexity)]
    fn interior_point(
        &self,
        p: &Standard,
        warm: Option<&WarmStart>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, usize, bool) {
        let n = p.g.len();
        let m = p.gm.nrows();
        let q = p.a.nrows();
        let opt = &self.options;

        let mut u = match warm.and_then(|w| w.u.as_ref()).filter(|u| u.len() == n) {
            Some(u) => u.clone(),
            None => {
                let k = &p.h + p.gm.tr_mul(&p.gm);
                let rhs = -&p.g + p.gm.tr_mul(&p.hv);
                solve_saddle(&k, &p.a, &rhs, &p.b).map(|(u, _)| u).unwrap_or_else(|| DVector::zeros(n))
            }
        };
        if u.iter().any(|x| !x.is_finite()) {
            u = DVector::zeros(n);
        }
        let mut y = DVector::zeros(q);
        let mut s = (&p.gm * &u - &p.hv).map(|v| v.max(1.0));
        let mut z = DVector::from_element(m, 1.0);

        let data_scale = 1.0 + p.g.amax().max(p.hv.amax()).max(p.b.amax());
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;

        for it in 0..opt.max_iter {
            let r_d = &p.h * &u + &p.g - p.gm.tr_mul(&z) + p.a.tr_mul(&y);
            let r_p = &p.a * &u - &p.b;
            let gu_h = &p.gm * &u - &p.hv;
            let r_s = &gu_h - &s;
            let mu = s.dot(&z) / m as f64;

            let stat = r_d.amax();
            let prim = r_p.amax().max(gu_h.iter().fold(0.0f64, |acc, &v| acc.max(-v)));
            let comp = z
                .iter()
                .zip(s.iter().zip(gu_h.iter()))
                .map(|(&zi, (&si, &gi))| (zi * si).abs().max((zi * gi).abs()))
                .fold(0.0, f64::max);
            if stat <= 0.1 * opt.tol_stationarity
                && prim <= 0.1 * opt.tol_primal
                && comp <= 0.1 * opt.tol_complementarity
            {
                return (u, y, z, it, true);
            }
            let merit = stat / (1.0 + p.g.amax()) + prim + comp;
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, u.clone(), y.clone(), z.clone()));
            }

            // Farkas ray: the duals grow along a direction that certifies the
            // constraint set is empty.
            let dual_size = z.amax().max(y.amax());
            if dual_size > 1e8 * data_scale {
                let gz_ay = p.gm.tr_mul(&z) - p.a.tr_mul(&y);
                let certificate = p.hv.dot(&z) - p.b.dot(&y);
                let norm = z.lp_norm(1) + y.lp_norm(1);
                if gz_ay.amax() <= 1e-6 * norm && certificate > 1e-9 * norm {
                    return (u, y, z, it, false);
                }
            }
            if !mu.is_finite() || dual_size > 1e14 * data_scale {
                return (u, y, z, it, false);
            }

            let w = z.component_div(&s);
            let mut gw = p.gm.clone();
            for (i, mut row) in gw.row_iter_mut().enumerate() {
                row *= w[i].sqrt();
            }
            let mut k = &p.h + gw.tr_mul(&gw);
            for i in 0..n {
                k[(i, i)] += REG_PRIMAL;
            }
            let Some(lu) = saddle_lu(&k, &p.a) else {
                return (u, y, z, it, false);
            };
            let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
                let t = (r_c - z.component_mul(&r_s)).component_div(&s);
                let rhs_u = -&r_d + p.gm.tr_mul(&t);
                let mut rhs = DVector::zeros(n + q);
                rhs.rows_mut(0, n).copy_from(&rhs_u);
                rhs.rows_mut(n, q).copy_from(&(-&r_p));
                let sol = lu.solve(&rhs)?;
                let du = sol.rows(0, n).into_owned();
                let dy = sol.rows(n, q).into_owned();
                let ds = &p.gm * &du + &r_s;
                let dz = (r_c - z.component_mul(&ds)).component_div(&s);
                Some((du, dy, ds, dz))
            };

            let r_aff = -s.component_mul(&z);
            let Some((_, _, ds_a, dz_a)) = newton(&r_aff) else {
                return (u, y, z, it, false);
            };
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&z + &dz_a * a_aff)) / m as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

            let r_c = &r_aff - ds_a.component_mul(&dz_a) + DVector::from_element(m, sigma * mu);
            let Some((du, dy, ds, dz)) = newton(&r_c) else {
                return (u, y, z, it, false);
            };
            let alpha = (FRACTION_TO_BOUNDARY * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
            u.axpy(alpha, &du, 1.0);
            y.axpy(alpha, &dy, 1.0);
            s.axpy(alpha, &ds, 1.0);
            z.axpy(alpha, &dz, 1.0);
            // Keep strictly interior against round-off.
            s.apply(|v| *v = v.max(1e-300));
            z.apply(|v| *v = v.max(1e-300));
        }
        match best {
            Some((_, u, y, z)) => (u, y, z, opt.max_iter, false),
            None => (u, y, z, opt.max_iter, false),
        }
    }
}

fn kkt_measures(qp: &DenseQp, sol: &QpSolution) -> (f64, f64, f64) {
    let u = &sol.u;
    let stat =
        (&qp.h * u + &qp.g + qp.a_ineq.tr_mul(&(&sol.lambda_upper - &sol.lambda_lower)) + qp.a_eq.tr_mul(&sol.nu))
            .amax();
    let au = &qp.a_ineq * u;
    let mut comp: f64 = 0.0;
    for i in 0..au.len() {
        if qp.lb[i].is_finite() {
            comp = comp.max((sol.lambda_lower[i] * (au[i] - qp.lb[i])).abs());
        }
        if qp.ub[i].is_finite() {
            comp = comp.max((sol.lambda_upper[i] * (qp.ub[i] - au[i])).abs());
        }
        if sol.lambda_lower[i] < 0.0 || sol.lambda_upper[i] < 0.0 {
            comp = comp.max(-sol.lambda_lower[i].min(sol.lambda_upper[i]));
        }
    }
    (stat, comp, qp.primal_violation(u))
}

fn max_step(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter().zip(dx.iter()).filter(|(_, &d)| d < 0.0).map(|(&v, &d)| -v / d).fold(f64::INFINITY, f64::min)
}

fn rows_to_matrix(rows: &[DVector<f64>], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows.len(), n);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&r.transpose());
    }
    m
}

fn saddle_lu(k: &DMatrix<f64>, a: &DMatrix<f64>) -> Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = k.nrows();
    let q = a.nrows();
    let mut m = DMatrix::zeros(n + q, n + q);
    m.view_mut((0, 0), (n, n)).copy_from(k);
    if q > 0 {
        m.view_mut((0, n), (n, q)).copy_from(&a.transpose());
        m.view_mut((n, 0), (q, n)).copy_from(a);
        for i in 0..q {
            m[(n + i, n + i)] = -REG_DUAL;
        }
    }
    let lu = m.lu();
    if lu.is_invertible() {
        Some(lu)
    } else {
        None
    }
}

fn solve_saddle(
    k: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rhs_u: &DVector<f64>,
    rhs_y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = k.nrows();
    let q = a.nrows();
    let mut kr = k.clone();
    for i in 0..n {
        kr[(i, i)] += 1e-9;
    }
    let lu = saddle_lu(&kr, a)?;
    let mut rhs = DVector::zeros(n + q);
    rhs.rows_mut(0, n).copy_from(rhs_u);
    rhs.rows_mut(n, q).copy_from(rhs_y);
    let sol = lu.solve(&rhs)?;
    Some((sol.rows(0, n).into_owned(), sol.rows(n, q).into_owned()))
}

/// Direct KKT solve with iterative refinement; used when no inequality survives.
fn solve_equality_only(p: &Standard) -> (DVector<f64>, DVector<f64>) {
    let n = p.g.len();
    let q = p.a.nrows();
    let Some(lu) = saddle_lu(&p.h, &p.a) else {
        return (DVector::zeros(n), DVector::zeros(q));
    };
    let mut u = DVector::zeros(n);
    let mut y = DVector::zeros(q);
    for _ in 0..3 {
        let r_d = &p.h * &u + &p.g + p.a.tr_mul(&y);
        let r_p = &p.a * &u - &p.b;
        let mut rhs = DVector::zeros(n + q);
        rhs.rows_mut(0, n).copy_from(&(-r_d));
        rhs.rows_mut(n, q).copy_from(&(-r_p));
        let Some(d) = lu.solve(&rhs) else { break };
        u += d.rows(0, n);
        y += d.rows(n, q);
    }
    (u, y)
}
