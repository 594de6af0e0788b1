//! Dense convex quadratic programs and the stacked prediction operators.
//!
//! Problems have the form
//!
//! ```text
//! minimise   ½ uᵀ H u + gᵀ u + offset
//! subject to lb ≤ A u ≤ ub,   A_eq u = b_eq
//! ```
//!
//! and are solved by a primal-dual interior-point method ([`QpSolver`]).

mod condense;
mod ipm;

pub use condense::{condense, condense_lateral, condense_ov, CondensedSystem, OutputMap, Step};
pub use ipm::{QpOptions, QpSolver};

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data in {0}")]
    NonFinite(&'static str),
    #[error("cost matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotConvex(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Constant added to the objective value; does not affect the minimiser.
    pub offset: f64,
}

impl DenseQp {
    /// Unconstrained problem with `n` variables.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_ineq: DMatrix::zeros(0, n),
            lb: DVector::zeros(0),
            ub: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            offset: 0.0,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.lb = lb;
        self.ub = ub;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    /// Appends two-sided rows `lb ≤ a·u ≤ ub`.
    pub fn push_inequalities(&mut self, a: &DMatrix<f64>, lb: &DVector<f64>, ub: &DVector<f64>) {
        self.a_ineq = vstack(&self.a_ineq, a);
        self.lb = vcat(&self.lb, lb);
        self.ub = vcat(&self.ub, ub);
    }

    pub fn push_equalities(&mut self, a: &DMatrix<f64>, b: &DVector<f64>) {
        self.a_eq = vstack(&self.a_eq, a);
        self.b_eq = vcat(&self.b_eq, b);
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.g.dot(u) + self.offset
    }

    /// Largest violation of any constraint at `u`.
    pub fn primal_violation(&self, u: &DVector<f64>) -> f64 {
        let au = &self.a_ineq * u;
        let ineq = au
            .iter()
            .zip(self.lb.iter().zip(self.ub.iter()))
            .map(|(&v, (&l, &h))| f64::max(l - v, v - h).max(0.0))
            .fold(0.0, f64::max);
        let eq = (&self.a_eq * u - &self.b_eq).amax();
        ineq.max(eq)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_vars();
        let m = self.a_ineq.nrows();
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(QpError::Dimension(what.to_string()))
            }
        };
        check(self.h.nrows() == n && self.h.ncols() == n, "H must be n×n")?;
        check(self.a_ineq.ncols() == n, "A_ineq must have n columns")?;
        check(self.lb.len() == m && self.ub.len() == m, "bounds must match A_ineq rows")?;
        check(self.a_eq.ncols() == n, "A_eq must have n columns")?;
        check(self.b_eq.len() == self.a_eq.nrows(), "b_eq must match A_eq rows")?;
        if self.h.iter().chain(self.g.iter()).any(|x| !x.is_finite()) {
            return Err(QpError::NonFinite("cost"));
        }
        if self.a_ineq.iter().chain(self.a_eq.iter()).chain(self.b_eq.iter()).any(|x| !x.is_finite()) {
            return Err(QpError::NonFinite("constraints"));
        }
        if self.lb.iter().chain(self.ub.iter()).any(|x| x.is_nan()) {
            return Err(QpError::NonFinite("bounds"));
        }
        Ok(())
    }

    /// Writes every block as a dense matrix-market array, one after another.
    pub fn write_matrix_market(&self, path: impl AsRef<Path>) -> Result<(), QpError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let blocks: [(&str, DMatrix<f64>); 8] = [
            ("H", self.h.clone()),
            ("g", DMatrix::from_column_slice(self.g.len(), 1, self.g.as_slice())),
            ("A_ineq", self.a_ineq.clone()),
            ("lb", DMatrix::from_column_slice(self.lb.len(), 1, self.lb.as_slice())),
            ("ub", DMatrix::from_column_slice(self.ub.len(), 1, self.ub.as_slice())),
            ("A_eq", self.a_eq.clone()),
            ("b_eq", DMatrix::from_column_slice(self.b_eq.len(), 1, self.b_eq.as_slice())),
            ("offset", DMatrix::from_element(1, 1, self.offset)),
        ];
        for (name, m) in blocks {
            writeln!(f, "%%MatrixMarket matrix array real general")?;
            writeln!(f, "% block {name}")?;
            writeln!(f, "{} {}", m.nrows(), m.ncols())?;
            for j in 0..m.ncols() {
                for i in 0..m.nrows() {
                    writeln!(f, "{:.17e}", m[(i, j)])?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Multipliers of the lower sides of `A_ineq` rows.
    pub lambda_lower: DVector<f64>,
    /// Multipliers of the upper sides of `A_ineq` rows.
    pub lambda_upper: DVector<f64>,
    pub nu: DVector<f64>,
    pub status: QpStatus,
    /// Max of stationarity, complementarity and primal violation.
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Primal/dual starting point for [`QpSolver::solve`].
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub u: Option<DVector<f64>>,
}

/// Solves with default options.
pub fn solve_qp(qp: &DenseQp, warm: Option<&WarmStart>) -> Result<QpSolution, QpError> {
    QpSolver::default().solve(qp, warm)
}

/// Re-solves `qp` with the sides that `sol` treats as active turned into
/// equalities. Returns the exact vertex solution when it is primal and dual
/// feasible, `None` otherwise.
pub fn refine_active_set(qp: &DenseQp, sol: &QpSolution, solver: &mut QpSolver) -> Result<Option<QpSolution>, QpError> {
    let n = qp.num_vars();
    let au = &qp.a_ineq * &sol.u;
    let mut rows: Vec<(usize, Side)> = Vec::new();
    for i in 0..qp.a_ineq.nrows() {
        let lower_gap = au[i] - qp.lb[i];
        let upper_gap = qp.ub[i] - au[i];
        if qp.lb[i] == qp.ub[i] {
            rows.push((i, Side::Both));
        } else if qp.lb[i].is_finite() && sol.lambda_lower[i] > lower_gap {
            rows.push((i, Side::Lower));
        } else if qp.ub[i].is_finite() && sol.lambda_upper[i] > upper_gap {
            rows.push((i, Side::Upper));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), n);
    let mut b = DVector::zeros(rows.len());
    for (k, &(i, side)) in rows.iter().enumerate() {
        a.row_mut(k).copy_from(&qp.a_ineq.row(i));
        b[k] = if side == Side::Upper { qp.ub[i] } else { qp.lb[i] };
    }
    let mut eq = DenseQp::new(qp.h.clone(), qp.g.clone());
    eq.offset = qp.offset;
    eq.push_equalities(&qp.a_eq, &qp.b_eq);
    eq.push_equalities(&a, &b);
    let r = solver.solve(&eq, None)?;
    if r.status == QpStatus::Infeasible {
        return Ok(None);
    }
    let q = qp.a_eq.nrows();
    let mut out = QpSolution {
        u: r.u.clone(),
        lambda_lower: DVector::zeros(qp.a_ineq.nrows()),
        lambda_upper: DVector::zeros(qp.a_ineq.nrows()),
        nu: r.nu.rows(0, q).into_owned(),
        status: QpStatus::Optimal,
        kkt_residual: 0.0,
        objective: qp.objective(&r.u),
        iterations: r.iterations,
    };
    let scale = 1.0 + sol.lambda_lower.amax().max(sol.lambda_upper.amax());
    for (k, &(i, side)) in rows.iter().enumerate() {
        let mult = r.nu[q + k];
        let (value, slot) = match side {
            Side::Both if mult < 0.0 => (-mult, &mut out.lambda_lower[i]),
            Side::Both | Side::Upper => (mult, &mut out.lambda_upper[i]),
            Side::Lower => (-mult, &mut out.lambda_lower[i]),
        };
        if value < -1e-8 * scale {
            return Ok(None);
        }
        *slot = value.max(0.0);
    }
    let violation = qp.primal_violation(&out.u);
    if violation > 1e-9 * (1.0 + au.amax()) {
        return Ok(None);
    }
    let stat =
        (&qp.h * &out.u + &qp.g + qp.a_ineq.tr_mul(&(&out.lambda_upper - &out.lambda_lower)) + qp.a_eq.tr_mul(&out.nu))
            .amax();
    out.kkt_residual = stat.max(violation);
    Ok(Some(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Lower,
    Upper,
    /// Rows with equal bounds, held as equalities regardless of the multiplier.
    Both,
}

pub(crate) fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

pub(crate) fn vcat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_upper_bound() {
        let qp = DenseQp::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -4.0)).with_inequalities(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, 1.0),
        );
        let s = solve_qp(&qp, None).unwrap();
        assert!(s.is_optimal());
        assert_abs_diff_eq!(s.u[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(s.lambda_upper[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.lambda_lower[0], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn unconstrained_minimum() {
        let qp = DenseQp::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3));
        let s = solve_qp(&qp, None).unwrap();
        assert!(s.is_optimal());
        assert!(s.u.amax() < 1e-12);
    }

    #[test]
    fn crossed_bounds_are_infeasible() {
        let qp = DenseQp::new(DMatrix::identity(2, 2), DVector::zeros(2)).with_inequalities(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![0.0, 2.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert_eq!(solve_qp(&qp, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_indefinite_cost() {
        let qp = DenseQp::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0])), DVector::zeros(2));
        assert!(matches!(solve_qp(&qp, None), Err(QpError::NotConvex(_))));
    }

    #[test]
    fn matrix_market_dump_round_trips_sizes() {
        let qp = DenseQp::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qp.mtx");
        qp.write_matrix_market(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("%%MatrixMarket").count(), 8);
        assert!(text.contains("% block H\n2 2\n"));
    }
}
