use nalgebra::{DMatrix, DVector, Vector2};

use super::QpError;
use crate::vehicle::{ov_model, LtvLateralModel, SimParams};

/// Per-step output `y_k = state · x_k + input · u_k`, with `u_N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub state: DMatrix<f64>,
    pub input: DVector<f64>,
}

impl OutputMap {
    pub fn new(state: DMatrix<f64>, input: DVector<f64>) -> Self {
        assert_eq!(state.nrows(), input.len());
        Self { state, input }
    }

    pub fn outputs(&self) -> usize {
        self.input.len()
    }
}

/// Stacked prediction operators over a horizon of `N` steps.
///
/// States are stacked as `[x_0; …; x_N]`, outputs as `[y_0; …; y_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedSystem {
    pub horizon: usize,
    pub nx: usize,
    pub x0: DVector<f64>,
    /// Exogenous input sequence, one scalar per step.
    pub exo: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub cf: DMatrix<f64>,
    pub df: DMatrix<f64>,
    pub ef: DMatrix<f64>,
    pub cz: DMatrix<f64>,
    pub dz: DMatrix<f64>,
    pub ez: DMatrix<f64>,
}

impl CondensedSystem {
    pub fn states(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * &self.x0 + &self.b * u + &self.e * &self.exo
    }

    pub fn constraint_outputs(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.cf * &self.x0 + &self.df * u + &self.ef * &self.exo
    }

    pub fn cost_outputs(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.cz * &self.x0 + &self.dz * u + &self.ez * &self.exo
    }

    /// Constant part of the constraint outputs (zero input).
    pub fn constraint_free(&self) -> DVector<f64> {
        &self.cf * &self.x0 + &self.ef * &self.exo
    }

    pub fn cost_free(&self) -> DVector<f64> {
        &self.cz * &self.x0 + &self.ez * &self.exo
    }

    /// Row of the stacked state vector holding component `i` of `x_k`.
    pub fn state_row(&self, k: usize, i: usize) -> usize {
        k * self.nx + i
    }
}

/// One step of a linear system `x⁺ = a x + b u + e w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DVector<f64>,
}

/// Stacks a time-varying single-input system.
pub fn condense(
    steps: &[Step],
    x0: DVector<f64>,
    exo: DVector<f64>,
    f_map: &OutputMap,
    z_map: &OutputMap,
) -> Result<CondensedSystem, QpError> {
    let n = steps.len();
    let nx = x0.len();
    if exo.len() != n {
        return Err(QpError::Dimension(format!("exogenous sequence has {} entries, need {n}", exo.len())));
    }
    if f_map.state.ncols() != nx || z_map.state.ncols() != nx {
        return Err(QpError::Dimension("output map width differs from state size".into()));
    }
    let mut a = DMatrix::zeros(nx * (n + 1), nx);
    let mut b = DMatrix::zeros(nx * (n + 1), n);
    let mut e = DMatrix::zeros(nx * (n + 1), n);
    a.view_mut((0, 0), (nx, nx)).fill_with_identity();
    for (k, st) in steps.iter().enumerate() {
        if st.a.shape() != (nx, nx) || st.b.len() != nx || st.e.len() != nx {
            return Err(QpError::Dimension(format!("step {k} matrices do not match state size {nx}")));
        }
        let next_a = &st.a * a.rows(k * nx, nx);
        let mut next_b = &st.a * b.rows(k * nx, nx);
        let mut next_e = &st.a * e.rows(k * nx, nx);
        next_b.column_mut(k).copy_from(&st.b);
        next_e.column_mut(k).copy_from(&st.e);
        a.rows_mut((k + 1) * nx, nx).copy_from(&next_a);
        b.rows_mut((k + 1) * nx, nx).copy_from(&next_b);
        e.rows_mut((k + 1) * nx, nx).copy_from(&next_e);
    }
    let stack = |map: &OutputMap| {
        let p = map.outputs();
        let mut c = DMatrix::zeros(p * (n + 1), nx);
        let mut d = DMatrix::zeros(p * (n + 1), n);
        let mut f = DMatrix::zeros(p * (n + 1), n);
        for k in 0..=n {
            c.rows_mut(k * p, p).copy_from(&(&map.state * a.rows(k * nx, nx)));
            let mut dk = &map.state * b.rows(k * nx, nx);
            if k < n {
                dk.column_mut(k).axpy(1.0, &map.input, 1.0);
            }
            d.rows_mut(k * p, p).copy_from(&dk);
            f.rows_mut(k * p, p).copy_from(&(&map.state * e.rows(k * nx, nx)));
        }
        (c, d, f)
    };
    let (cf, df, ef) = stack(f_map);
    let (cz, dz, ez) = stack(z_map);
    Ok(CondensedSystem { horizon: n, nx, x0, exo, a, b, e, cf, df, ef, cz, dz, ez })
}

/// Lateral model: state `[rel_y, heading]`, input steering; both output
/// stacks are `[rel_y, heading, steer]` per step.
pub fn condense_lateral(x0: Vector2<f64>, ltv: &LtvLateralModel, horizon: usize) -> Result<CondensedSystem, QpError> {
    if ltv.horizon() < horizon {
        return Err(QpError::Dimension(format!("model covers {} steps, need {horizon}", ltv.horizon())));
    }
    let steps: Vec<Step> = (0..horizon)
        .map(|k| Step {
            a: DMatrix::from_column_slice(2, 2, ltv.a[k].as_slice()),
            b: DVector::from_column_slice(ltv.b[k].as_slice()),
            e: DVector::zeros(2),
        })
        .collect();
    let map = OutputMap::new(
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
    );
    condense(&steps, DVector::from_column_slice(x0.as_slice()), DVector::zeros(horizon), &map, &map)
}

/// Overtaken-vehicle model: state `[rel_x, ov_speed]`, input `ov_accel`,
/// exogenous ego speed. Constraint outputs `[ov_speed, ov_accel]`, cost
/// outputs `[rel_x, ov_speed, ov_accel]`.
pub fn condense_ov(
    x0: Vector2<f64>,
    ego_speeds: &[f64],
    params: &SimParams,
    horizon: usize,
) -> Result<CondensedSystem, QpError> {
    if ego_speeds.len() < horizon {
        return Err(QpError::Dimension(format!("ego speed sequence has {} entries, need {horizon}", ego_speeds.len())));
    }
    let (a, b, e) = ov_model(params).map_err(|err| QpError::Dimension(err.to_string()))?;
    let step = Step {
        a: DMatrix::from_column_slice(2, 2, a.as_slice()),
        b: DVector::from_column_slice(b.as_slice()),
        e: DVector::from_column_slice(e.as_slice()),
    };
    let steps = vec![step; horizon];
    let f_map = OutputMap::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), DVector::from_vec(vec![0.0, 1.0]));
    let z_map = OutputMap::new(
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
    );
    condense(
        &steps,
        DVector::from_column_slice(x0.as_slice()),
        DVector::from_column_slice(&ego_speeds[..horizon]),
        &f_map,
        &z_map,
    )
}
