//! Kinematic plant and the linear prediction models derived from it.
//!
//! All positions are expressed in a frame that moves with the overtaken
//! vehicle: `rel_x` is how far the ego centre is ahead of the overtaken
//! vehicle's centre and `rel_y` is the lateral offset from the initial lane
//! centreline.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("sampling interval must be positive, got {0}")]
    BadStep(f64),
    #[error("heading {0} rad left the admissible range")]
    HeadingOutOfRange(f64),
    #[error("speed sequence has {got} entries, horizon needs {need}")]
    ShortSequence { got: usize, need: usize },
}

/// Coupled ego/overtaken kinematic state in the moving frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    /// Longitudinal offset of the ego centre ahead of the overtaken centre, m.
    pub rel_x: f64,
    /// Lateral offset of the ego centre from the initial lane centre, m.
    pub rel_y: f64,
    /// Ego heading relative to the road axis, rad.
    pub heading: f64,
    /// Ego forward speed, m/s.
    pub speed: f64,
    /// Overtaken-vehicle forward speed, m/s.
    pub ov_speed: f64,
}

impl WorldState {
    pub fn is_finite(&self) -> bool {
        [self.rel_x, self.rel_y, self.heading, self.speed, self.ov_speed].iter().all(|x| x.is_finite())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.rel_x, self.rel_y, self.heading, self.speed, self.ov_speed]
    }
}

/// Ego actuator command.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Longitudinal acceleration, m/s².
    pub accel: f64,
    /// Front-wheel steering angle, rad.
    pub steer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Sampling interval, s.
    pub dt: f64,
    /// Wheelbase, m.
    pub wheelbase: f64,
    /// Total simulated time, s.
    pub total_time: f64,
    /// Gravitational acceleration, m/s². Carried for completeness; no model uses it.
    pub gravity: f64,
    pub ov_speed_min: f64,
    pub ov_speed_max: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { dt: 0.1, wheelbase: 2.5, total_time: 50.0, gravity: 9.81, ov_speed_min: 0.0, ov_speed_max: 17.88 }
    }
}

impl SimParams {
    /// Number of closed-loop iterations.
    pub fn iterations(&self) -> usize {
        (self.total_time / self.dt).round() as usize
    }

    fn check_dt(&self) -> Result<(), ModelError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(ModelError::BadStep(self.dt));
        }
        Ok(())
    }
}

/// Actuator and speed limits shared by both controllers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    /// m/s², applies to both vehicles.
    pub accel_min: f64,
    pub accel_max: f64,
    pub max_steer_deg: f64,
    pub ego_speed_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self { accel_min: -6.5, accel_max: 2.33, max_steer_deg: 5.0, ego_speed_max: 19.67 }
    }
}

impl Limits {
    pub fn max_steer(&self) -> f64 {
        self.max_steer_deg.to_radians()
    }

    pub fn saturate(&self, input: &ControlInput) -> (ControlInput, bool) {
        let accel = input.accel.clamp(self.accel_min, self.accel_max);
        let steer = input.steer.clamp(-self.max_steer(), self.max_steer());
        (ControlInput { accel, steer }, accel != input.accel || steer != input.steer)
    }
}

/// Advances the nonlinear plant by one sampling interval.
pub fn step_plant(
    state: &WorldState,
    input: &ControlInput,
    ov_accel: f64,
    params: &SimParams,
) -> Result<WorldState, ModelError> {
    params.check_dt()?;
    if !state.is_finite() {
        return Err(ModelError::NonFinite("state"));
    }
    if !input.accel.is_finite() || !input.steer.is_finite() {
        return Err(ModelError::NonFinite("input"));
    }
    if !ov_accel.is_finite() {
        return Err(ModelError::NonFinite("ov_accel"));
    }
    let dt = params.dt;
    let s = state;
    let next = WorldState {
        rel_x: s.rel_x + (s.speed * s.heading.cos() - s.ov_speed) * dt,
        rel_y: s.rel_y + s.speed * s.heading.sin() * dt,
        heading: s.heading + s.speed * input.steer.tan() / params.wheelbase * dt,
        speed: (s.speed + input.accel * dt).max(0.0),
        ov_speed: (s.ov_speed + ov_accel * dt).clamp(params.ov_speed_min, params.ov_speed_max),
    };
    if next.heading.abs() > std::f64::consts::FRAC_PI_2 {
        return Err(ModelError::HeadingOutOfRange(next.heading));
    }
    Ok(next)
}

/// Small-angle, speed-scheduled lateral model: one `(A, B)` pair per step.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvLateralModel {
    pub a: Vec<Matrix2<f64>>,
    pub b: Vec<Vector2<f64>>,
}

impl LtvLateralModel {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    /// Propagates `[rel_y, heading]` through the model.
    pub fn simulate(&self, x0: Vector2<f64>, steer: &[f64]) -> Vec<Vector2<f64>> {
        let mut out = Vec::with_capacity(steer.len() + 1);
        out.push(x0);
        let mut x = x0;
        for (k, &u) in steer.iter().enumerate() {
            x = self.a[k] * x + self.b[k] * u;
            out.push(x);
        }
        out
    }
}

/// Builds the lateral model scheduled on an exogenous ego speed sequence.
pub fn lateral_ltv(speeds: &[f64], params: &SimParams, horizon: usize) -> Result<LtvLateralModel, ModelError> {
    params.check_dt()?;
    if speeds.len() < horizon {
        return Err(ModelError::ShortSequence { got: speeds.len(), need: horizon });
    }
    let dt = params.dt;
    let (a, b) = speeds[..horizon]
        .iter()
        .map(|&v| (Matrix2::new(1.0, v * dt, 0.0, 1.0), Vector2::new(0.0, v * dt / params.wheelbase)))
        .unzip();
    Ok(LtvLateralModel { a, b })
}

/// Overtaken-vehicle model over `[rel_x, ov_speed]` with input `ov_accel`
/// and exogenous ego speed. Returns `(A, B, E)`.
pub fn ov_model(params: &SimParams) -> Result<(Matrix2<f64>, Vector2<f64>, Vector2<f64>), ModelError> {
    params.check_dt()?;
    let dt = params.dt;
    Ok((Matrix2::new(1.0, -dt, 0.0, 1.0), Vector2::new(0.0, dt), Vector2::new(dt, 0.0)))
}

/// Longitudinal model over `[rel_x, speed, ov_speed]` with input `accel`
/// and disturbance `ov_accel`. Returns `(A, B, E)`.
pub fn longitudinal_model(params: &SimParams) -> Result<(Matrix3<f64>, Vector3<f64>, Vector3<f64>), ModelError> {
    params.check_dt()?;
    let dt = params.dt;
    Ok((
        Matrix3::new(1.0, dt, -dt, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        Vector3::new(0.0, dt, 0.0),
        Vector3::new(0.0, 0.0, dt),
    ))
}

/// One step of the small-angle model with both speeds as states.
pub fn step_linearized(state: &WorldState, input: &ControlInput, ov_accel: f64, dt: f64, wheelbase: f64) -> WorldState {
    let s = state;
    WorldState {
        rel_x: s.rel_x + (s.speed - s.ov_speed) * dt,
        rel_y: s.rel_y + s.speed * s.heading * dt,
        heading: s.heading + s.speed * input.steer / wheelbase * dt,
        speed: s.speed + input.accel * dt,
        ov_speed: s.ov_speed + ov_accel * dt,
    }
}

/// Largest absolute divergence per state between the nonlinear and the
/// small-angle rollouts, ordered as [`WorldState::as_array`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationReport {
    pub max_abs: [f64; 5],
}

/// Rolls both models forward from the same state under the same inputs.
pub fn linearization_report(
    state: &WorldState,
    inputs: &[ControlInput],
    params: &SimParams,
    horizon: usize,
) -> Result<LinearizationReport, ModelError> {
    params.check_dt()?;
    if inputs.len() < horizon {
        return Err(ModelError::ShortSequence { got: inputs.len(), need: horizon });
    }
    // Speeds are not clamped in the comparison so both rollouts see the same input.
    let free = SimParams { ov_speed_min: f64::NEG_INFINITY, ov_speed_max: f64::INFINITY, ..*params };
    let mut nl = *state;
    let mut lin = *state;
    let mut max_abs = [0.0; 5];
    for u in &inputs[..horizon] {
        nl = step_plant(&nl, u, 0.0, &free)?;
        lin = step_linearized(&lin, u, 0.0, params.dt, params.wheelbase);
        for (m, (a, b)) in max_abs.iter_mut().zip(nl.as_array().iter().zip(lin.as_array())) {
            *m = f64::max(*m, (a - b).abs());
        }
    }
    Ok(LinearizationReport { max_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn st(rel_x: f64, rel_y: f64, heading: f64, speed: f64, ov_speed: f64) -> WorldState {
        WorldState { rel_x, rel_y, heading, speed, ov_speed }
    }

    #[test]
    fn plant_gap_grows_with_relative_speed() {
        let p = SimParams { ov_speed_max: 40.0, ..Default::default() };
        let next = step_plant(&st(-40.0, 0.0, 0.0, 10.0, 8.0), &ControlInput::default(), 0.0, &p).unwrap();
        assert_abs_diff_eq!(next.rel_x, -39.8, epsilon = 1e-12);
        assert_eq!(next.rel_y, 0.0);
        assert_eq!(next.heading, 0.0);
        assert_eq!(next.speed, 10.0);
        assert_eq!(next.ov_speed, 8.0);
    }

    #[test]
    fn plant_heading_increment() {
        let p = SimParams { ov_speed_max: 40.0, ..Default::default() };
        let input = ControlInput { accel: 0.0, steer: 0.05 };
        let next = step_plant(&st(0.0, 0.0, 0.0, 10.0, 10.0), &input, 0.0, &p).unwrap();
        let expected = 10.0 * 0.05f64.tan() / 2.5 * 0.1;
        assert_abs_diff_eq!(next.heading, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(next.heading, 0.020017, epsilon = 5e-7);
    }

    #[test]
    fn plant_rejects_bad_input() {
        let p = SimParams::default();
        let s = st(0.0, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(
            step_plant(&s, &ControlInput::default(), 0.0, &SimParams { dt: 0.0, ..p }),
            Err(ModelError::BadStep(0.0))
        );
        let bad = st(f64::NAN, 0.0, 0.0, 1.0, 1.0);
        assert!(step_plant(&bad, &ControlInput::default(), 0.0, &p).is_err());
        let turning = st(0.0, 0.0, 1.55, 30.0, 10.0);
        let hard = ControlInput { accel: 0.0, steer: 0.5 };
        assert!(matches!(step_plant(&turning, &hard, 0.0, &p), Err(ModelError::HeadingOutOfRange(_))));
    }

    #[test]
    fn plant_clamps_ov_speed() {
        let p = SimParams::default();
        let s = st(0.0, 0.0, 0.0, 10.0, 17.8);
        let next = step_plant(&s, &ControlInput::default(), 2.0, &p).unwrap();
        assert_eq!(next.ov_speed, 17.88);
    }

    #[test]
    fn ltv_matrices() {
        let p = SimParams::default();
        let m = lateral_ltv(&[15.0, 0.0], &p, 2).unwrap();
        assert_abs_diff_eq!(m.a[0], Matrix2::new(1.0, 1.5, 0.0, 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(m.b[0], Vector2::new(0.0, 0.6), epsilon = 1e-12);
        assert_eq!(m.b[1], Vector2::zeros());
        let c = lateral_ltv(&[12.0; 5], &p, 5).unwrap();
        assert!(c.a.windows(2).all(|w| w[0] == w[1]));
        assert!(c.b.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(lateral_ltv(&[1.0], &p, 3), Err(ModelError::ShortSequence { got: 1, need: 3 }));
    }

    #[test]
    fn ov_and_longitudinal_matrices() {
        let p = SimParams::default();
        let (a, b, e) = ov_model(&p).unwrap();
        assert_eq!(a, Matrix2::new(1.0, -0.1, 0.0, 1.0));
        assert_eq!(b, Vector2::new(0.0, 0.1));
        assert_eq!(e, Vector2::new(0.1, 0.0));
        let (a2, _, _) = ov_model(&SimParams { dt: 0.2, ..p }).unwrap();
        assert_eq!((a2[(0, 1)], a2[(1, 0)]), (-0.2, 0.0));
        let (tiny, _, _) = ov_model(&SimParams { dt: 1e-12, ..p }).unwrap();
        assert_abs_diff_eq!(tiny, Matrix2::identity(), epsilon = 1e-11);

        let (ax, bx, ex) = longitudinal_model(&p).unwrap();
        assert_eq!(ax.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.1, -0.1]);
        assert_eq!(bx, Vector3::new(0.0, 0.1, 0.0));
        assert_eq!(ex, Vector3::new(0.0, 0.0, 0.1));
        let (ah, bh, eh) = longitudinal_model(&SimParams { dt: 0.05, ..p }).unwrap();
        assert_eq!(ah[(0, 1)], 0.05);
        assert_eq!(ah[(0, 2)], -0.05);
        assert_eq!(bh[1], 0.05);
        assert_eq!(eh[2], 0.05);
    }

    #[test]
    fn linearization_exact_at_zero_angles() {
        let p = SimParams::default();
        let inputs = vec![ControlInput { accel: 1.0, steer: 0.0 }; 20];
        let r = linearization_report(&st(-10.0, 0.3, 0.0, 15.0, 14.0), &inputs, &p, 20).unwrap();
        assert_eq!(r.max_abs[1], 0.0);
        assert_eq!(r.max_abs[2], 0.0);
        assert_eq!(r.max_abs[3], 0.0);
        assert_eq!(r.max_abs[0], 0.0);
    }

    #[test]
    fn linearization_steady_steer_matches_dual_rollout() {
        // Independent oracle: explicit loops over both update laws.
        let p = SimParams::default();
        let d = 5f64.to_radians();
        let (mut y1, mut h1, mut y2, mut h2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut worst_y: f64 = 0.0;
        for _ in 0..20 {
            y1 += 17.0 * h1.sin() * 0.1;
            h1 += 17.0 * d.tan() / 2.5 * 0.1;
            y2 += 17.0 * h2 * 0.1;
            h2 += 17.0 * d / 2.5 * 0.1;
            worst_y = worst_y.max((y1 - y2).abs());
        }
        let inputs = vec![ControlInput { accel: 0.0, steer: d }; 20];
        let r = linearization_report(&st(0.0, 0.0, 0.0, 17.0, 17.0), &inputs, &p, 20).unwrap();
        assert!(r.max_abs[1] > 0.0 && r.max_abs[1].is_finite());
        assert_abs_diff_eq!(r.max_abs[1], worst_y, epsilon = 1e-12);
    }

    #[test]
    fn ltv_simulation_matches_recursion() {
        let p = SimParams::default();
        let speeds: Vec<f64> = (0..10).map(|k| 15.0 + 0.3 * k as f64).collect();
        let m = lateral_ltv(&speeds, &p, 10).unwrap();
        let steer: Vec<f64> = (0..10).map(|k| 0.01 * (k as f64).sin()).collect();
        let xs = m.simulate(Vector2::new(0.2, 0.01), &steer);
        let (mut y, mut h) = (0.2, 0.01);
        for k in 0..10 {
            let ny = y + speeds[k] * 0.1 * h;
            let nh = h + speeds[k] * 0.1 / 2.5 * steer[k];
            y = ny;
            h = nh;
            assert_abs_diff_eq!(xs[k + 1][0], y, epsilon = 1e-14);
            assert_abs_diff_eq!(xs[k + 1][1], h, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn equal_speeds_fix_gap(
            x in -100.0..100.0f64, y in -2.0..5.0f64, v in 0.0..30.0f64,
        ) {
            let p = SimParams { ov_speed_max: 40.0, ..Default::default() };
            let s = st(x, y, 0.0, v, v);
            let n = step_plant(&s, &ControlInput::default(), 0.0, &p).unwrap();
            prop_assert_eq!(n.rel_x, x);
        }

        #[test]
        fn one_step_lateral_error_small(
            psi in -5.0..5.0f64, delta in -5.0..5.0f64, v in 0.0..20.0f64,
        ) {
            let p = SimParams::default();
            let s = st(0.0, 0.0, psi.to_radians(), v, v);
            let u = [ControlInput { accel: 0.0, steer: delta.to_radians() }];
            let r = linearization_report(&s, &u, &p, 1).unwrap();
            prop_assert!(r.max_abs[1] <= 5e-4);
        }
    }
}
