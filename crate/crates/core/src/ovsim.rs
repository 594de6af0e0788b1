//! Simulated overtaken vehicle.
//!
//! A non-interactive driver replays a recorded speed profile. Interactive
//! drivers solve a short-horizon tracking QP while the ego is merging in
//! front of them and otherwise return to the profile.

use std::io::Read;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::OccupancyParams;
use crate::lateral::{follower_qp, headway_target, FollowerSpec};
use crate::qp::{condense_ov, QpSolver, QpStatus};
use crate::uncertainty::{headway_time, VarianceCurve};
use crate::vehicle::{Limits, SimParams, WorldState};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("speed profile is empty")]
    Empty,
    #[error("row {row}: expected two numeric columns")]
    Parse { row: usize },
    #[error("row {row}: time does not increase")]
    NonMonotone { row: usize },
    #[error("row {row}: negative speed")]
    NegativeSpeed { row: usize },
    #[error("invalid behaviour: {0}")]
    Behavior(String),
}

/// Piecewise-linear speed over time, held constant beyond both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    times: Vec<f64>,
    speeds: Vec<f64>,
}

impl SpeedProfile {
    /// Validates the samples and clamps speeds to `[0, max_speed]`.
    pub fn new(points: &[(f64, f64)], max_speed: f64) -> Result<Self, ProfileError> {
        if points.is_empty() {
            return Err(ProfileError::Empty);
        }
        for (row, w) in points.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(ProfileError::NonMonotone { row: row + 1 });
            }
        }
        if let Some(row) = points.iter().position(|p| !(p.1 >= 0.0) || !p.0.is_finite()) {
            return Err(ProfileError::NegativeSpeed { row });
        }
        Ok(Self {
            times: points.iter().map(|p| p.0).collect(),
            speeds: points.iter().map(|p| p.1.min(max_speed)).collect(),
        })
    }

    pub fn constant(speed: f64) -> Self {
        Self { times: vec![0.0], speeds: vec![speed.max(0.0)] }
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.speeds.iter().copied())
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|x| *x <= t);
        if i == 0 {
            return self.speeds[0];
        }
        if i == self.times.len() {
            return self.speeds[i - 1];
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let (v0, v1) = (self.speeds[i - 1], self.speeds[i]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Reads `time, speed` rows; a non-numeric first row is taken as a header.
    pub fn from_reader<R: Read>(reader: R, max_speed: f64) -> Result<Self, ProfileError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
        let mut points = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |i: usize| record.get(i).and_then(|s| s.parse::<f64>().ok());
            match (parse(0), parse(1), record.len()) {
                (Some(t), Some(v), 2) => points.push((t, v)),
                _ if row == 0 => continue,
                _ => return Err(ProfileError::Parse { row }),
            }
        }
        Self::new(&points, max_speed)
    }

    pub fn load(path: impl AsRef<Path>, max_speed: f64) -> Result<Self, ProfileError> {
        Self::from_reader(std::fs::File::open(path)?, max_speed)
    }
}

pub fn load_speed_profile(path: impl AsRef<Path>, max_speed: f64) -> Result<SpeedProfile, ProfileError> {
    SpeedProfile::load(path, max_speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OvMode {
    NonInteractive,
    Polite,
    Aggressive,
}

impl std::str::FromStr for OvMode {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "non_interactive" => Ok(Self::NonInteractive),
            "polite" => Ok(Self::Polite),
            "aggressive" => Ok(Self::Aggressive),
            other => Err(ProfileError::Behavior(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvBehavior {
    pub mode: OvMode,
    pub headway: f64,
    pub speed: f64,
    pub effort: f64,
    pub target_headway: f64,
    pub horizon: usize,
    /// Time constant of the return to the base profile, s.
    pub recovery: f64,
    /// Draw Gaussian noise with the variance curve on top of interactive responses.
    pub noise: bool,
}

impl OvBehavior {
    pub fn new(mode: OvMode) -> Self {
        let (headway, speed, effort) = match mode {
            OvMode::NonInteractive => (0.0, 1.0, 1.0),
            OvMode::Polite => (0.1, 0.05, 4.0),
            OvMode::Aggressive => (0.01, 1.0, 10.0),
        };
        Self { mode, headway, speed, effort, target_headway: 2.0, horizon: 20, recovery: 2.0, noise: false }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Behavior(m.into()));
        if [self.headway, self.speed, self.effort].iter().any(|w| !(*w >= 0.0)) || !(self.effort > 0.0) {
            return bad("weights must be nonnegative with positive effort");
        }
        if self.horizon == 0 || !(self.recovery > 0.0) {
            return bad("horizon and recovery time must be positive");
        }
        match self.mode {
            OvMode::Polite if self.headway <= self.speed => bad("polite drivers weight headway above speed"),
            OvMode::Aggressive if self.speed <= self.headway => bad("aggressive drivers weight speed above headway"),
            _ => Ok(()),
        }
    }

    /// Whether the driver reacts to the ego at gap `rel_x`.
    pub fn in_window(&self, occ: &OccupancyParams, rel_x: f64, ov_speed: f64) -> bool {
        self.mode != OvMode::NonInteractive
            && occ.span_end <= rel_x
            && rel_x <= headway_target(occ, ov_speed, self.target_headway)
    }
}

impl Default for OvBehavior {
    fn default() -> Self {
        Self::new(OvMode::Polite)
    }
}

/// Physical context shared with the controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct OvEnvironment {
    pub sim: SimParams,
    pub limits: Limits,
    pub occupancy: OccupancyParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvDecision {
    pub accel: f64,
    pub interacting: bool,
    /// The interactive QP failed and the profile law was used instead.
    pub fallback: bool,
}

fn profile_law(profile: &SpeedProfile, t: f64, ov_speed: f64, behavior: &OvBehavior, env: &OvEnvironment) -> f64 {
    let dt = env.sim.dt;
    let next = profile.speed_at(t + dt);
    let feed = (next - profile.speed_at(t)) / dt;
    let error = profile.speed_at(t) - ov_speed;
    let a =
        if behavior.mode == OvMode::NonInteractive { (next - ov_speed) / dt } else { feed + error / behavior.recovery };
    a.clamp(env.limits.accel_min, env.limits.accel_max)
}

/// Acceleration chosen by the simulated driver at time `t`.
pub fn ov_step(
    state: &WorldState,
    t: f64,
    behavior: &OvBehavior,
    profile: &SpeedProfile,
    env: &OvEnvironment,
    solver: &mut QpSolver,
) -> OvDecision {
    let lim = &env.limits;
    if !behavior.in_window(&env.occupancy, state.rel_x, state.ov_speed) {
        return OvDecision {
            accel: profile_law(profile, t, state.ov_speed, behavior, env),
            interacting: false,
            fallback: false,
        };
    }
    let reference_speed = match behavior.mode {
        OvMode::Aggressive => env.sim.ov_speed_max,
        _ => profile.speed_at(t),
    };
    let spec = FollowerSpec {
        weights: Matrix3::from_diagonal(&Vector3::new(behavior.headway, behavior.speed, behavior.effort)),
        reference: Vector3::new(
            headway_target(&env.occupancy, state.ov_speed, behavior.target_headway),
            reference_speed,
            0.0,
        ),
        lower: Vector2::new(env.sim.ov_speed_min, lim.accel_min),
        upper: Vector2::new(env.sim.ov_speed_max, lim.accel_max),
        headway_gate: true,
        target_headway: behavior.target_headway,
    };
    let n = behavior.horizon;
    let solved = condense_ov(Vector2::new(state.rel_x, state.ov_speed), &vec![state.speed; n], &env.sim, n)
        .ok()
        .and_then(|sys| solver.solve(&follower_qp(&spec, &sys), None).ok())
        .filter(|s| s.status == QpStatus::Optimal)
        .map(|s: crate::qp::QpSolution| s.u[0]);
    match solved {
        Some(a) if a.is_finite() => {
            OvDecision { accel: a.clamp(lim.accel_min, lim.accel_max), interacting: true, fallback: false }
        }
        _ => OvDecision {
            accel: profile_law(profile, t, state.ov_speed, behavior, env),
            interacting: true,
            fallback: true,
        },
    }
}

/// Stateful driver with its own solver workspace and seeded noise source.
#[derive(Debug, Clone)]
pub struct OvSimulator {
    pub behavior: OvBehavior,
    pub profile: SpeedProfile,
    pub env: OvEnvironment,
    curve: VarianceCurve,
    rng: ChaCha8Rng,
    solver: QpSolver,
}

impl OvSimulator {
    pub fn new(
        behavior: OvBehavior,
        profile: SpeedProfile,
        env: OvEnvironment,
        curve: VarianceCurve,
        seed: u64,
    ) -> Result<Self, ProfileError> {
        behavior.validate()?;
        Ok(Self { behavior, profile, env, curve, rng: ChaCha8Rng::seed_from_u64(seed), solver: QpSolver::default() })
    }

    pub fn step(&mut self, t: f64, state: &WorldState) -> OvDecision {
        let mut d = ov_step(state, t, &self.behavior, &self.profile, &self.env, &mut self.solver);
        if self.behavior.noise && d.interacting {
            let var = self.curve.lookup(headway_time(state.rel_x, state.ov_speed));
            if let Ok(normal) = Normal::new(0.0, var.sqrt()) {
                d.accel = (d.accel + normal.sample(&mut self.rng))
                    .clamp(self.env.limits.accel_min, self.env.limits.accel_max);
            }
        }
        d
    }
}

/// Brute-force minimiser of the driver's QP over a grid, for short horizons.
#[doc(hidden)]
pub fn grid_response(
    state: &WorldState,
    t: f64,
    behavior: &OvBehavior,
    profile: &SpeedProfile,
    env: &OvEnvironment,
    step: f64,
) -> Option<Vec<f64>> {
    let n = behavior.horizon;
    let lim = &env.limits;
    let count = ((lim.accel_max - lim.accel_min) / step).floor() as usize;
    let grid: Vec<f64> = (0..=count).map(|i| lim.accel_min + i as f64 * step).collect();
    let target = headway_target(&env.occupancy, state.ov_speed, behavior.target_headway);
    let vref = match behavior.mode {
        OvMode::Aggressive => env.sim.ov_speed_max,
        _ => profile.speed_at(t),
    };
    let dt = env.sim.dt;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx = vec![0usize; n];
    loop {
        let u: Vec<f64> = idx.iter().map(|i| grid[*i]).collect();
        let (mut x, mut v) = (state.rel_x, state.ov_speed);
        let mut cost = 0.0;
        let mut ok = true;
        for k in 0..=n {
            let a = if k < n { u[k] } else { 0.0 };
            cost +=
                behavior.headway * (x - target).powi(2) + behavior.speed * (v - vref).powi(2) + behavior.effort * a * a;
            ok &= v >= env.sim.ov_speed_min - 1e-12 && v <= env.sim.ov_speed_max + 1e-12;
            x += dt * (state.speed - v);
            v += dt * a;
        }
        if ok && best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, u));
        }
        let mut j = 0;
        while j < n {
            idx[j] += 1;
            if idx[j] < grid.len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
        if j == n {
            break;
        }
    }
    best.map(|b| b.1)
}
