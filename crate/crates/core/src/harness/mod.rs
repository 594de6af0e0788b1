//! Closed-loop simulation, metrics and experiment plumbing.

mod metrics;
mod run;
mod sweep;
mod trace;
mod validate;

pub use metrics::{compute_metrics, cut_in_window, Metrics};
pub use run::{run_closed_loop, Simulation};
pub use sweep::{pareto_sweep, SweepGrid, SweepPoint, WeightOverride};
pub use trace::{RunSummary, TraceLog, TraceRecord, TRACE_COLUMNS};
pub use validate::{validate_trace, Check, ValidationReport};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, OccupancyParams, VehicleGeometry};
use crate::lateral::{FollowerWeights, LateralConfig, LeaderWeights, MpecError, MpecOptions};
use crate::longitudinal::{LongitudinalConfig, LongitudinalError, LongitudinalWeights, Risk};
use crate::ovsim::{OvBehavior, OvEnvironment, OvMode, ProfileError, SpeedProfile};
use crate::uncertainty::{UncertaintyError, VarianceCurve};
use crate::vehicle::{Limits, ModelError, SimParams, WorldState};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("trace row {row}: {msg}")]
    TraceFormat { row: usize, msg: String },
    #[error("trace holds no records")]
    EmptyTrace,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mpec(#[from] MpecError),
    #[error(transparent)]
    Longitudinal(#[from] LongitudinalError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
}

/// Overtaken-vehicle block of a scenario. Unset weights take the mode's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OvConfig {
    pub mode: OvMode,
    pub headway: Option<f64>,
    pub speed: Option<f64>,
    pub effort: Option<f64>,
    pub target_headway: Option<f64>,
    pub recovery: Option<f64>,
    pub noise: bool,
    /// CSV file replacing `profile`, relative to the scenario file.
    pub profile_file: Option<PathBuf>,
    /// `(time, speed)` samples of the base profile.
    pub profile: Vec<(f64, f64)>,
}

impl Default for OvConfig {
    fn default() -> Self {
        Self {
            mode: OvMode::Polite,
            headway: None,
            speed: None,
            effort: None,
            target_headway: None,
            recovery: None,
            noise: false,
            profile: default_profile(),
            profile_file: None,
        }
    }
}

/// Base speed profile of the canonical scenarios: cruising near 16 m/s, then
/// speeding up to the limit in the second half of the run.
pub fn default_profile() -> Vec<(f64, f64)> {
    vec![(0.0, 16.0), (8.0, 16.2), (16.0, 15.9), (24.0, 16.1), (30.0, 16.8), (34.0, 17.88), (50.0, 17.88)]
}

impl OvConfig {
    pub fn behavior(&self, horizon: usize) -> OvBehavior {
        let base = OvBehavior::new(self.mode);
        OvBehavior {
            headway: self.headway.unwrap_or(base.headway),
            speed: self.speed.unwrap_or(base.speed),
            effort: self.effort.unwrap_or(base.effort),
            target_headway: self.target_headway.unwrap_or(base.target_headway),
            recovery: self.recovery.unwrap_or(base.recovery),
            noise: self.noise,
            horizon,
            ..base
        }
    }

    pub fn speed_profile(&self, max_speed: f64) -> Result<SpeedProfile, ProfileError> {
        match &self.profile_file {
            Some(path) => SpeedProfile::load(path, max_speed),
            None => SpeedProfile::new(&self.profile, max_speed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Fitted variance curve (JSON); the built-in curve when unset.
    pub variance_curve: Option<PathBuf>,
    pub horizon: usize,
    pub beta: f64,
    pub sim: SimParams,
    pub limits: Limits,
    pub geometry: VehicleGeometry,
    pub leader: LeaderWeights,
    pub follower: FollowerWeights,
    pub mpec: MpecOptions,
    /// See [`LateralConfig::pull_out_lead`]; negative disables the early lane change.
    pub pull_out_lead: f64,
    pub longitudinal: LongitudinalWeights,
    pub ov: OvConfig,
    pub initial: WorldState,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "polite".into(),
            seed: 0,
            horizon: 20,
            beta: 0.05,
            sim: SimParams::default(),
            limits: Limits::default(),
            geometry: VehicleGeometry::default(),
            leader: LeaderWeights::default(),
            follower: FollowerWeights::default(),
            mpec: MpecOptions::default(),
            pull_out_lead: 5.0,
            longitudinal: LongitudinalWeights::default(),
            ov: OvConfig::default(),
            variance_curve: None,
            initial: WorldState { rel_x: -35.0, rel_y: 0.0, heading: 0.0, speed: 16.0, ov_speed: 16.0 },
        }
    }
}

impl ScenarioConfig {
    pub fn with_mode(mode: OvMode) -> Self {
        let name = match mode {
            OvMode::NonInteractive => "non_interactive",
            OvMode::Polite => "polite",
            OvMode::Aggressive => "aggressive",
        };
        Self { name: name.into(), ov: OvConfig { mode, ..OvConfig::default() }, ..Self::default() }
    }

    /// The three canonical scenarios.
    pub fn canonical() -> Vec<Self> {
        [OvMode::Polite, OvMode::Aggressive, OvMode::NonInteractive].into_iter().map(Self::with_mode).collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a scenario file; relative paths inside it are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut cfg: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.ov.profile_file.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.variance_curve.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.limits.ego_speed_max > self.sim.ov_speed_max) {
            return bad(format!(
                "ego speed limit {} must exceed the overtaken-vehicle limit {}",
                self.limits.ego_speed_max, self.sim.ov_speed_max
            ));
        }
        if self.horizon == 0 || self.horizon as f64 * self.sim.dt > self.sim.total_time + 1e-9 {
            return bad(format!("horizon {} does not fit in {} s", self.horizon, self.sim.total_time));
        }
        if !self.initial.is_finite() || self.initial.speed < 0.0 || self.initial.ov_speed < 0.0 {
            return bad("initial state must be finite with nonnegative speeds".into());
        }
        if !self.pull_out_lead.is_finite() {
            return bad("pull-out lead must be finite".into());
        }
        Risk::new(self.beta)?;
        self.geometry.derive()?;
        self.ov.behavior(self.horizon).validate()?;
        let w = &self.longitudinal;
        if !(w.progress > 0.0 && w.speed > 0.0 && w.effort > 0.0) {
            return bad("longitudinal weights must be positive".into());
        }
        Ok(())
    }

    pub fn occupancy(&self) -> Result<OccupancyParams, HarnessError> {
        Ok(self.geometry.derive()?)
    }

    pub fn lateral_config(&self) -> Result<LateralConfig, HarnessError> {
        Ok(LateralConfig {
            horizon: self.horizon,
            sim: self.sim,
            limits: self.limits,
            occupancy: self.occupancy()?,
            leader: self.leader,
            follower: self.follower,
            mpec: self.mpec,
            pull_out_lead: (self.pull_out_lead >= 0.0).then_some(self.pull_out_lead),
        })
    }

    pub fn longitudinal_config(&self) -> Result<LongitudinalConfig, HarnessError> {
        Ok(LongitudinalConfig {
            horizon: self.horizon,
            sim: self.sim,
            limits: self.limits,
            occupancy: self.occupancy()?,
            weights: self.longitudinal,
            risk: Risk::new(self.beta)?,
            ..LongitudinalConfig::default()
        })
    }

    pub fn ov_environment(&self) -> Result<OvEnvironment, HarnessError> {
        Ok(OvEnvironment { sim: self.sim, limits: self.limits, occupancy: self.occupancy()? })
    }

    pub fn curve(&self) -> Result<VarianceCurve, HarnessError> {
        Ok(match &self.variance_curve {
            Some(p) => VarianceCurve::load(p)?,
            None => VarianceCurve::default(),
        })
    }
}

#[cfg(test)]
pub(crate) fn short_scenario(total_time: f64) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.sim.total_time = total_time;
    cfg
}
