use std::time::Instant;

use super::{HarnessError, ScenarioConfig, TraceLog, TraceRecord};
use crate::geometry::OccupancyParams;
use crate::lateral::{LateralController, LateralOutput, SharedSequences};
use crate::longitudinal::LongitudinalController;
use crate::ovsim::OvSimulator;
use crate::uncertainty::{headway_time, VarianceCurve};
use crate::vehicle::{step_plant, ControlInput, WorldState};

/// One closed-loop experiment, advanced an iteration at a time.
#[derive(Debug)]
pub struct Simulation {
    pub config: ScenarioConfig,
    pub state: WorldState,
    pub step: usize,
    lateral: LateralController,
    longitudinal: LongitudinalController,
    ov: OvSimulator,
    curve: VarianceCurve,
    occupancy: OccupancyParams,
    /// Ego-speed and overtaken-speed plans of the previous iteration.
    previous: Option<(Vec<f64>, Vec<f64>)>,
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let curve = config.curve()?;
        let profile = config.ov.speed_profile(config.sim.ov_speed_max)?;
        let ov = OvSimulator::new(
            config.ov.behavior(config.horizon),
            profile,
            config.ov_environment()?,
            curve.clone(),
            config.seed,
        )?;
        Ok(Self {
            state: config.initial,
            step: 0,
            lateral: LateralController::new(config.lateral_config()?),
            longitudinal: LongitudinalController::new(config.longitudinal_config()?),
            occupancy: config.occupancy()?,
            ov,
            curve,
            previous: None,
            config,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.config.sim.dt
    }

    fn shared(&self) -> Result<SharedSequences, HarnessError> {
        let n = self.config.horizon;
        Ok(match &self.previous {
            None => SharedSequences::hold(&self.state, n),
            Some((ego, ov)) => SharedSequences::shifted(ego, ov, n)?,
        })
    }

    /// Runs both controllers, the driver model and the plant for one interval.
    pub fn advance(&mut self) -> Result<TraceRecord, HarnessError> {
        let started = Instant::now();
        let t = self.time();
        let state = self.state;
        let shared = self.shared()?;
        let lateral: LateralOutput = self.lateral.step(&state, &shared)?;
        let headway = headway_time(state.rel_x, state.ov_speed);
        let variance = self.curve.lookup(headway);
        let lon = self.longitudinal.step(&state, &lateral, &shared, variance)?;
        let planned = ControlInput { accel: lon.accel[0], steer: lateral.steer[0] };
        let (applied, saturated) = self.config.limits.saturate(&planned);
        let wall_time = started.elapsed().as_secs_f64();

        let ov = self.ov.step(t, &state);
        let next = step_plant(&state, &applied, ov.accel, &self.config.sim)?;
        let d = &lateral.diagnostics;
        let record = TraceRecord {
            step: self.step,
            time: t,
            state,
            accel: applied.accel,
            steer: applied.steer,
            saturated,
            ov_accel: ov.accel,
            ov_interacting: ov.interacting,
            ov_fallback: ov.fallback,
            predicted_ov_accel: lateral.ov_accel[0],
            headway,
            variance,
            phase: self.occupancy.phase_at(state.rel_x),
            overlap: self.occupancy.overlap(state.rel_x, state.rel_y),
            nodes: d.nodes,
            lateral_objective: d.objective,
            lateral_soft: d.soft,
            lateral_slack: d.slack,
            audit_error: d.audit_error,
            target_rel_y: d.target_rel_y,
            headway_gate: d.headway_gate,
            active_pairs: d.active_pairs,
            longitudinal_objective: lon.objective,
            longitudinal_soft: lon.soft,
            longitudinal_slack: lon.slack,
            wall_time,
            shared_ego_speed: shared.ego_speed,
            shared_ov_speed: shared.ov_speed,
            plan_steer: lateral.steer.clone(),
            plan_accel: lon.accel.clone(),
            plan_ego_speed: lon.speed.clone(),
            plan_ov_speed: lateral.ov_speed.clone(),
        };
        self.previous = Some((lon.speed, lateral.ov_speed));
        self.state = next;
        self.step += 1;
        Ok(record)
    }

    /// Runs to the configured end time. A failing iteration ends the run and
    /// is reported in `aborted`; records gathered so far are kept.
    pub fn run(mut self) -> TraceLog {
        let total = self.config.sim.iterations();
        let mut records = Vec::with_capacity(total);
        let mut aborted = None;
        while self.step < total {
            match self.advance() {
                Ok(r) => records.push(r),
                Err(e) => {
                    aborted = Some(format!("step {}: {e}", self.step));
                    break;
                }
            }
        }
        TraceLog { config: self.config, records, final_state: self.state, aborted }
    }
}

pub fn run_closed_loop(config: &ScenarioConfig) -> Result<TraceLog, HarnessError> {
    Ok(Simulation::new(config.clone())?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::short_scenario as short;

    #[test]
    fn short_run_is_deterministic_and_plumbs_the_plans() {
        let cfg = short(3.0);
        let a = run_closed_loop(&cfg).unwrap();
        let b = run_closed_loop(&cfg).unwrap();
        assert!(a.aborted.is_none(), "{:?}", a.aborted);
        assert_eq!(a.records.len(), 30);
        assert!(a.same_trajectory(&b));
        for w in a.records.windows(2) {
            assert_eq!(w[1].shared_ego_speed, w[0].plan_ego_speed[1..]);
            assert_eq!(w[1].shared_ov_speed, w[0].plan_ov_speed[1..]);
        }
        assert_eq!(a.records[0].shared_ego_speed, vec![cfg.initial.speed; 20]);
    }

    #[test]
    fn applied_input_is_the_first_planned_move() {
        let log = run_closed_loop(&short(2.0)).unwrap();
        for r in &log.records {
            assert_eq!(r.steer, r.plan_steer[0]);
            assert_eq!(r.accel, r.plan_accel[0]);
        }
    }
}
