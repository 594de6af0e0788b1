use serde::{Deserialize, Serialize};

use super::{HarnessError, TraceLog, TraceRecord};

/// Lateral offset within which the ego counts as settled in its lane, m.
pub const SETTLE_BAND: f64 = 0.05;
/// Largest tolerated follower re-solve mismatch.
pub const AUDIT_TOLERANCE: f64 = 1e-6;

/// Safety, comfort and timing figures of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// First and last step of the cut-in window, inclusive.
    pub cut_in: Option<(usize, usize)>,
    /// Whether the ego settled back into its lane.
    pub settled: bool,
    pub rms_heading_deg: Option<f64>,
    pub rms_lateral_accel: Option<f64>,
    /// Time spent with the ego centre beyond the lane divider, s.
    pub lane_occupancy_time: f64,
    /// Smallest headway time once back in the initial lane ahead of the
    /// overtaken vehicle; absent without a merge-back.
    pub min_headway_time: Option<f64>,
    /// Smallest edge-to-edge lateral gap while side by side, m.
    pub min_lateral_distance: Option<f64>,
    pub collision: bool,
    pub overlap_steps: usize,
    pub mean_wall_time: f64,
    pub max_wall_time: f64,
    pub median_nodes: f64,
    /// Largest finite follower re-solve mismatch.
    pub max_audit_error: f64,
    /// Iterations whose re-solve mismatch exceeded the tolerance or failed.
    pub audit_violations: usize,
    pub lateral_soft_steps: usize,
    pub longitudinal_soft_steps: usize,
    pub saturated_steps: usize,
}

/// Step range from the return of the lateral target to zero after the pass
/// until the ego first settles within [`SETTLE_BAND`] of its lane centre.
/// The second value tells whether settling happened before the trace ended.
pub fn cut_in_window(records: &[TraceRecord]) -> Option<((usize, usize), bool)> {
    let start = records
        .windows(2)
        .position(|w| w[0].target_rel_y != 0.0 && w[1].target_rel_y == 0.0 && w[1].state.rel_x > 0.0)?
        + 1;
    let settle = records[start..].iter().position(|r| r.state.rel_y.abs() <= SETTLE_BAND);
    Some(match settle {
        Some(offset) => ((start, start + offset), true),
        None => ((start, records.len() - 1), false),
    })
}

fn rms(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    (count > 0).then(|| (sum / count as f64).sqrt())
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

pub fn compute_metrics(trace: &TraceLog) -> Result<Metrics, HarnessError> {
    let records = &trace.records;
    if records.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    let cfg = &trace.config;
    let occ = cfg.occupancy()?;
    let divider = occ.lane_width / 2.0;
    let window = cut_in_window(records);
    let cut: &[TraceRecord] = match window {
        Some(((a, b), _)) => &records[a..=b],
        None => &[],
    };

    let first_in_lane = records.iter().position(|r| r.state.rel_y > divider);
    let min_headway_time = first_in_lane.and_then(|i| {
        records[i..]
            .iter()
            .filter(|r| r.state.rel_y < divider && r.state.rel_x > 0.0)
            .map(|r| r.headway)
            .min_by(f64::total_cmp)
    });
    let min_lateral_distance = records
        .iter()
        .filter(|r| (occ.span_start..=occ.span_end).contains(&r.state.rel_x))
        .map(|r| r.state.rel_y.abs() - occ.width)
        .min_by(f64::total_cmp);

    let overlap_steps = records.iter().filter(|r| r.overlap).count();
    let walls: Vec<f64> = records.iter().map(|r| r.wall_time).collect();
    let finite_audit = records.iter().map(|r| r.audit_error).filter(|e| e.is_finite());
    Ok(Metrics {
        cut_in: window.map(|w| w.0),
        settled: window.is_some_and(|w| w.1),
        rms_heading_deg: rms(cut.iter().map(|r| r.state.heading.to_degrees())),
        rms_lateral_accel: rms(cut.iter().map(|r| r.state.speed * r.state.speed * r.steer / cfg.sim.wheelbase)),
        lane_occupancy_time: records.iter().filter(|r| r.state.rel_y > divider).count() as f64 * cfg.sim.dt,
        min_headway_time,
        min_lateral_distance,
        collision: overlap_steps > 0,
        overlap_steps,
        mean_wall_time: walls.iter().sum::<f64>() / walls.len() as f64,
        max_wall_time: walls.iter().copied().fold(0.0, f64::max),
        median_nodes: median(records.iter().map(|r| r.nodes as f64).collect()),
        max_audit_error: finite_audit.fold(0.0, f64::max),
        audit_violations: records.iter().filter(|r| !(r.audit_error <= AUDIT_TOLERANCE)).count(),
        lateral_soft_steps: records.iter().filter(|r| r.lateral_soft).count(),
        longitudinal_soft_steps: records.iter().filter(|r| r.longitudinal_soft).count(),
        saturated_steps: records.iter().filter(|r| r.saturated).count(),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use crate::geometry::Phase;
    use crate::harness::ScenarioConfig;
    use crate::vehicle::WorldState;

    pub fn record(step: usize, state: WorldState, target_rel_y: f64) -> TraceRecord {
        TraceRecord {
            step,
            time: step as f64 * 0.1,
            state,
            accel: 0.0,
            steer: 0.0,
            saturated: false,
            ov_accel: 0.0,
            ov_interacting: false,
            ov_fallback: false,
            predicted_ov_accel: 0.0,
            headway: state.rel_x / state.ov_speed,
            variance: 0.0,
            phase: Phase::Approach,
            overlap: false,
            nodes: 1,
            lateral_objective: 0.0,
            lateral_soft: false,
            lateral_slack: 0.0,
            audit_error: 0.0,
            target_rel_y,
            headway_gate: false,
            active_pairs: 0,
            longitudinal_objective: 0.0,
            longitudinal_soft: false,
            longitudinal_slack: 0.0,
            wall_time: 0.01,
            shared_ego_speed: vec![],
            shared_ov_speed: vec![],
            plan_steer: vec![0.0],
            plan_accel: vec![0.0],
            plan_ego_speed: vec![],
            plan_ov_speed: vec![],
        }
    }

    pub fn log(records: Vec<TraceRecord>) -> TraceLog {
        let final_state = records.last().unwrap().state;
        TraceLog { config: ScenarioConfig::default(), records, final_state, aborted: None }
    }

    /// Pass at 16 m/s relative speed 1: 40 steps in the left lane, then a
    /// 20-step return to the lane centre.
    pub fn overtake() -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for i in 0..80 {
            let rel_x = -10.0 + 0.5 * i as f64;
            let rel_y = match i {
                0..=9 => 0.365 * i as f64,
                10..=49 => 3.65,
                50..=69 => 3.65 * (69 - i) as f64 / 20.0,
                _ => 0.0,
            };
            let target = if i < 50 { 3.65 } else { 0.0 };
            out.push(record(i, WorldState { rel_x, rel_y, heading: 0.0, speed: 17.0, ov_speed: 16.0 }, target));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::vehicle::WorldState;
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_steer_gives_closed_form_lateral_acceleration() {
        let mut records = overtake();
        for r in &mut records {
            r.steer = 0.01;
        }
        let m = compute_metrics(&log(records)).unwrap();
        assert_abs_diff_eq!(m.rms_lateral_accel.unwrap(), 17.0 * 17.0 * 0.01 / 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.rms_lateral_accel.unwrap(), 1.156, epsilon = 1e-12);
    }

    #[test]
    fn cut_in_window_runs_from_target_switch_to_settling() {
        let records = overtake();
        let ((a, b), settled) = cut_in_window(&records).unwrap();
        assert_eq!(a, 50);
        assert!(settled);
        assert_eq!(b, 69);
        assert!(records[b].state.rel_y.abs() <= SETTLE_BAND && records[b - 1].state.rel_y.abs() > SETTLE_BAND);
    }

    #[test]
    fn heading_rms_matches_hand_value() {
        let mut records = overtake();
        for (j, r) in records[50..=69].iter_mut().enumerate() {
            r.state.heading = if j % 2 == 0 { 0.01 } else { -0.02 };
        }
        let m = compute_metrics(&log(records)).unwrap();
        let expected = ((0.01f64.to_degrees().powi(2) + 0.02f64.to_degrees().powi(2)) / 2.0).sqrt();
        assert_abs_diff_eq!(m.rms_heading_deg.unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn staying_in_lane_has_no_occupancy_nor_headway() {
        let records = (0..30)
            .map(|i| {
                record(
                    i,
                    WorldState { rel_x: 5.0 + i as f64, rel_y: 0.0, heading: 0.0, speed: 17.0, ov_speed: 16.0 },
                    0.0,
                )
            })
            .collect();
        let m = compute_metrics(&log(records)).unwrap();
        assert_eq!(m.lane_occupancy_time, 0.0);
        assert_eq!(m.min_headway_time, None);
        assert_eq!(m.cut_in, None);
        assert_eq!(m.rms_heading_deg, None);
    }

    #[test]
    fn injected_minimum_headway_is_reported() {
        let mut records = overtake();
        let r = &mut records[72];
        r.state.rel_x = 1.19 * r.state.ov_speed;
        r.headway = 1.19;
        let m = compute_metrics(&log(records)).unwrap();
        assert_abs_diff_eq!(m.min_headway_time.unwrap(), 1.19, epsilon = 1e-12);
    }

    #[test]
    fn occupancy_and_lateral_gap() {
        let m = compute_metrics(&log(overtake())).unwrap();
        // Steps 6..=58 sit beyond the 1.825 m divider.
        let beyond = overtake().iter().filter(|r| r.state.rel_y > 1.825).count();
        assert_abs_diff_eq!(m.lane_occupancy_time, beyond as f64 * 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.min_lateral_distance.unwrap(), 3.65 - 1.82, epsilon = 1e-12);
        assert!(!m.collision);
    }

    #[test]
    fn overlap_flags_collision_and_audit_failures_count() {
        let mut records = overtake();
        records[3].overlap = true;
        records[4].audit_error = f64::INFINITY;
        records[5].audit_error = 1e-3;
        let m = compute_metrics(&log(records)).unwrap();
        assert!(m.collision);
        assert_eq!(m.overlap_steps, 1);
        assert_eq!(m.audit_violations, 2);
        assert_eq!(m.max_audit_error, 1e-3);
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
