use serde::{Deserialize, Serialize};

use super::metrics::AUDIT_TOLERANCE;
use super::{compute_metrics, HarnessError, Metrics, TraceLog};
use crate::vehicle::{step_plant, ControlInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// First offending step or other context when the check fails.
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, failure: Option<String>) {
        self.checks.push(Check { name: name.into(), passed: failure.is_none(), detail: failure.unwrap_or_default() });
    }
}

fn first_failure<I: Iterator<Item = (usize, bool)>>(items: I) -> Option<String> {
    items.into_iter().find(|(_, ok)| !ok).map(|(step, _)| format!("step {step}"))
}

/// Re-checks the loop invariants on a stored trace. When `logged` is given the
/// metrics are recomputed and compared with it.
pub fn validate_trace(trace: &TraceLog, logged: Option<&Metrics>) -> Result<ValidationReport, HarnessError> {
    let cfg = &trace.config;
    let occ = cfg.occupancy()?;
    let recs = &trace.records;
    let dt = cfg.sim.dt;
    let mut report = ValidationReport { checks: Vec::new() };

    let expected = cfg.sim.iterations();
    report.push(
        "record count",
        (recs.len() != expected || trace.aborted.is_some())
            .then(|| format!("{} of {expected} records, aborted: {:?}", recs.len(), trace.aborted)),
    );
    report.push(
        "monotone time",
        first_failure(recs.iter().enumerate().map(|(i, r)| (i, r.step == i && (r.time - i as f64 * dt).abs() <= 1e-9))),
    );
    report.push(
        "applied first move",
        first_failure(recs.iter().map(|r| {
            let plan = ControlInput {
                accel: r.plan_accel.first().copied().unwrap_or(f64::NAN),
                steer: r.plan_steer.first().copied().unwrap_or(f64::NAN),
            };
            let (clamped, saturated) = cfg.limits.saturate(&plan);
            (r.step, clamped.accel == r.accel && clamped.steer == r.steer && saturated == r.saturated)
        })),
    );
    let n = cfg.horizon;
    report.push(
        "shared sequences",
        first_failure(recs.iter().enumerate().map(|(i, r)| {
            let ok = if i == 0 {
                r.shared_ego_speed == vec![r.state.speed; n] && r.shared_ov_speed == vec![r.state.ov_speed; n]
            } else {
                let prev = &recs[i - 1];
                prev.plan_ego_speed.get(1..) == Some(&r.shared_ego_speed[..])
                    && prev.plan_ov_speed.get(1..) == Some(&r.shared_ov_speed[..])
            };
            (r.step, ok)
        })),
    );
    let mut transitions = Vec::new();
    for w in recs.windows(2) {
        let input = ControlInput { accel: w[0].accel, steer: w[0].steer };
        let next = step_plant(&w[0].state, &input, w[0].ov_accel, &cfg.sim)?;
        transitions.push((w[0].step, next == w[1].state));
    }
    report.push("plant transitions", first_failure(transitions.into_iter()));
    report.push(
        "overlap oracle",
        first_failure(
            recs.iter().map(|r| (r.step, occ.overlap(r.state.rel_x, r.state.rel_y) == r.overlap && !r.overlap)),
        ),
    );
    report.push("follower audit", first_failure(recs.iter().map(|r| (r.step, r.audit_error <= AUDIT_TOLERANCE))));
    if let Some(m) = logged {
        let again = compute_metrics(trace)?;
        report
            .push("metrics recompute", (again != *m).then(|| "recomputed metrics differ from the summary".to_string()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_closed_loop, short_scenario};

    #[test]
    fn clean_run_passes_and_tampering_is_caught() {
        let log = run_closed_loop(&short_scenario(2.0)).unwrap();
        let m = log.metrics().unwrap();
        let report = validate_trace(&log, Some(&m)).unwrap();
        assert!(report.passed(), "{report:?}");

        let mut bad = log.clone();
        bad.records[4].steer += 1e-3;
        let r = validate_trace(&bad, None).unwrap();
        let failed: Vec<_> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["applied first move", "plant transitions"]);

        let mut bad = log.clone();
        bad.records[3].shared_ego_speed[0] += 1.0;
        assert!(!validate_trace(&bad, None).unwrap().passed());

        let mut short = log;
        short.records.pop();
        let r = validate_trace(&short, None).unwrap();
        assert!(!r.checks[0].passed);
    }
}
