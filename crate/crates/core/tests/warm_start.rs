//! Carrying the complementarity pattern between iterations must not change
//! the optimum the lateral controller reports.

use gtpro::harness::run_closed_loop;
use gtpro::lateral::{LateralController, SharedSequences};
use gtpro::{OvMode, ScenarioConfig};

#[test]
fn warm_and_cold_lateral_solves_agree_along_a_run() {
    for mode in [OvMode::Polite, OvMode::Aggressive] {
        let mut cfg = ScenarioConfig::with_mode(mode);
        cfg.sim.total_time = 12.0;
        // Exercise the search rather than the pinned-follower shortcut.
        cfg.mpec.tighten_reaction = false;
        let log = run_closed_loop(&cfg).unwrap();
        let lateral = cfg.lateral_config().unwrap();
        let mut warm = LateralController::new(lateral.clone());
        for r in log.records.iter().step_by(3) {
            let shared = SharedSequences { ego_speed: r.shared_ego_speed.clone(), ov_speed: r.shared_ov_speed.clone() };
            let hot = warm.step(&r.state, &shared).unwrap();
            let cold = LateralController::new(lateral.clone()).step(&r.state, &shared).unwrap();
            let (a, b) = (hot.diagnostics.objective, cold.diagnostics.objective);
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{mode:?} step {}: warm {a} vs cold {b}", r.step);
            let steer_gap = hot.steer.iter().zip(&cold.steer).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(steer_gap <= 1e-6, "{mode:?} step {}: steer plans differ by {steer_gap}", r.step);
        }
    }
}
