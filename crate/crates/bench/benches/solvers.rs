use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gtpro::harness::Simulation;
use gtpro::lateral::{
    assemble_mpec, build_follower, build_leader, coupling_lines, solve_mpec, LateralController, MpecOptions,
    MpecProblem, PairState, SharedSequences,
};
use gtpro::longitudinal::LongitudinalController;
use gtpro::qp::QpSolver;
use gtpro::{ScenarioConfig, WorldState};
use std::hint::black_box;

fn alongside() -> WorldState {
    WorldState { rel_x: -5.0, rel_y: 2.0, heading: 0.01, speed: 18.0, ov_speed: 16.0 }
}

fn mpec(cfg: &ScenarioConfig, state: &WorldState) -> MpecProblem {
    let lateral = cfg.lateral_config().unwrap();
    let shared = SharedSequences::hold(state, cfg.horizon);
    assemble_mpec(
        &build_leader(state, &shared, &lateral).unwrap(),
        &build_follower(state, &shared, &lateral).unwrap(),
        &coupling_lines(state, &shared, &lateral).unwrap(),
    )
    .unwrap()
}

fn solvers(c: &mut Criterion) {
    let cfg = ScenarioConfig::default();
    let state = alongside();
    let problem = mpec(&cfg, &state);
    let mut solver = QpSolver::default();

    let root = problem.relaxation(&vec![PairState::MultZero; problem.num_pairs()], 1e5);
    c.bench_function("qp/mpec_root_relaxation", |b| b.iter(|| solver.solve(black_box(&root), None).unwrap()));

    c.bench_function("mpec/pinned_follower", |b| {
        b.iter(|| solve_mpec(black_box(&problem), None, &MpecOptions::default(), &mut solver).unwrap())
    });

    // Plain search on a short horizon.
    let short = ScenarioConfig { horizon: 5, ..cfg.clone() };
    let small = mpec(&short, &state);
    let search = MpecOptions { tighten_reaction: false, ..MpecOptions::default() };
    c.bench_function("mpec/branch_and_bound_n5", |b| {
        b.iter(|| solve_mpec(black_box(&small), None, &search, &mut solver).unwrap())
    });

    let shared = SharedSequences::hold(&state, cfg.horizon);
    let lateral = LateralController::new(cfg.lateral_config().unwrap()).step(&state, &shared).unwrap();
    let mut lon = LongitudinalController::new(cfg.longitudinal_config().unwrap());
    c.bench_function("longitudinal/step", |b| b.iter(|| lon.step(black_box(&state), &lateral, &shared, 0.3).unwrap()));

    c.bench_function("closed_loop/advance", |b| {
        b.iter_batched(
            || Simulation::new(cfg.clone()).unwrap(),
            |mut sim| sim.advance().unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = solvers
}
criterion_main!(benches);
