use std::collections::BTreeMap;

use pcno_gas::{
    boundary_at, build_paper_network, junction_defects, random_scenario, restrict_field, simulate,
    single_pipe_network, solve_steady_state, BoundaryValues, GridSpec, PiecewiseSeries, SolverOptions,
    SquareWaveSpec, StateField,
};
use proptest::prelude::*;

fn closed_form(p0: f64, lambda: f64, zrt: f64, q: f64, x: f64, d: f64) -> f64 {
    (p0 * p0 - lambda * zrt * q * q.abs() * x / d).sqrt()
}

fn single_bc(flow: f64) -> BoundaryValues {
    BoundaryValues {
        pressures: BTreeMap::from([(0, 3.0e5)]),
        flows: BTreeMap::from([(1, flow)]),
    }
}

#[test]
fn pipe_one_outlet_pressure() {
    let (net, _) = build_paper_network();
    let pipe = net.pipes[0].clone();
    let single = single_pipe_network(pipe.clone());
    let row = solve_steady_state(&single, &single_bc(1.0), &GridSpec::new(640.0, 400.0)).unwrap();
    let out = *row.pressure[0].last().unwrap();
    let expect = closed_form(3.0e5, pipe.friction, pipe.zrt(), 1.0 / pipe.area(), pipe.length, pipe.diameter);
    assert!((out - expect).abs() / expect < 1e-6);
    assert!((out - 0.2949e6).abs() < 100.0, "{out}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn steady_profile_follows_square_law(flow in 0.0f64..5.0, which in 0usize..3) {
        let (net, _) = build_paper_network();
        let pipe = net.pipes[which].clone();
        let single = single_pipe_network(pipe.clone());
        let grid = GridSpec::new(640.0, 400.0);
        let row = solve_steady_state(&single, &single_bc(flow), &grid).unwrap();
        let q = flow / pipe.area();
        for (i, &p) in row.pressure[0].iter().enumerate() {
            let expect = closed_form(3.0e5, pipe.friction, pipe.zrt(), q, i as f64 * 400.0, pipe.diameter);
            prop_assert!((p - expect).abs() / expect <= 1e-6);
        }
        prop_assert!(row.flow[0].iter().all(|&m| (m - flow).abs() < 1e-9));
    }
}

#[test]
fn constant_boundaries_keep_row_zero() {
    let (net, sched) = build_paper_network();
    let grid = GridSpec::new(640.0, 400.0);
    let field = simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap();
    assert_eq!(field.flow[0].shape(), (136, 151));
    assert_eq!(field.pressure[0].shape(), (136, 151));
    assert_eq!(field.pressure[1].shape(), (136, 126));
    assert_eq!(field.pressure[2].shape(), (136, 101));
    let first = field.row(0);
    for t in 1..field.time_points() {
        assert!(field.row(t).max_rel_diff(&first) < 1e-8);
    }
}

#[test]
fn random_scenario_conserves_at_junctions() {
    let (net, _) = build_paper_network();
    let opts = SolverOptions::default();
    let sched = random_scenario(&net, &SquareWaveSpec::paper(), 640.0, 640.0, 11).unwrap();
    let grid = GridSpec::new(640.0, 400.0);
    let field = simulate(&net, &sched, &grid, &opts).unwrap();
    let zrt = net.pipes[0].zrt();
    for t in 0..field.time_points() {
        let bc = boundary_at(&sched, t as f64 * grid.dt).unwrap();
        let (flow, pressure) = junction_defects(&net, &field.row(t), &bc);
        assert!(flow <= 10.0 * opts.newton_tol, "t={t} flow defect {flow}");
        assert!(pressure <= 10.0 * opts.newton_tol * zrt, "t={t} pressure defect {pressure}");
        assert!(field.pressure.iter().all(|p| p.row(t).iter().all(|&v| v > 0.0)));
    }
}

#[test]
fn simulate_is_bit_deterministic() {
    let (net, _) = build_paper_network();
    let sched = random_scenario(&net, &SquareWaveSpec::paper(), 640.0, 640.0, 3).unwrap();
    let grid = GridSpec::new(640.0, 400.0);
    let a = simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap();
    let b = simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap();
    assert_eq!(a, b);
}

fn max_rel_gap(coarse: &StateField, fine: &StateField) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, b) in coarse.flow.iter().zip(&fine.flow) {
        let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    for (a, b) in coarse.pressure.iter().zip(&fine.pressure) {
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs() / x.abs());
        }
    }
    worst
}

#[test]
fn refinement_self_convergence() {
    // Smooth scenario: one slow demand change ramped over two hours.
    let (net, mut sched) = build_paper_network();
    sched.ramp = 7680.0;
    sched.demand_flow.insert(2, PiecewiseSeries::steps(vec![1.0, 1.6], vec![30_720.0]).unwrap());
    sched.horizon = 61_440.0;
    let opts = SolverOptions::default();
    let run = |dt: f64, dx: f64| simulate(&net, &sched, &GridSpec::new(dt, dx), &opts).unwrap();
    let g1 = run(1280.0, 1000.0);
    let g2 = restrict_field(&run(640.0, 500.0), 2, 2).unwrap();
    let g3 = restrict_field(&run(320.0, 250.0), 4, 4).unwrap();
    let g4 = restrict_field(&run(160.0, 125.0), 8, 8).unwrap();
    let d1 = max_rel_gap(&g1, &g2);
    let d2 = max_rel_gap(&g2, &g3);
    let d3 = max_rel_gap(&g3, &g4);
    assert!(d1 > d2 && d2 > d3, "gaps {d1:e} {d2:e} {d3:e}");
}
