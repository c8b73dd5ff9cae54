use ocp_homotopy::diagnostics::{verify_kkt, CheckStatus};
use ocp_homotopy::{
    build_problem, find_initial_guess, solve, GuessStrategy, HomotopyParams, NlpView,
    PathPlanConfig, SolveResult, SolveStatus, TrackerConfig,
};

fn three_leg() -> (NlpView, SolveResult) {
    let config = PathPlanConfig::default();
    let view = NlpView::new(build_problem(&config).unwrap());
    let u0 = find_initial_guess(&config, GuessStrategy::ThreeLeg, 0).unwrap();
    let params = HomotopyParams::uniform(u0, view.s(), 1.0, 1.0).unwrap();
    let result = solve(view.clone(), params, &TrackerConfig::with_step(0.4)).unwrap();
    (view, result)
}

#[test]
fn endpoint_is_a_kkt_point_with_complementary_multipliers() {
    let (view, result) = three_leg();
    assert_eq!(result.status, SolveStatus::Converged);
    assert_eq!(result.lambda_final, 1.0);
    let (entry, kkt) = verify_kkt(&view, &result.u, &result.mu, 1e-6).unwrap();
    assert_eq!(entry.status, CheckStatus::Pass);
    assert!(kkt.max() <= 1e-6);
    let g = view.evaluate_g(1.0, &result.u).unwrap();
    let mut active = 0;
    for i in 0..view.s() {
        if g[i] < -1e-6 {
            assert!(result.mu[i].abs() <= 1e-8, "row {i}: mu = {}", result.mu[i]);
        } else {
            active += 1;
        }
    }
    // the path wraps around the obstacle union and ends on the terminal ball
    assert!(active >= 2);
    let terminal = view.nonconvex_rows().len();
    assert!(g[terminal].abs() <= 1e-8);
    assert!(result.mu[terminal] > 0.0);
}

#[test]
fn trace_ends_on_the_target_and_is_deterministic() {
    let (_, first) = three_leg();
    let (_, second) = three_leg();
    let last = first.trace.last().unwrap();
    assert_eq!(last.lambda, 1.0);
    assert!(last.res_inf <= 1e-10);
    assert_eq!(first.u, second.u);
    assert_eq!(first.trace.len(), second.trace.len());
    for (a, b) in first.trace.iter().zip(&second.trace) {
        assert_eq!(a.point, b.point);
    }
}
