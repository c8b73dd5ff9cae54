//! Browser bindings for the path-planning demo. Every export returns a JSON
//! string; errors become a thrown JS string.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use nalgebra::DVector;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use ocp_homotopy::homotopy::{initial_multiplier_bisection, k_value};
use ocp_homotopy::pathplan::{path_metrics, route, Obstacle};
use ocp_homotopy::tracker::SolveStatus;
use ocp_homotopy::{
    build_problem, find_initial_guess, solve, GuessStrategy, HomotopyParams, NlpView,
    PathPlanConfig, StackedControl, TrackerConfig,
};

#[derive(Serialize)]
struct Scene {
    start: [f64; 2],
    target: [f64; 2],
    epsilon: f64,
    obstacles: Vec<Obstacle>,
}

fn scene(config: &PathPlanConfig) -> Scene {
    Scene {
        start: config.x0,
        target: config.x_target,
        epsilon: config.epsilon,
        obstacles: config.obstacles.clone(),
    }
}

fn config_with_radius(radius: f64) -> Result<PathPlanConfig, String> {
    let mut config = PathPlanConfig::default();
    for ob in &mut config.obstacles {
        ob.r = radius;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn states(config: &PathPlanConfig, u: &StackedControl) -> Result<Vec<[f64; 2]>, String> {
    let problem = build_problem(config).map_err(|e| e.to_string())?;
    let traj = problem.rollout(u).map_err(|e| e.to_string())?;
    Ok(traj.states.iter().map(|x| [x[0], x[1]]).collect())
}

#[derive(Serialize)]
struct SolveReport {
    status: SolveStatus,
    converged: bool,
    cost: f64,
    lambda_final: f64,
    steps: usize,
    kkt: f64,
    min_obstacle_margin: f64,
    terminal_error: f64,
    initial: Vec<[f64; 2]>,
    path: Vec<[f64; 2]>,
    /// `(arclength, λ)` for every accepted step.
    lambda_trace: Vec<[f64; 2]>,
    /// Trajectories at up to a dozen evenly spaced trace records, tagged with `λ`.
    snapshots: Vec<(f64, Vec<[f64; 2]>)>,
    scene: Scene,
}

/// Runs the full homotopy solve for one guess.
pub fn solve_json(
    guess: &str,
    h: f64,
    b0: f64,
    c0: f64,
    radius: f64,
    seed: u64,
) -> Result<String, String> {
    let config = config_with_radius(radius)?;
    let strategy: GuessStrategy = guess
        .parse()
        .map_err(|e: ocp_homotopy::Error| e.to_string())?;
    let view = NlpView::new(build_problem(&config).map_err(|e| e.to_string())?);
    let r = view.r();
    let u0 = find_initial_guess(&config, strategy, seed).map_err(|e| e.to_string())?;
    let initial = states(&config, &u0)?;
    let params = HomotopyParams::uniform(u0, view.s(), b0, c0).map_err(|e| e.to_string())?;
    let tracker = TrackerConfig {
        max_steps: 2000,
        ..TrackerConfig::with_step(h)
    };
    tracker.validate().map_err(|e| e.to_string())?;
    let result = solve(view, params, &tracker).map_err(|e| e.to_string())?;
    let metrics = path_metrics(&config, &result.u).map_err(|e| e.to_string())?;
    let stride = (result.trace.len() / 12).max(1);
    let mut snapshots = Vec::new();
    for rec in result.trace.iter().step_by(stride) {
        let u = StackedControl(rec.point.rows(1, r).into_owned());
        snapshots.push((rec.lambda, states(&config, &u)?));
    }
    let report = SolveReport {
        status: result.status,
        converged: result.status == SolveStatus::Converged,
        cost: result.cost,
        lambda_final: result.lambda_final,
        steps: result.steps,
        kkt: result.kkt.max(),
        min_obstacle_margin: metrics.min_obstacle_margin,
        terminal_error: metrics.terminal_error,
        initial,
        path: states(&config, &result.u)?,
        lambda_trace: result.trace.iter().map(|t| [t.arclen, t.lambda]).collect(),
        snapshots,
        scene: scene(&config),
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct KCurve {
    mu: Vec<f64>,
    k: Vec<f64>,
    /// Root of `μ ↦ K(0, g, μ)`, present only for `λ = 0`.
    root: Option<f64>,
}

/// Samples `μ ↦ K(λ, g, μ)` on `[mu_min, mu_max]`.
pub fn k_curve_json(
    lambda: f64,
    g: f64,
    b: f64,
    c: f64,
    mu_min: f64,
    mu_max: f64,
    samples: usize,
) -> Result<String, String> {
    if !(mu_max > mu_min) || samples < 2 {
        return Err("need mu_max > mu_min and at least two samples".into());
    }
    let mu: Vec<f64> = (0..samples)
        .map(|i| mu_min + (mu_max - mu_min) * i as f64 / (samples - 1) as f64)
        .collect();
    let k = mu.iter().map(|&m| k_value(lambda, g, m, b, c)).collect();
    let root = if lambda == 0.0 {
        initial_multiplier_bisection(g, b, c).ok()
    } else {
        None
    };
    serde_json::to_string(&KCurve { mu, k, root }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct GuessReport {
    waypoints: Vec<[f64; 2]>,
    path: Vec<[f64; 2]>,
    cost: f64,
    feasible_at_zero: bool,
    scene: Scene,
}

/// Initial guess for a strategy and its rollout.
pub fn guess_json(guess: &str, seed: u64, radius: f64) -> Result<String, String> {
    let config = config_with_radius(radius)?;
    let strategy: GuessStrategy = guess
        .parse()
        .map_err(|e: ocp_homotopy::Error| e.to_string())?;
    let u = find_initial_guess(&config, strategy, seed).map_err(|e| e.to_string())?;
    let view = NlpView::new(build_problem(&config).map_err(|e| e.to_string())?);
    let g: DVector<f64> = view.evaluate_g(0.0, &u).map_err(|e| e.to_string())?;
    let report = GuessReport {
        waypoints: route(&config, strategy, seed)
            .iter()
            .map(|p| [p.x, p.y])
            .collect(),
        path: states(&config, &u)?,
        cost: view.problem().total_cost(&u).map_err(|e| e.to_string())?,
        feasible_at_zero: g.max() < 0.0,
        scene: scene(&config),
    };
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn solve_path(
    guess: &str,
    h: f64,
    b0: f64,
    c0: f64,
    radius: f64,
    seed: u32,
) -> Result<String, JsValue> {
    solve_json(guess, h, b0, c0, radius, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn k_curve(
    lambda: f64,
    g: f64,
    b: f64,
    c: f64,
    mu_min: f64,
    mu_max: f64,
    samples: u32,
) -> Result<String, JsValue> {
    k_curve_json(lambda, g, b, c, mu_min, mu_max, samples as usize)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn initial_guess(guess: &str, seed: u32, radius: f64) -> Result<String, JsValue> {
    guess_json(guess, seed.into(), radius).map_err(|e| JsValue::from_str(&e))
}
