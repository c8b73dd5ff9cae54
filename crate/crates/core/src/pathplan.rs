//! Planar point-mass path planning around circular obstacles.
//!
//! Dynamics `x_{k+1} = x_k + gain·u_k`, cost `Σ ½‖u_k‖²`, obstacle families
//! `−‖x_k − m‖² + λ·w ≤ 0` on `k = 1..N−1` (with `w = r²` unless overridden),
//! a terminal ball `‖x_N − x_target‖² − ε² ≤ 0`, and the box `‖u_k‖∞ ≤ u_max`
//! written as `2m` affine rows per step. At `λ = 0` the obstacles shrink to
//! points, so nearly any route is feasible.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    Convexity, Dynamics, Family, InputConstraint, OcpProblem, RunningCost, StackedControl,
    StateConstraint,
};
use crate::transcription::NlpView;

/// Controls produced by an initial guess must stay this far inside the box.
pub const BOX_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub m: [f64; 2],
    pub r: f64,
    /// Coefficient of `λ` in the obstacle row. Defaults to `r²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_weight: Option<f64>,
}

impl Obstacle {
    pub fn new(m: [f64; 2], r: f64) -> Self {
        Self {
            m,
            r,
            lambda_weight: None,
        }
    }

    pub fn weight(&self) -> f64 {
        self.lambda_weight.unwrap_or(self.r * self.r)
    }
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_u_max() -> f64 {
    1.0
}

fn default_gain() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPlanConfig {
    pub x0: [f64; 2],
    #[serde(rename = "xN")]
    pub x_target: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(rename = "N")]
    pub horizon: usize,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
}

impl Default for PathPlanConfig {
    fn default() -> Self {
        Self {
            x0: [0.0, 0.0],
            x_target: [5.0, 5.0],
            obstacles: vec![
                Obstacle::new([3.5, 2.5], 1.4),
                Obstacle::new([2.5, 3.5], 1.4),
            ],
            epsilon: default_epsilon(),
            horizon: 20,
            u_max: default_u_max(),
            gain: default_gain(),
        }
    }
}

fn v2(a: [f64; 2]) -> Vector2<f64> {
    Vector2::new(a[0], a[1])
}

impl PathPlanConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.x0.iter().chain(&self.x_target).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("start and target must be finite".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon N must be at least 2".into()));
        }
        if !(self.u_max > 0.0) || !(self.gain > 0.0) {
            return Err(Error::Config("u_max and gain must be positive".into()));
        }
        for (i, ob) in self.obstacles.iter().enumerate() {
            if !(ob.r > 0.0) {
                return Err(Error::Config(format!(
                    "obstacle {i}: radius must be positive"
                )));
            }
            let centre = v2(ob.m);
            let target_dist = (v2(self.x_target) - centre).norm();
            if target_dist <= ob.r + self.epsilon {
                return Err(Error::Config(format!(
                    "obstacle {i}: target lies within r + epsilon of the centre ({target_dist:.4} <= {:.4})",
                    ob.r + self.epsilon
                )));
            }
            if (v2(self.x0) - centre).norm() == 0.0 {
                return Err(Error::Config(format!(
                    "obstacle {i}: start coincides with the centre"
                )));
            }
        }
        Ok(())
    }

    /// Number of scheduled constraint rows.
    pub fn constraint_count(&self) -> usize {
        self.obstacles.len() * (self.horizon - 1) + 1 + 4 * self.horizon
    }
}

/// `x_{k+1} = x_k + gain·u_k`.
#[derive(Debug, Clone, Copy)]
pub struct LinearStep {
    pub gain: f64,
}

impl Dynamics for LinearStep {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        x + u * self.gain
    }

    fn jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len())
    }

    fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(x.len(), u.len()) * self.gain
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// `½‖u‖²`.
#[derive(Debug, Clone, Copy)]
pub struct ControlEnergy;

impl RunningCost for ControlEnergy {
    fn eval(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * u.norm_squared()
    }

    fn grad_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn grad_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        u.clone()
    }

    fn hessian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        let (n, m) = (x.len(), u.len());
        let mut h = DMatrix::zeros(n + m, n + m);
        h.view_mut((n, n), (m, m)).fill_with_identity();
        Some(h)
    }
}

/// `−‖x − centre‖² + λ·weight`.
#[derive(Debug, Clone)]
pub struct DiscAvoidance {
    pub centre: DVector<f64>,
    pub weight: f64,
}

impl StateConstraint for DiscAvoidance {
    fn eval(&self, lambda: f64, x: &DVector<f64>) -> f64 {
        -(x - &self.centre).norm_squared() + lambda * self.weight
    }

    fn grad_x(&self, _lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.centre) * -2.0
    }

    fn d_lambda(&self, _lambda: f64, _x: &DVector<f64>) -> f64 {
        self.weight
    }

    fn grad_x_d_lambda(&self, _lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn hessian_x(&self, _lambda: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(x.len(), x.len()) * -2.0)
    }
}

/// `‖x − target‖² − ε²`.
#[derive(Debug, Clone)]
pub struct TerminalBall {
    pub target: DVector<f64>,
    pub radius: f64,
}

impl StateConstraint for TerminalBall {
    fn eval(&self, _lambda: f64, x: &DVector<f64>) -> f64 {
        (x - &self.target).norm_squared() - self.radius * self.radius
    }

    fn grad_x(&self, _lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.target) * 2.0
    }

    fn d_lambda(&self, _lambda: f64, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn grad_x_d_lambda(&self, _lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn hessian_x(&self, _lambda: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(x.len(), x.len()) * 2.0)
    }
}

/// `sign·u[axis] − bound`.
#[derive(Debug, Clone, Copy)]
pub struct BoxRow {
    pub axis: usize,
    pub sign: f64,
    pub bound: f64,
}

impl InputConstraint for BoxRow {
    fn eval(&self, _lambda: f64, u: &DVector<f64>) -> f64 {
        self.sign * u[self.axis] - self.bound
    }

    fn grad_u(&self, _lambda: f64, u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(u.len());
        g[self.axis] = self.sign;
        g
    }

    fn d_lambda(&self, _lambda: f64, _u: &DVector<f64>) -> f64 {
        0.0
    }

    fn grad_u_d_lambda(&self, _lambda: f64, u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(u.len())
    }

    fn hessian_u(&self, _lambda: f64, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(u.len(), u.len()))
    }
}

fn assemble(config: &PathPlanConfig) -> Result<OcpProblem> {
    let n_steps = config.horizon;
    let mut builder = OcpProblem::builder(
        DVector::from_row_slice(&config.x0),
        2,
        n_steps,
        Arc::new(LinearStep { gain: config.gain }),
        Arc::new(ControlEnergy),
    );
    for (i, ob) in config.obstacles.iter().enumerate() {
        builder = builder.state_constraint(Family::new(
            format!("obstacle{}", i + 1),
            Arc::new(DiscAvoidance {
                centre: DVector::from_row_slice(&ob.m),
                weight: ob.weight(),
            }),
            1..n_steps,
            Convexity::Nonconvex,
        ));
    }
    builder = builder.state_constraint(Family::new(
        "terminal",
        Arc::new(TerminalBall {
            target: DVector::from_row_slice(&config.x_target),
            radius: config.epsilon,
        }),
        [n_steps],
        Convexity::Convex,
    ));
    for axis in 0..2 {
        for (sign, tag) in [(1.0, "+"), (-1.0, "-")] {
            builder = builder.input_constraint(Family::new(
                format!("box{tag}u{}", axis + 1),
                Arc::new(BoxRow {
                    axis,
                    sign,
                    bound: config.u_max,
                }),
                0..n_steps,
                Convexity::Convex,
            ));
        }
    }
    builder.build()
}

/// Builds the control problem after checking the configuration invariants.
pub fn build_problem(config: &PathPlanConfig) -> Result<OcpProblem> {
    config.validate()?;
    assemble(config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuessStrategy {
    Straight,
    TwoLeg,
    ThreeLeg,
}

impl GuessStrategy {
    pub const ALL: [GuessStrategy; 3] = [Self::Straight, Self::TwoLeg, Self::ThreeLeg];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::TwoLeg => "two-leg",
            Self::ThreeLeg => "three-leg",
        }
    }
}

impl fmt::Display for GuessStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuessStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "two-leg" => Ok(Self::TwoLeg),
            "three-leg" => Ok(Self::ThreeLeg),
            other => Err(Error::Config(format!(
                "unknown guess strategy '{other}' (expected straight, two-leg or three-leg)"
            ))),
        }
    }
}

impl GuessStrategy {
    /// Step size and uniform `b⁰ = c⁰` used for this guess in the reference runs.
    pub fn reference_settings(self) -> (f64, f64) {
        match self {
            Self::Straight => (0.47, 1.0),
            Self::TwoLeg => (0.1, 0.1),
            Self::ThreeLeg => (0.4, 1.0),
        }
    }
}

/// Geometric quality of a control sequence for the path-planning problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathMetrics {
    /// `min_{i, k=1..N−1} ‖x_k − m_i‖² − r_i²`; positive when clear of every disc.
    pub min_obstacle_margin: f64,
    /// `‖x_N − x_target‖`.
    pub terminal_error: f64,
    /// `max_k ‖u_k‖∞`.
    pub max_control: f64,
}

pub fn path_metrics(config: &PathPlanConfig, u: &StackedControl) -> Result<PathMetrics> {
    let problem = assemble(config)?;
    let traj = problem.rollout(u)?;
    let n = config.horizon;
    let mut min_obstacle_margin = f64::INFINITY;
    for ob in &config.obstacles {
        let centre = DVector::from_row_slice(&ob.m);
        for x in &traj.states[1..n] {
            min_obstacle_margin =
                min_obstacle_margin.min((x - &centre).norm_squared() - ob.r * ob.r);
        }
    }
    Ok(PathMetrics {
        min_obstacle_margin,
        terminal_error: (&traj.states[n] - DVector::from_row_slice(&config.x_target)).norm(),
        max_control: u.0.amax(),
    })
}

const WAYPOINT_JITTER: f64 = 0.1;

/// Waypoint route from start to target for the given strategy.
pub fn route(config: &PathPlanConfig, strategy: GuessStrategy, seed: u64) -> Vec<Vector2<f64>> {
    let start = v2(config.x0);
    let end = v2(config.x_target);
    let chord = end - start;
    let length = chord.norm();
    // unit normal pointing to the right of the start->target direction
    let normal = Vector2::new(chord.y, -chord.x) / length.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |p: Vector2<f64>| {
        p + Vector2::new(
            rng.random_range(-WAYPOINT_JITTER..=WAYPOINT_JITTER),
            rng.random_range(-WAYPOINT_JITTER..=WAYPOINT_JITTER),
        )
    };
    match strategy {
        GuessStrategy::Straight => vec![start, end],
        GuessStrategy::TwoLeg => {
            let corner = start + chord * 0.5 + normal * (0.34 * length);
            vec![start, jitter(corner), end]
        }
        GuessStrategy::ThreeLeg => {
            let offset = -normal * (0.325 * length);
            let a = start + chord / 3.0 + offset;
            let b = start + chord * (2.0 / 3.0) + offset;
            vec![start, jitter(a), jitter(b), end]
        }
    }
}

/// `count + 1` points spaced evenly by arc length along a polyline.
fn resample(waypoints: &[Vector2<f64>], count: usize) -> Vec<Vector2<f64>> {
    let seg_len: Vec<f64> = waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = seg_len.iter().sum();
    let mut out = Vec::with_capacity(count + 1);
    for i in 0..=count {
        let mut target = total * i as f64 / count as f64;
        let mut placed = false;
        for (seg, &len) in seg_len.iter().enumerate() {
            if target <= len || seg == seg_len.len() - 1 {
                let frac = if len > 0.0 {
                    (target / len).min(1.0)
                } else {
                    0.0
                };
                out.push(waypoints[seg] + (waypoints[seg + 1] - waypoints[seg]) * frac);
                placed = true;
                break;
            }
            target -= len;
        }
        if !placed {
            out.push(*waypoints.last().expect("nonempty route"));
        }
    }
    *out.last_mut().expect("nonempty") = *waypoints.last().expect("nonempty route");
    out
}

/// Builds a strictly feasible control for the relaxed (`λ = 0`) problem by
/// following a waypoint route and allocating controls in the least-squares
/// sense at each step.
pub fn find_initial_guess(
    config: &PathPlanConfig,
    strategy: GuessStrategy,
    seed: u64,
) -> Result<StackedControl> {
    let problem = assemble(config)?;
    let samples = resample(&route(config, strategy, seed), config.horizon);
    let dynamics = problem.dynamics();
    let mut x = DVector::from_row_slice(&config.x0);
    let mut blocks = Vec::with_capacity(config.horizon);
    let zero = DVector::zeros(2);
    for (k, next) in samples.iter().skip(1).enumerate() {
        let drift = dynamics.eval(&x, &zero);
        let b = dynamics.jac_u(&x, &zero);
        let want = DVector::from_row_slice(&[next.x, next.y]) - drift;
        let uk = b
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::InfeasibleGuess(e.to_string()))?
            * want;
        if uk.amax() > config.u_max - BOX_MARGIN {
            return Err(Error::InfeasibleGuess(format!(
                "{strategy} route needs |u_{k}|∞ = {:.4}, above u_max - {BOX_MARGIN}",
                uk.amax()
            )));
        }
        x = dynamics.eval(&x, &uk);
        blocks.push(uk);
    }
    let u = StackedControl::stack(&blocks);
    let view = NlpView::new(problem);
    let g = view.evaluate_g(0.0, &u)?;
    if let Some((row, value)) = g.iter().enumerate().find(|(_, v)| !(**v < 0.0)) {
        let key = view.index_map().row(row);
        return Err(Error::InfeasibleGuess(format!(
            "{strategy} route is not strictly feasible at lambda = 0: row {row} ({}, k={}) = {value:e}",
            view.family_name(key),
            key.k
        )));
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_reference_instance() {
        let c = PathPlanConfig::default();
        assert_eq!(c.x0, [0.0, 0.0]);
        assert_eq!(c.x_target, [5.0, 5.0]);
        assert_eq!(c.obstacles[0].m, [3.5, 2.5]);
        assert_eq!(c.obstacles[1].m, [2.5, 3.5]);
        assert_eq!(c.obstacles[0].r, 1.4);
        assert_eq!(c.horizon, 20);
        assert_eq!(c.epsilon, 0.1);
        let gap = (v2(c.obstacles[0].m) - v2(c.obstacles[1].m)).norm();
        assert!((gap - 2f64.sqrt()).abs() < 1e-15);
        assert!(gap < c.obstacles[0].r + c.obstacles[1].r);
    }

    #[test]
    fn default_problem_dimensions() {
        let view = NlpView::new(build_problem(&PathPlanConfig::default()).unwrap());
        assert_eq!(view.r(), 40);
        // 2 obstacles x 19 interior steps + terminal + 4 box rows x 20 steps
        assert_eq!(view.s(), 2 * 19 + 1 + 4 * 20);
        assert_eq!(view.s(), 119);
    }

    #[test]
    fn config_json_round_trip() {
        let mut c = PathPlanConfig::default();
        c.obstacles[1].lambda_weight = Some(1.4);
        let back = PathPlanConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_defaults_fill_optional_keys() {
        let c = PathPlanConfig::from_json(
            r#"{"x0":[0,0],"xN":[5,5],"obstacles":[{"m":[3.5,2.5],"r":1.4}],"N":20}"#,
        )
        .unwrap();
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.u_max, 1.0);
        assert_eq!(c.gain, 0.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = PathPlanConfig {
            epsilon: 0.0,
            ..PathPlanConfig::default()
        };
        assert!(matches!(build_problem(&c), Err(Error::Config(_))));

        let mut c = PathPlanConfig::default();
        c.obstacles[0].m = [5.0, 4.0];
        assert!(matches!(build_problem(&c), Err(Error::Config(_))));

        let mut c = PathPlanConfig::default();
        c.obstacles[0].r = -1.0;
        assert!(matches!(build_problem(&c), Err(Error::Config(_))));

        let mut c = PathPlanConfig::default();
        c.obstacles[0].m = c.x0;
        assert!(matches!(build_problem(&c), Err(Error::Config(_))));
    }

    #[test]
    fn straight_guess_is_the_constant_diagonal_control() {
        let c = PathPlanConfig::default();
        let u = find_initial_guess(&c, GuessStrategy::Straight, 0).unwrap();
        for k in 0..20 {
            let b = u.block(k, 2);
            assert!((b[0] - 0.5).abs() < 1e-12 && (b[1] - 0.5).abs() < 1e-12);
        }
        let view = NlpView::new(build_problem(&c).unwrap());
        let g = view.evaluate_g(0.0, &u).unwrap();
        let terminal = view
            .index_map()
            .rows()
            .iter()
            .position(|k| view.family_name(*k) == "terminal")
            .unwrap();
        assert!((g[terminal] + 0.01).abs() < 1e-12);
        // box rows: +u - 1 = -0.5 and -u - 1 = -1.5
        for i in 39..119 {
            let expected = if view
                .family_name(view.index_map().row(i))
                .starts_with("box+")
            {
                -0.5
            } else {
                -1.5
            };
            assert!((g[i] - expected).abs() < 1e-12, "row {i}: {}", g[i]);
        }
    }

    #[test]
    fn detour_guesses_are_strictly_feasible_for_many_seeds() {
        let c = PathPlanConfig::default();
        let problem = build_problem(&c).unwrap();
        let view = NlpView::new(problem);
        for strategy in [GuessStrategy::TwoLeg, GuessStrategy::ThreeLeg] {
            for seed in 0..20 {
                let u = find_initial_guess(&c, strategy, seed).unwrap();
                let g = view.evaluate_g(0.0, &u).unwrap();
                assert!(g.max() < 0.0, "{strategy} seed {seed}");
                assert!(u.0.amax() <= c.u_max - BOX_MARGIN);
            }
        }
    }

    #[test]
    fn two_leg_route_passes_below_the_obstacles() {
        let c = PathPlanConfig::default();
        let pts = route(&c, GuessStrategy::TwoLeg, 3);
        assert!(pts[1].x > 3.9 && pts[1].y < 1.1);
    }

    #[test]
    fn zero_epsilon_straight_guess_is_rejected() {
        let c = PathPlanConfig {
            epsilon: 0.0,
            ..PathPlanConfig::default()
        };
        let err = find_initial_guess(&c, GuessStrategy::Straight, 0).unwrap_err();
        match err {
            Error::InfeasibleGuess(msg) => assert!(msg.contains("terminal"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strategy_names_parse() {
        for s in GuessStrategy::ALL {
            assert_eq!(s.as_str().parse::<GuessStrategy>().unwrap(), s);
        }
        assert!("zigzag".parse::<GuessStrategy>().is_err());
    }

    #[test]
    fn metrics_of_straight_guess() {
        let config = PathPlanConfig::default();
        let u = find_initial_guess(&config, GuessStrategy::Straight, 0).unwrap();
        let m = path_metrics(&config, &u).unwrap();
        assert!(m.terminal_error < 1e-12);
        assert!((m.max_control - 0.5).abs() < 1e-12);
        // x_12 = (3, 3) is √0.5 from either centre
        assert!((m.min_obstacle_margin - (0.5 - 1.96)).abs() < 1e-12);
    }
}
