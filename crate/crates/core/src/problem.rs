//! Discrete-time optimal control problems with homotopy-parametrized constraints.
//!
//! A problem is a horizon `N`, an initial state, dynamics `x_{k+1} = f(x_k, u_k)`,
//! a running and terminal cost, and two kinds of scalar inequality families:
//! state families `g(λ, x_k) ≤ 0` scheduled on a subset of `1..=N`, and input
//! families `h(λ, u_k) ≤ 0` scheduled on a subset of `0..N`. Costs and dynamics
//! never depend on `λ`.
//!
//! Every evaluator trait ships central-difference defaults for its derivatives,
//! so a problem can be assembled from plain function values and refined with
//! analytic derivatives where they matter.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

const FD_STEP: f64 = 1e-6;

fn fd_gradient(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = FD_STEP * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn fd_jacobian(
    x: &DVector<f64>,
    rows: usize,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = FD_STEP * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

fn fd_lambda(lambda: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (f(lambda + h) - f(lambda - h)) / (2.0 * h)
}

/// State transition map `x_{k+1} = f(x_k, u_k)`.
pub trait Dynamics: Send + Sync {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `∂f/∂x`, `n × n`.
    fn jac_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(x, x.len(), |xp| self.eval(xp, u))
    }

    /// `∂f/∂u`, `n × m`.
    fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        fd_jacobian(u, x.len(), |up| self.eval(x, up))
    }

    /// True when `f(x, u) = A x + B u + c` with constant `A`, `B`. Enables exact
    /// second-order assembly of the Lagrangian Hessian.
    fn is_affine(&self) -> bool {
        false
    }
}

/// Stage cost `ℓ(x, u) ≥ 0`.
pub trait RunningCost: Send + Sync {
    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    fn grad_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        fd_gradient(x, |xp| self.eval(xp, u))
    }

    fn grad_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        fd_gradient(u, |up| self.eval(x, up))
    }

    /// Hessian over the joint variable `(x, u)`, `(n+m) × (n+m)`, if known.
    fn hessian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Terminal cost `J_N(x) ≥ 0`.
pub trait TerminalCost: Send + Sync {
    fn eval(&self, x: &DVector<f64>) -> f64;

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        fd_gradient(x, |xp| self.eval(xp))
    }

    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Scalar state constraint family `g(λ, x) ≤ 0`.
pub trait StateConstraint: Send + Sync {
    fn eval(&self, lambda: f64, x: &DVector<f64>) -> f64;

    fn grad_x(&self, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        fd_gradient(x, |xp| self.eval(lambda, xp))
    }

    /// `∂g/∂λ`.
    fn d_lambda(&self, lambda: f64, x: &DVector<f64>) -> f64 {
        fd_lambda(lambda, |l| self.eval(l, x))
    }

    /// `∂(∇ₓg)/∂λ`.
    fn grad_x_d_lambda(&self, lambda: f64, x: &DVector<f64>) -> DVector<f64> {
        let h = FD_STEP;
        (self.grad_x(lambda + h, x) - self.grad_x(lambda - h, x)) / (2.0 * h)
    }

    fn hessian_x(&self, _lambda: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Scalar input constraint family `h(λ, u) ≤ 0`.
pub trait InputConstraint: Send + Sync {
    fn eval(&self, lambda: f64, u: &DVector<f64>) -> f64;

    fn grad_u(&self, lambda: f64, u: &DVector<f64>) -> DVector<f64> {
        fd_gradient(u, |up| self.eval(lambda, up))
    }

    fn d_lambda(&self, lambda: f64, u: &DVector<f64>) -> f64 {
        fd_lambda(lambda, |l| self.eval(l, u))
    }

    fn grad_u_d_lambda(&self, lambda: f64, u: &DVector<f64>) -> DVector<f64> {
        let h = FD_STEP;
        (self.grad_u(lambda + h, u) - self.grad_u(lambda - h, u)) / (2.0 * h)
    }

    fn hessian_u(&self, _lambda: f64, _u: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// Declared convexity of a constraint family as a function of the stacked control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convexity {
    Convex,
    Nonconvex,
}

/// A constraint evaluator together with its schedule and convexity declaration.
pub struct Family<C: ?Sized> {
    pub name: String,
    pub constraint: Arc<C>,
    /// Sorted, deduplicated time indices at which the family is imposed.
    pub mask: Vec<usize>,
    pub convexity: Convexity,
}

impl<C: ?Sized> Family<C> {
    pub fn new(
        name: impl Into<String>,
        constraint: Arc<C>,
        mask: impl IntoIterator<Item = usize>,
        convexity: Convexity,
    ) -> Self {
        let mut mask: Vec<usize> = mask.into_iter().collect();
        mask.sort_unstable();
        mask.dedup();
        Self {
            name: name.into(),
            constraint,
            mask,
            convexity,
        }
    }
}

impl<C: ?Sized> Clone for Family<C> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            constraint: Arc::clone(&self.constraint),
            mask: self.mask.clone(),
            convexity: self.convexity,
        }
    }
}

impl<C: ?Sized> fmt::Debug for Family<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Family")
            .field("name", &self.name)
            .field("mask", &self.mask)
            .field("convexity", &self.convexity)
            .finish()
    }
}

pub type StateFamily = Family<dyn StateConstraint>;
pub type InputFamily = Family<dyn InputConstraint>;

/// The parametrized optimal control problem. Immutable after construction.
#[derive(Clone)]
pub struct OcpProblem {
    n: usize,
    m: usize,
    horizon: usize,
    x0: DVector<f64>,
    dynamics: Arc<dyn Dynamics>,
    running_cost: Arc<dyn RunningCost>,
    terminal_cost: Option<Arc<dyn TerminalCost>>,
    state_constraints: Vec<StateFamily>,
    input_constraints: Vec<InputFamily>,
}

impl fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpProblem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0.as_slice())
            .field("state_constraints", &self.state_constraints)
            .field("input_constraints", &self.input_constraints)
            .finish()
    }
}

pub struct OcpProblemBuilder {
    m: usize,
    horizon: usize,
    x0: DVector<f64>,
    dynamics: Arc<dyn Dynamics>,
    running_cost: Arc<dyn RunningCost>,
    terminal_cost: Option<Arc<dyn TerminalCost>>,
    state_constraints: Vec<StateFamily>,
    input_constraints: Vec<InputFamily>,
}

impl OcpProblemBuilder {
    pub fn terminal_cost(mut self, cost: Arc<dyn TerminalCost>) -> Self {
        self.terminal_cost = Some(cost);
        self
    }

    pub fn state_constraint(mut self, family: StateFamily) -> Self {
        self.state_constraints.push(family);
        self
    }

    pub fn input_constraint(mut self, family: InputFamily) -> Self {
        self.input_constraints.push(family);
        self
    }

    pub fn build(self) -> Result<OcpProblem> {
        let n = self.x0.len();
        if n == 0 || self.m == 0 {
            return Err(Error::InvalidProblem(
                "state and control dimensions must be positive".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("initial state is not finite".into()));
        }
        for fam in &self.state_constraints {
            if fam.mask.is_empty() {
                return Err(Error::InvalidProblem(format!(
                    "state family '{}' has an empty time mask",
                    fam.name
                )));
            }
            if let Some(&k) = fam.mask.iter().find(|&&k| k == 0 || k > self.horizon) {
                return Err(Error::InvalidProblem(format!(
                    "state family '{}' scheduled at k={k}, outside 1..={}",
                    fam.name, self.horizon
                )));
            }
        }
        for fam in &self.input_constraints {
            if fam.mask.is_empty() {
                return Err(Error::InvalidProblem(format!(
                    "input family '{}' has an empty time mask",
                    fam.name
                )));
            }
            if let Some(&k) = fam.mask.iter().find(|&&k| k >= self.horizon) {
                return Err(Error::InvalidProblem(format!(
                    "input family '{}' scheduled at k={k}, outside 0..{}",
                    fam.name, self.horizon
                )));
            }
        }
        Ok(OcpProblem {
            n,
            m: self.m,
            horizon: self.horizon,
            x0: self.x0,
            dynamics: self.dynamics,
            running_cost: self.running_cost,
            terminal_cost: self.terminal_cost,
            state_constraints: self.state_constraints,
            input_constraints: self.input_constraints,
        })
    }
}

/// Decision vector `u = (u₀ᵀ, …, u_{N−1}ᵀ)ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedControl(pub DVector<f64>);

impl StackedControl {
    pub fn zeros(r: usize) -> Self {
        Self(DVector::zeros(r))
    }

    pub fn stack(blocks: &[DVector<f64>]) -> Self {
        let data: Vec<f64> = blocks.iter().flat_map(|b| b.iter().copied()).collect();
        Self(DVector::from_vec(data))
    }

    pub fn unstack(&self, m: usize) -> Vec<DVector<f64>> {
        (0..self.0.len() / m).map(|k| self.block(k, m)).collect()
    }

    pub fn block(&self, k: usize, m: usize) -> DVector<f64> {
        self.0.rows(k * m, m).into_owned()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl From<DVector<f64>> for StackedControl {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// States `x₀, …, x_N` produced by a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub states: Vec<DVector<f64>>,
}

/// `∂x_k/∂u` for `k = 0..=N`, each `n × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTensor {
    pub blocks: Vec<DMatrix<f64>>,
}

impl SensitivityTensor {
    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.blocks[k]
    }
}

impl OcpProblem {
    pub fn builder(
        x0: DVector<f64>,
        m: usize,
        horizon: usize,
        dynamics: Arc<dyn Dynamics>,
        running_cost: Arc<dyn RunningCost>,
    ) -> OcpProblemBuilder {
        OcpProblemBuilder {
            m,
            horizon,
            x0,
            dynamics,
            running_cost,
            terminal_cost: None,
            state_constraints: Vec::new(),
            input_constraints: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Length `r = N·m` of the stacked control.
    pub fn decision_dim(&self) -> usize {
        self.horizon * self.m
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn running_cost(&self) -> &dyn RunningCost {
        self.running_cost.as_ref()
    }

    pub fn terminal_cost(&self) -> Option<&dyn TerminalCost> {
        self.terminal_cost.as_deref()
    }

    pub fn state_constraints(&self) -> &[StateFamily] {
        &self.state_constraints
    }

    pub fn input_constraints(&self) -> &[InputFamily] {
        &self.input_constraints
    }

    fn check_control(&self, u: &StackedControl) -> Result<()> {
        check_dim("stacked control", self.decision_dim(), u.len())
    }

    pub fn rollout(&self, u: &StackedControl) -> Result<StateTrajectory> {
        self.check_control(u)?;
        let mut states = Vec::with_capacity(self.horizon + 1);
        states.push(self.x0.clone());
        for k in 0..self.horizon {
            let next = self.dynamics.eval(&states[k], &u.block(k, self.m));
            check_dim("dynamics output", self.n, next.len())?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { k: k + 1 });
            }
            states.push(next);
        }
        Ok(StateTrajectory { states })
    }

    /// Rollout plus forward sensitivities
    /// `S_{k+1} = (∂f/∂x) S_k + (∂f/∂u) E_k`, `S_0 = 0`.
    pub fn rollout_with_sensitivities(
        &self,
        u: &StackedControl,
    ) -> Result<(StateTrajectory, SensitivityTensor)> {
        let traj = self.rollout(u)?;
        let r = self.decision_dim();
        let mut blocks = Vec::with_capacity(self.horizon + 1);
        blocks.push(DMatrix::zeros(self.n, r));
        for k in 0..self.horizon {
            let uk = u.block(k, self.m);
            let a = self.dynamics.jac_x(&traj.states[k], &uk);
            let b = self.dynamics.jac_u(&traj.states[k], &uk);
            let mut next = &a * &blocks[k];
            let mut cols = next.columns_mut(k * self.m, self.m);
            cols += &b;
            blocks.push(next);
        }
        Ok((traj, SensitivityTensor { blocks }))
    }

    pub fn total_cost(&self, u: &StackedControl) -> Result<f64> {
        let traj = self.rollout(u)?;
        Ok(self.cost_of(&traj, u))
    }

    pub(crate) fn cost_of(&self, traj: &StateTrajectory, u: &StackedControl) -> f64 {
        let stage: f64 = (0..self.horizon)
            .map(|k| self.running_cost.eval(&traj.states[k], &u.block(k, self.m)))
            .sum();
        let terminal = self
            .terminal_cost
            .as_ref()
            .map_or(0.0, |t| t.eval(&traj.states[self.horizon]));
        stage + terminal
    }

    pub fn cost_gradient(&self, u: &StackedControl) -> Result<DVector<f64>> {
        let (traj, sens) = self.rollout_with_sensitivities(u)?;
        let grad = self.cost_gradient_with(&traj, &sens, u);
        if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "cost gradient",
                index: i,
            });
        }
        Ok(grad)
    }

    pub(crate) fn cost_gradient_with(
        &self,
        traj: &StateTrajectory,
        sens: &SensitivityTensor,
        u: &StackedControl,
    ) -> DVector<f64> {
        let m = self.m;
        let mut grad = DVector::zeros(self.decision_dim());
        for k in 0..self.horizon {
            let uk = u.block(k, m);
            let gx = self.running_cost.grad_x(&traj.states[k], &uk);
            let gu = self.running_cost.grad_u(&traj.states[k], &uk);
            grad += sens.at(k).tr_mul(&gx);
            let mut rows = grad.rows_mut(k * m, m);
            rows += &gu;
        }
        if let Some(t) = &self.terminal_cost {
            let gn = t.grad(&traj.states[self.horizon]);
            grad += sens.at(self.horizon).tr_mul(&gn);
        }
        grad
    }

    /// Exact Hessian of the cost when the dynamics are affine and every cost
    /// term reports its Hessian.
    pub(crate) fn cost_hessian_exact(
        &self,
        traj: &StateTrajectory,
        sens: &SensitivityTensor,
        u: &StackedControl,
    ) -> Option<DMatrix<f64>> {
        if !self.dynamics.is_affine() {
            return None;
        }
        let (n, m, r) = (self.n, self.m, self.decision_dim());
        let mut hess = DMatrix::zeros(r, r);
        for k in 0..self.horizon {
            let h = self.running_cost.hessian(&traj.states[k], &u.block(k, m))?;
            // d(x_k, u_k)/du = [S_k; E_k]
            let mut lift = DMatrix::zeros(n + m, r);
            lift.rows_mut(0, n).copy_from(sens.at(k));
            for j in 0..m {
                lift[(n + j, k * m + j)] = 1.0;
            }
            hess += lift.transpose() * h * &lift;
        }
        if let Some(t) = &self.terminal_cost {
            let h = t.hessian(&traj.states[self.horizon])?;
            let s = sens.at(self.horizon);
            hess += s.transpose() * h * s;
        }
        Some(hess)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Small problems used across unit tests.
    use super::*;

    pub struct HalfStep;

    impl Dynamics for HalfStep {
        fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            x + u * 0.5
        }
        fn jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(x.len(), x.len())
        }
        fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(x.len(), u.len()) * 0.5
        }
        fn is_affine(&self) -> bool {
            true
        }
    }

    pub struct Energy;

    impl RunningCost for Energy {
        fn eval(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            0.5 * u.norm_squared()
        }
        fn grad_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(x.len())
        }
        fn grad_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            u.clone()
        }
    }

    pub struct SquaredNorm;

    impl TerminalCost for SquaredNorm {
        fn eval(&self, x: &DVector<f64>) -> f64 {
            x.norm_squared()
        }
    }

    /// `x_{k+1} = x + sin(u)` with an `x`-coupled stage cost; derivatives by FD defaults.
    pub struct SinStep;

    impl Dynamics for SinStep {
        fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            let mut out = x.clone();
            for i in 0..x.len() {
                out[i] += u[i % u.len()].sin() + 0.1 * x[(i + 1) % x.len()].powi(2);
            }
            out
        }
        fn jac_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
            let n = x.len();
            let mut j = DMatrix::identity(n, n);
            for i in 0..n {
                j[(i, (i + 1) % n)] += 0.2 * x[(i + 1) % n];
            }
            j
        }
        fn jac_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
            let mut j = DMatrix::zeros(x.len(), u.len());
            for i in 0..x.len() {
                j[(i, i % u.len())] += u[i % u.len()].cos();
            }
            j
        }
    }

    pub struct Tracking;

    impl RunningCost for Tracking {
        fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
            x.norm_squared() + 0.5 * u.norm_squared() + (x[0] * u[0]).powi(2)
        }
    }

    pub fn half_step(horizon: usize) -> OcpProblem {
        OcpProblem::builder(
            DVector::zeros(2),
            2,
            horizon,
            Arc::new(HalfStep),
            Arc::new(Energy),
        )
        .build()
        .unwrap()
    }

    pub fn sin_step(n: usize, m: usize, horizon: usize) -> OcpProblem {
        let x0 = DVector::from_fn(n, |i, _| 0.1 * (i as f64 + 1.0));
        OcpProblem::builder(x0, m, horizon, Arc::new(SinStep), Arc::new(Tracking))
            .terminal_cost(Arc::new(SquaredNorm))
            .build()
            .unwrap()
    }
}
