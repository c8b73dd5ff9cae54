//! Flattening of the control problem into a finite-dimensional program in the
//! stacked control: constraint vector `G(λ, u) ∈ ℝˢ`, its Jacobian, the
//! convex/nonconvex row partition, and the KKT residual `α`.
//!
//! Rows are ordered family by family, state families first, each family
//! enumerated over its sorted time mask. With full masks this reproduces
//! `i = j·N + (k−1)` for state family `j` at `k ∈ 1..=N` and
//! `i = p·N + l·N + k` for input family `l` at control index `k ∈ 0..N`
//! (zero-based `i`, `j`, `l`).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::problem::{Convexity, OcpProblem, SensitivityTensor, StackedControl, StateTrajectory};

/// `|t|³`.
pub fn cube_abs(t: f64) -> f64 {
    let a = t.abs();
    a * a * a
}

/// `d/dt |t|³ = 3 t |t|`, zero at the origin.
pub fn d_cube_abs(t: f64) -> f64 {
    3.0 * t * t.abs()
}

/// Complementarity row `μ³ − |−g − μ|³ + (−g)³`, zero iff `g ≤ 0`, `μ ≥ 0`, `μ g = 0`.
pub fn complementarity(g: f64, mu: f64) -> f64 {
    mu * mu * mu - cube_abs(-g - mu) + (-g) * (-g) * (-g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    State,
    Input,
}

/// One scheduled constraint: family `family` of the given kind at time `k`
/// (state index `1..=N` or control index `0..N`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub kind: FamilyKind,
    pub family: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct ConstraintIndexMap {
    rows: Vec<RowKey>,
    lookup: HashMap<RowKey, usize>,
}

impl ConstraintIndexMap {
    pub fn build(problem: &OcpProblem) -> Self {
        let state = problem
            .state_constraints()
            .iter()
            .enumerate()
            .flat_map(|(j, fam)| {
                fam.mask.iter().map(move |&k| RowKey {
                    kind: FamilyKind::State,
                    family: j,
                    k,
                })
            });
        let input = problem
            .input_constraints()
            .iter()
            .enumerate()
            .flat_map(|(l, fam)| {
                fam.mask.iter().map(move |&k| RowKey {
                    kind: FamilyKind::Input,
                    family: l,
                    k,
                })
            });
        let rows: Vec<RowKey> = state.chain(input).collect();
        let lookup = rows.iter().enumerate().map(|(i, key)| (*key, i)).collect();
        Self { rows, lookup }
    }

    /// Number of scheduled rows `s`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> RowKey {
        self.rows[i]
    }

    pub fn rows(&self) -> &[RowKey] {
        &self.rows
    }

    pub fn flat_index(&self, key: RowKey) -> Option<usize> {
        self.lookup.get(&key).copied()
    }
}

/// Everything evaluated at one `(λ, u)`: rollout, sensitivities, constraint
/// values and their Jacobian.
#[derive(Debug, Clone)]
pub struct NlpPoint {
    pub lambda: f64,
    pub trajectory: StateTrajectory,
    pub sensitivities: SensitivityTensor,
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
}

/// The program `min J(u) s.t. G(λ, u) ≤ 0` induced by a control problem.
#[derive(Debug, Clone)]
pub struct NlpView {
    problem: OcpProblem,
    map: ConstraintIndexMap,
    convex: Vec<usize>,
    nonconvex: Vec<usize>,
}

/// Step for finite differencing the Lagrangian gradient in `u`.
pub fn hessian_fd_step(u: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + u.amax())
}

impl NlpView {
    pub fn new(problem: OcpProblem) -> Self {
        let map = ConstraintIndexMap::build(&problem);
        let (convex, nonconvex) = classify_indices(&problem, &map);
        Self {
            problem,
            map,
            convex,
            nonconvex,
        }
    }

    pub fn problem(&self) -> &OcpProblem {
        &self.problem
    }

    pub fn index_map(&self) -> &ConstraintIndexMap {
        &self.map
    }

    /// Decision dimension `r`.
    pub fn r(&self) -> usize {
        self.problem.decision_dim()
    }

    /// Constraint count `s`.
    pub fn s(&self) -> usize {
        self.map.len()
    }

    pub fn convex_rows(&self) -> &[usize] {
        &self.convex
    }

    pub fn nonconvex_rows(&self) -> &[usize] {
        &self.nonconvex
    }

    pub fn is_convex_row(&self, i: usize) -> bool {
        self.convex.binary_search(&i).is_ok()
    }

    pub fn family_name(&self, key: RowKey) -> &str {
        match key.kind {
            FamilyKind::State => &self.problem.state_constraints()[key.family].name,
            FamilyKind::Input => &self.problem.input_constraints()[key.family].name,
        }
    }

    fn g_row(&self, key: RowKey, lambda: f64, traj: &StateTrajectory, u: &StackedControl) -> f64 {
        let m = self.problem.control_dim();
        match key.kind {
            FamilyKind::State => self.problem.state_constraints()[key.family]
                .constraint
                .eval(lambda, &traj.states[key.k]),
            FamilyKind::Input => self.problem.input_constraints()[key.family]
                .constraint
                .eval(lambda, &u.block(key.k, m)),
        }
    }

    fn check_finite(&self, g: &DVector<f64>) -> Result<()> {
        if let Some(row) = g.iter().position(|v| !v.is_finite()) {
            let key = self.map.row(row);
            return Err(Error::NonFiniteConstraint {
                row,
                family: self.family_name(key).to_string(),
                k: key.k,
            });
        }
        Ok(())
    }

    fn constraints_of(
        &self,
        lambda: f64,
        traj: &StateTrajectory,
        u: &StackedControl,
    ) -> DVector<f64> {
        DVector::from_iterator(
            self.s(),
            self.map
                .rows()
                .iter()
                .map(|&key| self.g_row(key, lambda, traj, u)),
        )
    }

    /// `G(λ, u)`.
    pub fn evaluate_g(&self, lambda: f64, u: &StackedControl) -> Result<DVector<f64>> {
        let traj = self.problem.rollout(u)?;
        let g = self.constraints_of(lambda, &traj, u);
        self.check_finite(&g)?;
        Ok(g)
    }

    fn jacobian_of(
        &self,
        lambda: f64,
        traj: &StateTrajectory,
        sens: &SensitivityTensor,
        u: &StackedControl,
    ) -> DMatrix<f64> {
        let m = self.problem.control_dim();
        let mut jac = DMatrix::zeros(self.s(), self.r());
        for (i, key) in self.map.rows().iter().enumerate() {
            match key.kind {
                FamilyKind::State => {
                    let gx = self.problem.state_constraints()[key.family]
                        .constraint
                        .grad_x(lambda, &traj.states[key.k]);
                    jac.row_mut(i)
                        .copy_from(&sens.at(key.k).tr_mul(&gx).transpose());
                }
                FamilyKind::Input => {
                    let hu = self.problem.input_constraints()[key.family]
                        .constraint
                        .grad_u(lambda, &u.block(key.k, m));
                    jac.view_mut((i, key.k * m), (1, m))
                        .copy_from(&hu.transpose());
                }
            }
        }
        jac
    }

    /// `∇ᵤG(λ, u)`, `s × r`.
    pub fn gradient_g(&self, lambda: f64, u: &StackedControl) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(lambda, u)?.jac)
    }

    /// Rollout, sensitivities, `G` and `∇ᵤG` in one pass.
    pub fn evaluate(&self, lambda: f64, u: &StackedControl) -> Result<NlpPoint> {
        let (trajectory, sensitivities) = self.problem.rollout_with_sensitivities(u)?;
        let g = self.constraints_of(lambda, &trajectory, u);
        self.check_finite(&g)?;
        let jac = self.jacobian_of(lambda, &trajectory, &sensitivities, u);
        if let Some(idx) = jac.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "constraint Jacobian",
                index: idx,
            });
        }
        Ok(NlpPoint {
            lambda,
            trajectory,
            sensitivities,
            g,
            jac,
        })
    }

    /// `∇ᵤJ` at an evaluated point.
    pub fn cost_gradient_at(&self, point: &NlpPoint, u: &StackedControl) -> DVector<f64> {
        self.problem
            .cost_gradient_with(&point.trajectory, &point.sensitivities, u)
    }

    /// `(∇ᵤJ)ᵀ + (∇ᵤG)ᵀμ`.
    pub fn lagrangian_gradient(
        &self,
        lambda: f64,
        u: &StackedControl,
        mu: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("multiplier", self.s(), mu.len())?;
        let point = self.evaluate(lambda, u)?;
        Ok(self.cost_gradient_at(&point, u) + point.jac.tr_mul(mu))
    }

    /// `∂G/∂λ`.
    pub fn g_lambda_derivative(&self, point: &NlpPoint, u: &StackedControl) -> DVector<f64> {
        let m = self.problem.control_dim();
        let lambda = point.lambda;
        DVector::from_iterator(
            self.s(),
            self.map.rows().iter().map(|key| match key.kind {
                FamilyKind::State => self.problem.state_constraints()[key.family]
                    .constraint
                    .d_lambda(lambda, &point.trajectory.states[key.k]),
                FamilyKind::Input => self.problem.input_constraints()[key.family]
                    .constraint
                    .d_lambda(lambda, &u.block(key.k, m)),
            }),
        )
    }

    /// `∂/∂λ [(∇ᵤG)ᵀμ]`.
    pub fn lagrangian_gradient_lambda_derivative(
        &self,
        point: &NlpPoint,
        u: &StackedControl,
        mu: &DVector<f64>,
    ) -> DVector<f64> {
        let m = self.problem.control_dim();
        let lambda = point.lambda;
        let mut out = DVector::zeros(self.r());
        for (i, key) in self.map.rows().iter().enumerate() {
            if mu[i] == 0.0 {
                continue;
            }
            match key.kind {
                FamilyKind::State => {
                    let gxl = self.problem.state_constraints()[key.family]
                        .constraint
                        .grad_x_d_lambda(lambda, &point.trajectory.states[key.k]);
                    out += point.sensitivities.at(key.k).tr_mul(&gxl) * mu[i];
                }
                FamilyKind::Input => {
                    let hul = self.problem.input_constraints()[key.family]
                        .constraint
                        .grad_u_d_lambda(lambda, &u.block(key.k, m));
                    out.rows_mut(key.k * m, m).axpy(mu[i], &hul, 1.0);
                }
            }
        }
        out
    }

    /// Exact `∇²ᵤ[J + μᵀG]` when the dynamics are affine and every cost and
    /// constraint term exposes its Hessian; `None` otherwise.
    pub fn lagrangian_hessian_exact(
        &self,
        point: &NlpPoint,
        u: &StackedControl,
        mu: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let m = self.problem.control_dim();
        let mut hess =
            self.problem
                .cost_hessian_exact(&point.trajectory, &point.sensitivities, u)?;
        for (i, key) in self.map.rows().iter().enumerate() {
            match key.kind {
                FamilyKind::State => {
                    let h = self.problem.state_constraints()[key.family]
                        .constraint
                        .hessian_x(point.lambda, &point.trajectory.states[key.k])?;
                    if mu[i] != 0.0 {
                        let s = point.sensitivities.at(key.k);
                        hess += s.transpose() * h * s * mu[i];
                    }
                }
                FamilyKind::Input => {
                    let h = self.problem.input_constraints()[key.family]
                        .constraint
                        .hessian_u(point.lambda, &u.block(key.k, m))?;
                    if mu[i] != 0.0 {
                        let mut block = hess.view_mut((key.k * m, key.k * m), (m, m));
                        block += h * mu[i];
                    }
                }
            }
        }
        Some(hess)
    }

    /// `∇²ᵤ[J + μᵀG]` by central differences of the Lagrangian gradient.
    pub fn lagrangian_hessian_fd(
        &self,
        lambda: f64,
        u: &StackedControl,
        mu: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let r = self.r();
        let h = hessian_fd_step(&u.0);
        let mut hess = DMatrix::zeros(r, r);
        let mut probe = u.clone();
        for j in 0..r {
            probe.0[j] = u.0[j] + h;
            let plus = self.lagrangian_gradient(lambda, &probe, mu)?;
            probe.0[j] = u.0[j] - h;
            let minus = self.lagrangian_gradient(lambda, &probe, mu)?;
            probe.0[j] = u.0[j];
            hess.set_column(j, &((plus - minus) / (2.0 * h)));
        }
        Ok(hess)
    }

    /// KKT residual `α(λ, u, μ) ∈ ℝ^{r+s}`: stationarity rows followed by the
    /// cubic complementarity rows.
    pub fn kkt_residual_alpha(
        &self,
        lambda: f64,
        u: &StackedControl,
        mu: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("multiplier", self.s(), mu.len())?;
        let point = self.evaluate(lambda, u)?;
        let stationarity = self.cost_gradient_at(&point, u) + point.jac.tr_mul(mu);
        let mut out = DVector::zeros(self.r() + self.s());
        out.rows_mut(0, self.r()).copy_from(&stationarity);
        for i in 0..self.s() {
            out[self.r() + i] = complementarity(point.g[i], mu[i]);
        }
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "KKT residual",
                index,
            });
        }
        Ok(out)
    }
}

/// Partition the rows by declared convexity: `(convex, nonconvex)`, both sorted.
pub fn classify_indices(
    problem: &OcpProblem,
    map: &ConstraintIndexMap,
) -> (Vec<usize>, Vec<usize>) {
    let mut convex = Vec::new();
    let mut nonconvex = Vec::new();
    for (i, key) in map.rows().iter().enumerate() {
        let convexity = match key.kind {
            FamilyKind::State => problem.state_constraints()[key.family].convexity,
            FamilyKind::Input => problem.input_constraints()[key.family].convexity,
        };
        match convexity {
            Convexity::Convex => convex.push(i),
            Convexity::Nonconvex => nonconvex.push(i),
        }
    }
    (convex, nonconvex)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pathplan::ControlEnergy;
    use crate::pathplan::{build_problem, BoxRow, DiscAvoidance, LinearStep, PathPlanConfig};
    use crate::problem::Family;

    fn default_view() -> NlpView {
        NlpView::new(build_problem(&PathPlanConfig::default()).unwrap())
    }

    fn random_control(rng: &mut ChaCha8Rng, r: usize, scale: f64) -> StackedControl {
        StackedControl(DVector::from_fn(r, |_, _| rng.random_range(-scale..=scale)))
    }

    // three state families and one input family, all on full masks
    fn full_mask_problem() -> OcpProblem {
        let n = 20;
        let disc = |c: [f64; 2]| {
            Arc::new(DiscAvoidance {
                centre: DVector::from_row_slice(&c),
                weight: 1.0,
            })
        };
        OcpProblem::builder(
            DVector::zeros(2),
            2,
            n,
            Arc::new(LinearStep { gain: 0.5 }),
            Arc::new(ControlEnergy),
        )
        .state_constraint(Family::new(
            "a",
            disc([1.0, 0.0]),
            1..=n,
            Convexity::Nonconvex,
        ))
        .state_constraint(Family::new(
            "b",
            disc([0.0, 1.0]),
            1..=n,
            Convexity::Nonconvex,
        ))
        .state_constraint(Family::new(
            "c",
            disc([1.0, 1.0]),
            1..=n,
            Convexity::Nonconvex,
        ))
        .input_constraint(Family::new(
            "box",
            Arc::new(BoxRow {
                axis: 0,
                sign: 1.0,
                bound: 1.0,
            }),
            0..n,
            Convexity::Convex,
        ))
        .build()
        .unwrap()
    }

    #[test]
    fn index_map_with_full_masks() {
        let map = ConstraintIndexMap::build(&full_mask_problem());
        assert_eq!(map.len(), 80);
        let state = |family, k| RowKey {
            kind: FamilyKind::State,
            family,
            k,
        };
        // family 1 at k = 1, family 2 at k = 3, first input slot
        assert_eq!(map.flat_index(state(0, 1)), Some(0));
        assert_eq!(map.flat_index(state(1, 3)), Some(22));
        let input = RowKey {
            kind: FamilyKind::Input,
            family: 0,
            k: 0,
        };
        assert_eq!(map.flat_index(input), Some(60));
        for j in 0..3 {
            for k in 1..=20 {
                assert_eq!(map.flat_index(state(j, k)), Some(j * 20 + k - 1));
            }
        }
        for k in 0..20 {
            let key = RowKey { k, ..input };
            assert_eq!(map.flat_index(key), Some(60 + k));
        }
    }

    #[test]
    fn index_map_round_trips() {
        let map = default_view().index_map().clone();
        for (i, key) in map.rows().iter().enumerate() {
            assert_eq!(map.flat_index(*key), Some(i));
            assert_eq!(map.row(i), *key);
        }
        let missing = RowKey {
            kind: FamilyKind::State,
            family: 0,
            k: 20,
        };
        assert_eq!(map.flat_index(missing), None);
    }

    #[test]
    fn obstacle_rows_are_nonpositive_at_lambda_zero() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = random_control(&mut rng, view.r(), 2.0);
            let g = view.evaluate_g(0.0, &u).unwrap();
            for &i in view.nonconvex_rows() {
                assert!(g[i] <= 0.0);
            }
        }
    }

    #[test]
    fn obstacle_row_at_centre_equals_radius_squared() {
        let view = default_view();
        // u_0 = u_1 = (1, 1), u_2..u_6 = (1, 0) puts x_7 at (3.5, 1)
        // then u_7 = u_8 = (0, 1) and u_9 = (0, 1) puts x_10 at (3.5, 2.5)
        let mut u = StackedControl::zeros(view.r());
        let plan: [(usize, [f64; 2]); 10] = [
            (0, [1.0, 1.0]),
            (1, [1.0, 1.0]),
            (2, [1.0, 0.0]),
            (3, [1.0, 0.0]),
            (4, [1.0, 0.0]),
            (5, [1.0, 0.0]),
            (6, [1.0, 0.0]),
            (7, [0.0, 1.0]),
            (8, [0.0, 1.0]),
            (9, [0.0, 1.0]),
        ];
        for (k, v) in plan {
            u.0[2 * k] = v[0];
            u.0[2 * k + 1] = v[1];
        }
        let traj = view.problem().rollout(&u).unwrap();
        assert_relative_eq!(traj.states[10][0], 3.5);
        assert_relative_eq!(traj.states[10][1], 2.5);
        let g = view.evaluate_g(1.0, &u).unwrap();
        let row = view
            .index_map()
            .flat_index(RowKey {
                kind: FamilyKind::State,
                family: 0,
                k: 10,
            })
            .unwrap();
        assert_relative_eq!(g[row], 1.96, epsilon = 1e-12);
    }

    #[test]
    fn box_rows_at_zero_control() {
        let view = default_view();
        let u = StackedControl::zeros(view.r());
        for lambda in [0.0, 0.3, 1.0] {
            let g = view.evaluate_g(lambda, &u).unwrap();
            for i in 39..119 {
                assert_eq!(g[i], -1.0);
            }
        }
    }

    #[test]
    fn convexity_partition() {
        let view = default_view();
        assert_eq!(
            view.nonconvex_rows(),
            (0..38).collect::<Vec<_>>().as_slice()
        );
        assert_eq!(view.convex_rows(), (38..119).collect::<Vec<_>>().as_slice());
        assert!(view.is_convex_row(38));
        assert!(!view.is_convex_row(5));
    }

    #[test]
    fn gradient_structure_is_causal() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_control(&mut rng, view.r(), 1.0);
        let jac = view.gradient_g(0.7, &u).unwrap();
        for (i, key) in view.index_map().rows().iter().enumerate() {
            for j in 0..20 {
                let block = jac.view((i, 2 * j), (1, 2));
                let nonzero = block.iter().any(|v| *v != 0.0);
                match key.kind {
                    FamilyKind::State => {
                        if j >= key.k {
                            assert!(!nonzero, "row {i} block {j}");
                        }
                    }
                    FamilyKind::Input => {
                        if j != key.k {
                            assert!(!nonzero, "row {i} block {j}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let u = random_control(&mut rng, view.r(), 1.0);
            let lambda = rng.random_range(0.0..=1.0);
            let jac = view.gradient_g(lambda, &u).unwrap();
            let h = 1e-6;
            for j in 0..view.r() {
                let mut up = u.clone();
                up.0[j] += h;
                let mut dn = u.clone();
                dn.0[j] -= h;
                let fd = (view.evaluate_g(lambda, &up).unwrap()
                    - view.evaluate_g(lambda, &dn).unwrap())
                    / (2.0 * h);
                for i in 0..view.s() {
                    let scale = 1.0 + jac[(i, j)].abs();
                    assert!((fd[i] - jac[(i, j)]).abs() <= 1e-6 * scale);
                }
            }
        }
    }

    #[test]
    fn lambda_derivative_of_g_matches_finite_differences() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_control(&mut rng, view.r(), 1.0);
        let point = view.evaluate(0.4, &u).unwrap();
        let gl = view.g_lambda_derivative(&point, &u);
        let fd = (view.evaluate_g(0.4 + 1e-6, &u).unwrap()
            - view.evaluate_g(0.4 - 1e-6, &u).unwrap())
            / 2e-6;
        for i in 0..view.s() {
            assert!((gl[i] - fd[i]).abs() < 1e-6);
        }
        assert_relative_eq!(gl[0], 1.96, epsilon = 1e-14);
    }

    #[test]
    fn exact_and_fd_hessians_agree() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_control(&mut rng, view.r(), 1.0);
        let mu = DVector::from_fn(view.s(), |_, _| rng.random_range(0.0..=2.0));
        let point = view.evaluate(0.5, &u).unwrap();
        let exact = view.lagrangian_hessian_exact(&point, &u, &mu).unwrap();
        let fd = view.lagrangian_hessian_fd(0.5, &u, &mu).unwrap();
        assert!((&exact - &fd).amax() < 1e-5 * (1.0 + exact.amax()));
        assert_relative_eq!(exact.clone(), exact.transpose(), epsilon = 1e-12);
    }

    #[test]
    fn complementarity_examples() {
        assert_eq!(complementarity(-1.0, 0.0), 0.0);
        assert_eq!(complementarity(0.0, 1.0), 0.0);
        assert_eq!(complementarity(-1.0, 1.0), 2.0);
    }

    #[test]
    fn alpha_vanishes_exactly_on_kkt_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let kind = rng.random_range(0..5);
            let a: f64 = rng.random_range(1e-3..=5.0);
            let b: f64 = rng.random_range(1e-3..=5.0);
            let (g, mu, kkt) = match kind {
                0 => (-a, 0.0, true),
                1 => (0.0, a, true),
                2 => (0.0, 0.0, true),
                3 => (-a, b, false),
                _ => {
                    if rng.random_bool(0.5) {
                        (a, b * rng.random_range(0.0..=1.0), false)
                    } else {
                        (-a * rng.random_range(0.0..=1.0), -b, false)
                    }
                }
            };
            let row = complementarity(g, mu);
            if kkt {
                assert!(row.abs() <= 1e-14, "g={g} mu={mu} row={row}");
            } else {
                assert!(row.abs() > 1e-14, "g={g} mu={mu} row={row}");
            }
        }
    }

    #[test]
    fn alpha_layout() {
        let view = default_view();
        let u = StackedControl::zeros(view.r());
        let mu = DVector::zeros(view.s());
        let alpha = view.kkt_residual_alpha(1.0, &u, &mu).unwrap();
        assert_eq!(alpha.len(), 159);
        // zero control: zero cost gradient, every inactive row with zero multiplier except
        // the terminal row, which is violated
        assert!(alpha.rows(0, 40).amax() == 0.0);
        let g = view.evaluate_g(1.0, &u).unwrap();
        for i in 0..view.s() {
            assert_eq!(alpha[40 + i], complementarity(g[i], 0.0));
        }
        assert!(alpha[40 + 38] != 0.0);
        assert!(view
            .kkt_residual_alpha(1.0, &u, &DVector::zeros(3))
            .is_err());
    }

    #[test]
    fn convex_rows_satisfy_midpoint_inequality() {
        let view = default_view();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let u = random_control(&mut rng, view.r(), 2.0);
            let v = random_control(&mut rng, view.r(), 2.0);
            let mid = StackedControl((&u.0 + &v.0) * 0.5);
            let lambda = rng.random_range(0.0..=1.0);
            let gu = view.evaluate_g(lambda, &u).unwrap();
            let gv = view.evaluate_g(lambda, &v).unwrap();
            let gm = view.evaluate_g(lambda, &mid).unwrap();
            for &i in view.convex_rows() {
                assert!(gm[i] <= 0.5 * (gu[i] + gv[i]) + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn complementarity_is_zero_for_inactive_rows(g in -10.0f64..-1e-6) {
            prop_assert!(complementarity(g, 0.0).abs() <= 1e-12 * (1.0 + g.abs().powi(3)));
        }

        #[test]
        fn d_cube_abs_is_the_derivative(t in -3.0f64..3.0) {
            let h = 1e-6;
            let fd = (cube_abs(t + h) - cube_abs(t - h)) / (2.0 * h);
            prop_assert!((fd - d_cube_abs(t)).abs() < 1e-6);
        }
    }
}
