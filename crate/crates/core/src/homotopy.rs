//! The parametrized homotopy
//!
//! ```text
//! ρ_a(λ, u, μ) = [ λ((∇J)ᵀ + (∇G)ᵀμ) + (1 − λ)(u − u⁰) ]
//!                [ K(λ, u, μ, b⁰, c⁰)                   ]
//! K_i = μ_i³ − |(1−λ)b⁰_i − G_i − μ_i|³ + ((1−λ)b⁰_i − G_i)³ − (1−λ)c⁰_i
//! ```
//!
//! with `a = (u⁰, b⁰, c⁰)`. At `λ = 1` it coincides with the KKT residual `α`;
//! at `λ = 0` its zero is `(u⁰, μ⁰)` with `μ⁰ > 0` unique.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::problem::StackedControl;
use crate::transcription::{cube_abs, d_cube_abs, NlpView};

/// `K_i` from its scalar ingredients, `g = G_i(λ, u)`.
pub fn k_value(lambda: f64, g: f64, mu: f64, b: f64, c: f64) -> f64 {
    let d = (1.0 - lambda) * b - g;
    mu * mu * mu - cube_abs(d - mu) + d * d * d - (1.0 - lambda) * c
}

/// `∂K_i/∂μ_i = 3μ² + 3t|t|`, `t = (1−λ)b − g − μ`.
pub fn k_dmu(lambda: f64, g: f64, mu: f64, b: f64) -> f64 {
    let t = (1.0 - lambda) * b - g - mu;
    3.0 * mu * mu + d_cube_abs(t)
}

/// `∂K_i/∂d` where `d = (1−λ)b − g`.
fn k_dd(lambda: f64, g: f64, mu: f64, b: f64) -> f64 {
    let d = (1.0 - lambda) * b - g;
    3.0 * d * d - d_cube_abs(d - mu)
}

/// The triple `a = (u⁰, b⁰, c⁰)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyParams {
    pub u0: StackedControl,
    pub b0: DVector<f64>,
    pub c0: DVector<f64>,
}

impl HomotopyParams {
    pub fn new(u0: StackedControl, b0: DVector<f64>, c0: DVector<f64>) -> Result<Self> {
        check_dim("c0", b0.len(), c0.len())?;
        if let Some(i) = b0.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams(format!(
                "b0[{i}] = {} is not positive",
                b0[i]
            )));
        }
        if let Some(i) = c0.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams(format!(
                "c0[{i}] = {} is not positive",
                c0[i]
            )));
        }
        Ok(Self { u0, b0, c0 })
    }

    /// `b⁰ = β·1ˢ`, `c⁰ = γ·1ˢ`.
    pub fn uniform(u0: StackedControl, s: usize, beta: f64, gamma: f64) -> Result<Self> {
        Self::new(
            u0,
            DVector::from_element(s, beta),
            DVector::from_element(s, gamma),
        )
    }
}

/// A point `w = (λ, u, μ)`, stored flat in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub lambda: f64,
    pub u: StackedControl,
    pub mu: DVector<f64>,
}

impl CurvePoint {
    pub fn to_vector(&self) -> DVector<f64> {
        let (r, s) = (self.u.len(), self.mu.len());
        let mut w = DVector::zeros(1 + r + s);
        w[0] = self.lambda;
        w.rows_mut(1, r).copy_from(&self.u.0);
        w.rows_mut(1 + r, s).copy_from(&self.mu);
        w
    }

    pub fn from_vector(w: &DVector<f64>, r: usize) -> Self {
        let s = w.len() - 1 - r;
        Self {
            lambda: w[0],
            u: StackedControl(w.rows(1, r).into_owned()),
            mu: w.rows(1 + r, s).into_owned(),
        }
    }
}

/// How the `u`-derivative of the Lagrangian gradient is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// Central differences of `u ↦ (∇J)ᵀ + (∇G)ᵀμ`.
    #[default]
    FiniteDifference,
    /// Exact second derivatives; requires affine dynamics and Hessians on every term.
    Exact,
}

/// `ρ_a` bound to a program and a parameter triple.
#[derive(Debug, Clone)]
pub struct OcpHomotopy {
    view: NlpView,
    params: HomotopyParams,
    hessian: HessianMode,
}

impl OcpHomotopy {
    /// Checks dimensions, `b⁰, c⁰ > 0`, and `G(0, u⁰) < b⁰`.
    pub fn new(view: NlpView, params: HomotopyParams) -> Result<Self> {
        check_dim("u0", view.r(), params.u0.len())?;
        check_dim("b0", view.s(), params.b0.len())?;
        let g0 = view.evaluate_g(0.0, &params.u0)?;
        if let Some(i) = (0..view.s()).find(|&i| !(g0[i] < params.b0[i])) {
            return Err(Error::InvalidParams(format!(
                "b0 is not in B0(u0): G_{i}(0, u0) = {} >= b0_{i} = {}",
                g0[i], params.b0[i]
            )));
        }
        Ok(Self {
            view,
            params,
            hessian: HessianMode::default(),
        })
    }

    pub fn with_hessian_mode(mut self, mode: HessianMode) -> Self {
        self.hessian = mode;
        self
    }

    pub fn view(&self) -> &NlpView {
        &self.view
    }

    pub fn params(&self) -> &HomotopyParams {
        &self.params
    }

    pub fn r(&self) -> usize {
        self.view.r()
    }

    pub fn s(&self) -> usize {
        self.view.s()
    }

    fn split(&self, w: &DVector<f64>) -> Result<CurvePoint> {
        check_dim("curve point", 1 + self.r() + self.s(), w.len())?;
        Ok(CurvePoint::from_vector(w, self.r()))
    }

    /// `K_i(λ, u, μ, b⁰, c⁰)`.
    pub fn k_component(&self, i: usize, point: &CurvePoint) -> Result<f64> {
        let g = self.view.evaluate_g(point.lambda, &point.u)?;
        Ok(k_value(
            point.lambda,
            g[i],
            point.mu[i],
            self.params.b0[i],
            self.params.c0[i],
        ))
    }

    /// `ρ_a(w)`.
    pub fn rho(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.split(w)?;
        let (r, s) = (self.r(), self.s());
        let lambda = p.lambda;
        let nlp = self.view.evaluate(lambda, &p.u)?;
        let grad = self.view.cost_gradient_at(&nlp, &p.u) + nlp.jac.tr_mul(&p.mu);
        let mut out = DVector::zeros(r + s);
        let blend = grad * lambda + (&p.u.0 - &self.params.u0.0) * (1.0 - lambda);
        out.rows_mut(0, r).copy_from(&blend);
        for i in 0..s {
            out[r + i] = k_value(
                lambda,
                nlp.g[i],
                p.mu[i],
                self.params.b0[i],
                self.params.c0[i],
            );
        }
        if let Some(index) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "homotopy residual",
                index,
            });
        }
        Ok(out)
    }

    /// `∇ρ_a(w)`, `(r+s) × (1+r+s)`, columns ordered `(λ | u | μ)`.
    pub fn rho_jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.split(w)?;
        let (r, s) = (self.r(), self.s());
        let lambda = p.lambda;
        let nlp = self.view.evaluate(lambda, &p.u)?;
        let grad = self.view.cost_gradient_at(&nlp, &p.u) + nlp.jac.tr_mul(&p.mu);
        let hess = match self.hessian {
            HessianMode::FiniteDifference => {
                self.view.lagrangian_hessian_fd(lambda, &p.u, &p.mu)?
            }
            HessianMode::Exact => self
                .view
                .lagrangian_hessian_exact(&nlp, &p.u, &p.mu)
                .ok_or_else(|| {
                    Error::InvalidProblem(
                        "exact Hessian requested but the problem does not provide one".into(),
                    )
                })?,
        };
        let grad_dl = self
            .view
            .lagrangian_gradient_lambda_derivative(&nlp, &p.u, &p.mu);
        let g_dl = self.view.g_lambda_derivative(&nlp, &p.u);

        let mut jac = DMatrix::zeros(r + s, 1 + r + s);
        let col_lambda = &grad + grad_dl * lambda - (&p.u.0 - &self.params.u0.0);
        jac.view_mut((0, 0), (r, 1)).copy_from(&col_lambda);
        let mut uu = hess * lambda;
        for j in 0..r {
            uu[(j, j)] += 1.0 - lambda;
        }
        jac.view_mut((0, 1), (r, r)).copy_from(&uu);
        jac.view_mut((0, 1 + r), (r, s))
            .copy_from(&(nlp.jac.transpose() * lambda));

        for i in 0..s {
            let (b, c, mu, g) = (self.params.b0[i], self.params.c0[i], p.mu[i], nlp.g[i]);
            let dd = k_dd(lambda, g, mu, b);
            jac[(r + i, 0)] = dd * (-b - g_dl[i]) + c;
            let row_u = nlp.jac.row(i) * -dd;
            jac.view_mut((r + i, 1), (1, r)).copy_from(&row_u);
            jac[(r + i, 1 + r + i)] = k_dmu(lambda, g, mu, b);
        }
        if let Some(index) = jac.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "homotopy Jacobian",
                index,
            });
        }
        Ok(jac)
    }

    /// The unique `μ⁰ > 0` with `K(0, u⁰, μ⁰, b⁰, c⁰) = 0`.
    pub fn solve_initial_multipliers(&self) -> Result<DVector<f64>> {
        let g0 = self.view.evaluate_g(0.0, &self.params.u0)?;
        let mut mu = DVector::zeros(self.s());
        for i in 0..self.s() {
            mu[i] = initial_multiplier_bisection(g0[i], self.params.b0[i], self.params.c0[i])
                .map_err(|reason| Error::Bracketing { index: i, reason })?;
        }
        Ok(mu)
    }

    /// `(0, u⁰, μ⁰)`.
    pub fn start_point(&self) -> Result<CurvePoint> {
        Ok(CurvePoint {
            lambda: 0.0,
            u: self.params.u0.clone(),
            mu: self.solve_initial_multipliers()?,
        })
    }

    /// `min_i min(μ_i, (1−λ)b⁰_i − G_i(λ, u))`.
    pub fn curve_margin(&self, w: &DVector<f64>) -> Result<f64> {
        let p = self.split(w)?;
        let g = self.view.evaluate_g(p.lambda, &p.u)?;
        let slack = (0..self.s())
            .map(|i| (1.0 - p.lambda) * self.params.b0[i] - g[i])
            .fold(f64::INFINITY, f64::min);
        Ok(slack.min(p.mu.min()))
    }
}

const MAX_DOUBLINGS: usize = 200;

/// Upper end of a bracket for `μ ↦ K_i(0, ·)` found by doubling from 1.
fn upper_bracket(k: impl Fn(f64) -> f64) -> std::result::Result<f64, String> {
    let mut hi = 1.0;
    for _ in 0..MAX_DOUBLINGS {
        if k(hi) > 0.0 {
            return Ok(hi);
        }
        hi *= 2.0;
    }
    Err(format!("K stayed nonpositive up to mu = {hi:e}"))
}

fn check_initial_inputs(g: f64, b: f64, c: f64) -> std::result::Result<(), String> {
    if !(b - g > 0.0) {
        return Err(format!("G(0, u0) = {g} is not below b0 = {b}"));
    }
    if !(c > 0.0) {
        return Err(format!("c0 = {c} is not positive"));
    }
    Ok(())
}

/// Root of `μ ↦ K_i(0, u⁰, μ)` by bisection on `[0, μ̄]` to width `1e−12`,
/// followed by two guarded Newton polish steps.
pub fn initial_multiplier_bisection(g: f64, b: f64, c: f64) -> std::result::Result<f64, String> {
    check_initial_inputs(g, b, c)?;
    let k = |mu: f64| k_value(0.0, g, mu, b, c);
    let (mut lo, mut hi) = (0.0, upper_bracket(k)?);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if k(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..2 {
        let slope = k_dmu(0.0, g, mu, b);
        if slope > 0.0 {
            let next = mu - k(mu) / slope;
            if next > lo - 1e-12 && next < hi + 1e-12 {
                mu = next;
            }
        }
    }
    Ok(mu)
}

/// Independent root finder for the same scalar equation: Newton from the
/// upper end of the bracket, falling back to bisection whenever a step leaves
/// the current bracket or fails to halve the residual.
pub fn initial_multiplier_newton(g: f64, b: f64, c: f64) -> std::result::Result<f64, String> {
    check_initial_inputs(g, b, c)?;
    let k = |mu: f64| k_value(0.0, g, mu, b, c);
    let (mut lo, mut hi) = (0.0, upper_bracket(k)?);
    let mut mu = hi;
    for _ in 0..200 {
        let f = k(mu);
        if f == 0.0 {
            return Ok(mu);
        }
        if f > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
        let slope = k_dmu(0.0, g, mu, b);
        let newton = mu - f / slope;
        let next = if slope > 0.0 && newton > lo && newton < hi && k(newton).abs() < 0.5 * f.abs() {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - mu).abs() <= 1e-15 * (1.0 + mu.abs()) || hi - lo <= 1e-15 {
            return Ok(next);
        }
        mu = next;
    }
    Ok(mu)
}
