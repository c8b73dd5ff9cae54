//! Predictor-corrector tracking of a homotopy zero curve from `λ = 0` to `λ = 1`.
//!
//! Each step computes the unit tangent `t` spanning `ker ∇ρ(w)`, oriented so
//! that `det [∇ρ(w); tᵀ] > 0`, takes an Euler step `v = w + h t`, and corrects
//! back to the curve by Newton's method on `[ρ(v + z); tᵀz] = 0`. `λ` is free to
//! decrease along the way. When a corrected point lands at or beyond `λ = 1`,
//! the crossing is refined with `λ` frozen at one.

use std::io::Write;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::diagnostics::{verify_kkt, CheckStatus, KktResiduals};
use crate::error::{Error, Result};
use crate::homotopy::{CurvePoint, HomotopyParams, OcpHomotopy};
use crate::problem::StackedControl;
use crate::transcription::NlpView;

/// A smooth map `ρ : ℝ^{1+d} → ℝ^d` whose first coordinate is `λ`.
pub trait Homotopy {
    /// Number of equations `d`.
    fn dim(&self) -> usize;

    fn residual(&self, w: &DVector<f64>) -> Result<DVector<f64>>;

    /// `d × (d + 1)` Jacobian, `λ` column first.
    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Smallest quantity that must stay nonnegative along the curve, if any.
    fn margin(&self, _w: &DVector<f64>) -> Option<f64> {
        None
    }
}

impl Homotopy for OcpHomotopy {
    fn dim(&self) -> usize {
        self.r() + self.s()
    }

    fn residual(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.rho(w)
    }

    fn jacobian(&self, w: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.rho_jacobian(w)
    }

    fn margin(&self, w: &DVector<f64>) -> Option<f64> {
        self.curve_margin(w).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Base predictor step `h`.
    pub step_size: f64,
    pub corrector_tol: f64,
    pub corrector_max_iters: usize,
    pub max_steps: usize,
    pub min_step: f64,
    /// Largest `λ` a corrected point may reach before the step is retried shorter.
    pub overshoot_cap: f64,
    /// Required `‖ρ(1, ·)‖∞` after endpoint refinement.
    pub endpoint_tol: f64,
    /// Tolerance for the final KKT verification.
    pub kkt_tol: f64,
    /// Numerical rank is checked every this many accepted steps (0 disables).
    pub rank_check_stride: usize,
    pub rank_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            corrector_tol: 1e-10,
            corrector_max_iters: 25,
            max_steps: 10_000,
            min_step: 1e-6,
            overshoot_cap: 1.1,
            endpoint_tol: 1e-10,
            kkt_tol: 1e-6,
            rank_check_stride: 10,
            rank_threshold: 1e-10,
        }
    }
}

impl TrackerConfig {
    pub fn with_step(step_size: f64) -> Self {
        Self {
            step_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.corrector_tol,
            self.min_step,
            self.endpoint_tol,
            self.kkt_tol,
            self.rank_threshold,
        ]
        .iter()
        .all(|&v| v > 0.0);
        if !(self.step_size > self.min_step) || !positive {
            return Err(Error::InvalidParams(
                "tracker needs step_size > min_step and positive tolerances".into(),
            ));
        }
        if !(self.overshoot_cap > 1.0) {
            return Err(Error::InvalidParams("overshoot_cap must exceed 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Converged,
    MaxSteps,
    CorrectorFailed,
    StepUnderflow,
    RankDeficient,
}

/// One accepted predictor-corrector step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub lambda: f64,
    /// Cumulative `Σ‖Δw‖`.
    pub arclen: f64,
    pub res_inf: f64,
    pub tangent_lambda: f64,
    pub min_margin: Option<f64>,
    pub corrector_iters: usize,
    /// `σ_min/σ_max` of `∇ρ` when sampled at this step.
    pub rank_ratio: Option<f64>,
    pub point: DVector<f64>,
}

pub const TRACE_HEADER: &str =
    "iter,lambda,arclen,res_inf,tangent_lambda,min_margin,corrector_iters";

/// Writes the trace as CSV. With `full`, appends `u_*` then `mu_*` columns.
pub fn write_trace_csv<W: Write>(
    out: &mut W,
    trace: &[TraceRecord],
    r: usize,
    full: bool,
) -> std::io::Result<()> {
    write!(out, "{TRACE_HEADER}")?;
    let s = trace.first().map_or(0, |t| t.point.len() - 1 - r);
    if full {
        for i in 0..r {
            write!(out, ",u_{i}")?;
        }
        for i in 0..s {
            write!(out, ",mu_{i}")?;
        }
    }
    writeln!(out)?;
    for rec in trace {
        let margin = rec
            .min_margin
            .map_or_else(|| "nan".to_string(), |m| format!("{m:e}"));
        write!(
            out,
            "{},{:.17e},{:.17e},{:e},{:.17e},{},{}",
            rec.iter,
            rec.lambda,
            rec.arclen,
            rec.res_inf,
            rec.tangent_lambda,
            margin,
            rec.corrector_iters
        )?;
        if full {
            for v in rec.point.iter().skip(1) {
                write!(out, ",{v:.17e}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Oriented unit tangent and whether it reversed relative to the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tangent {
    pub t: DVector<f64>,
    pub continuity_warning: bool,
}

/// Sign of `det(a)` from an LU factorization; `0` when singular.
pub fn det_sign(a: &DMatrix<f64>) -> f64 {
    let lu = a.clone().lu();
    let u = lu.u();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let mut sign: f64 = lu.p().determinant();
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d.abs() <= scale * 1e-300 || d == 0.0 {
            return 0.0;
        }
        sign *= d.signum();
    }
    sign
}

/// `σ_min/σ_max` of a matrix.
pub fn rank_ratio(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

fn augmented(jac: &DMatrix<f64>, t: &DVector<f64>) -> DMatrix<f64> {
    let d = jac.nrows();
    let mut a = DMatrix::zeros(d + 1, d + 1);
    a.view_mut((0, 0), (d, d + 1)).copy_from(jac);
    a.row_mut(d).copy_from(&t.transpose());
    a
}

/// Unit vector spanning `ker J` for a `d × (d+1)` matrix `J`, oriented so that
/// `det [J; tᵀ] > 0`.
pub fn tangent(jac: &DMatrix<f64>, prev: Option<&DVector<f64>>) -> Result<Tangent> {
    tangent_oriented(jac, 1.0, prev)
}

/// As [`tangent`], but with `sign(det [J; tᵀ]) = orientation`.
pub fn tangent_oriented(
    jac: &DMatrix<f64>,
    orientation: f64,
    prev: Option<&DVector<f64>>,
) -> Result<Tangent> {
    let d = jac.nrows();
    if jac.ncols() != d + 1 {
        return Err(Error::Dimension {
            what: "tangent Jacobian columns",
            expected: d + 1,
            got: jac.ncols(),
        });
    }
    // QR of the square [Jᵀ | 0]: the last column of Q is orthogonal to every row of J.
    let mut padded = DMatrix::zeros(d + 1, d + 1);
    padded
        .view_mut((0, 0), (d + 1, d))
        .copy_from(&jac.transpose());
    let qr = padded.qr();
    let r = qr.r();
    let diag_max = (0..d).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let diag_min = (0..d)
        .map(|i| r[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if d > 0 && !(diag_min > diag_max * 1e-14) {
        return Err(Error::RankDeficient {
            ratio: if diag_max > 0.0 {
                diag_min / diag_max
            } else {
                0.0
            },
        });
    }
    let q = qr.q();
    let mut t: DVector<f64> = q.column(d).into_owned();
    t /= t.norm();
    let sign = det_sign(&augmented(jac, &t));
    if sign == 0.0 {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    if sign * orientation < 0.0 {
        t = -t;
    }
    let continuity_warning = prev.is_some_and(|p| t.dot(p) <= 0.0);
    if continuity_warning {
        warn!("tangent orientation reverses relative to the previous step; keeping the determinant sign");
    }
    Ok(Tangent {
        t,
        continuity_warning,
    })
}

/// Determinant sign that makes `λ` increase along the tangent at `J`; the
/// tracker keeps this sign for the whole curve.
pub fn start_orientation(jac: &DMatrix<f64>) -> f64 {
    match tangent(jac, None) {
        Ok(t0) if t0.t[0] < 0.0 => -1.0,
        _ => 1.0,
    }
}

/// Euler predictor `w + h t`.
pub fn predict(w: &DVector<f64>, t: &DVector<f64>, h: f64) -> DVector<f64> {
    w + t * h
}

/// Corrected point and the number of Newton iterations it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub point: DVector<f64>,
    pub iters: usize,
    pub res_inf: f64,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 20;

/// Damped Newton on `[ρ(v + z); tᵀz] = 0` with Armijo backtracking on the
/// squared residual norm.
pub fn correct<H: Homotopy + ?Sized>(
    homotopy: &H,
    v: &DVector<f64>,
    t: &DVector<f64>,
    config: &TrackerConfig,
) -> Result<Correction> {
    let d = homotopy.dim();
    let mut z = DVector::zeros(d + 1);
    let mut rho = homotopy.residual(v)?;
    let merit = |rho: &DVector<f64>, z: &DVector<f64>| rho.norm_squared() + t.dot(z).powi(2);
    for iter in 0..=config.corrector_max_iters {
        let res_inf = rho.amax();
        if res_inf <= config.corrector_tol && t.dot(&z).abs() <= 1e-9 {
            return Ok(Correction {
                point: v + z,
                iters: iter,
                res_inf,
            });
        }
        if iter == config.corrector_max_iters {
            break;
        }
        let w = v + &z;
        let jac = homotopy.jacobian(&w)?;
        let a = augmented(&jac, t);
        let mut rhs = DVector::zeros(d + 1);
        rhs.rows_mut(0, d).copy_from(&(-&rho));
        rhs[d] = -t.dot(&z);
        let step = a.lu().solve(&rhs).ok_or(Error::CorrectorFailed {
            residual: res_inf,
            iters: iter,
        })?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorrectorFailed {
                residual: res_inf,
                iters: iter,
            });
        }
        let phi = merit(&rho, &z);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial_z = &z + &step * alpha;
            if let Ok(trial_rho) = homotopy.residual(&(v + &trial_z)) {
                if merit(&trial_rho, &trial_z) <= (1.0 - 2.0 * ARMIJO_C * alpha) * phi {
                    accepted = Some((trial_z, trial_rho));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((nz, nr)) => {
                z = nz;
                rho = nr;
            }
            None => {
                return Err(Error::CorrectorFailed {
                    residual: res_inf,
                    iters: iter + 1,
                })
            }
        }
    }
    Err(Error::CorrectorFailed {
        residual: rho.amax(),
        iters: config.corrector_max_iters,
    })
}

/// Newton on `y ↦ ρ(1, y)` started from the linear interpolation of the two
/// points bracketing `λ = 1`. Returns the point and the Newton iteration count.
pub fn refine_endpoint<H: Homotopy + ?Sized>(
    homotopy: &H,
    before: &DVector<f64>,
    after: &DVector<f64>,
    config: &TrackerConfig,
) -> Result<(DVector<f64>, usize)> {
    let d = homotopy.dim();
    let mut w = if after[0] == 1.0 {
        after.clone()
    } else {
        let span = after[0] - before[0];
        let theta = if span.abs() > 0.0 {
            (1.0 - before[0]) / span
        } else {
            1.0
        };
        let mut w = before + (after - before) * theta;
        w[0] = 1.0;
        w
    };
    let mut rho = homotopy.residual(&w)?;
    for iter in 0..=config.corrector_max_iters {
        let res_inf = rho.amax();
        if res_inf <= config.endpoint_tol {
            debug!("endpoint refined in {iter} Newton iterations, residual {res_inf:e}");
            return Ok((w, iter));
        }
        if iter == config.corrector_max_iters {
            break;
        }
        let jac = homotopy.jacobian(&w)?;
        let square = jac.columns(1, d).into_owned();
        let step = square.lu().solve(&(-&rho)).ok_or(Error::CorrectorFailed {
            residual: res_inf,
            iters: iter,
        })?;
        let phi = rho.norm_squared();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut trial = w.clone();
            trial.rows_mut(1, d).axpy(alpha, &step, 1.0);
            if let Ok(trial_rho) = homotopy.residual(&trial) {
                if trial_rho.norm_squared() <= (1.0 - 2.0 * ARMIJO_C * alpha) * phi {
                    accepted = Some((trial, trial_rho));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((nw, nr)) => {
                w = nw;
                rho = nr;
            }
            None => break,
        }
    }
    Err(Error::CorrectorFailed {
        residual: rho.amax(),
        iters: config.corrector_max_iters,
    })
}

/// Result of following a curve with the generic tracker.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub status: SolveStatus,
    /// Refined point on `λ = 1` when `status` is `Converged`.
    pub endpoint: Option<DVector<f64>>,
    /// Last accepted curve point.
    pub last: DVector<f64>,
    pub trace: Vec<TraceRecord>,
    pub steps: usize,
    pub tangent_warnings: usize,
}

/// Follows the zero curve of `homotopy` from `start` until it crosses `λ = 1`.
pub fn track<H: Homotopy + ?Sized>(
    homotopy: &H,
    start: &DVector<f64>,
    config: &TrackerConfig,
) -> Result<TrackOutcome> {
    config.validate()?;
    let mut w = start.clone();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut prev_t: Option<DVector<f64>> = None;
    let mut h = config.step_size;
    let mut successes = 0usize;
    let mut arclen = 0.0;
    let mut tangent_warnings = 0usize;
    let orientation = start_orientation(&homotopy.jacobian(&w)?);

    let finish = |status, last, trace, endpoint, tangent_warnings| TrackOutcome {
        status,
        endpoint,
        last,
        steps: 0,
        trace,
        tangent_warnings,
    };

    let outcome = loop {
        if trace.len() >= config.max_steps {
            break finish(
                SolveStatus::MaxSteps,
                w.clone(),
                trace,
                None,
                tangent_warnings,
            );
        }
        let jac = homotopy.jacobian(&w)?;
        let tan = match tangent_oriented(&jac, orientation, prev_t.as_ref()) {
            Ok(t) => t,
            Err(Error::RankDeficient { .. }) => {
                break finish(
                    SolveStatus::RankDeficient,
                    w.clone(),
                    trace,
                    None,
                    tangent_warnings,
                )
            }
            Err(e) => return Err(e),
        };
        if tan.continuity_warning {
            tangent_warnings += 1;
        }
        let t = tan.t;

        let v = predict(&w, &t, h);
        let corrected = match correct(homotopy, &v, &t, config) {
            Ok(c) if c.point[0] <= config.overshoot_cap => Some(c),
            Ok(_) | Err(Error::CorrectorFailed { .. }) | Err(Error::NonFinite { .. }) => None,
            Err(Error::NonFiniteState { .. }) | Err(Error::NonFiniteConstraint { .. }) => None,
            Err(e) => return Err(e),
        };
        let Some(c) = corrected else {
            successes = 0;
            h *= 0.5;
            debug!("step rejected, halving h to {h:e}");
            if h < config.min_step {
                break finish(
                    SolveStatus::StepUnderflow,
                    w.clone(),
                    trace,
                    None,
                    tangent_warnings,
                );
            }
            continue;
        };

        if c.point[0] >= 1.0 {
            match refine_endpoint(homotopy, &w, &c.point, config) {
                Ok((end, iters)) => {
                    arclen += (&end - &w).norm();
                    trace.push(TraceRecord {
                        iter: trace.len() + 1,
                        lambda: end[0],
                        arclen,
                        res_inf: homotopy.residual(&end)?.amax(),
                        tangent_lambda: t[0],
                        min_margin: homotopy.margin(&end),
                        corrector_iters: iters,
                        rank_ratio: None,
                        point: end.clone(),
                    });
                    break finish(
                        SolveStatus::Converged,
                        end.clone(),
                        trace,
                        Some(end),
                        tangent_warnings,
                    );
                }
                Err(_) => {
                    successes = 0;
                    h *= 0.5;
                    debug!("endpoint refinement failed, retracking with h = {h:e}");
                    if h < config.min_step {
                        break finish(
                            SolveStatus::CorrectorFailed,
                            w.clone(),
                            trace,
                            None,
                            tangent_warnings,
                        );
                    }
                    continue;
                }
            }
        }

        arclen += (&c.point - &w).norm();
        let iter = trace.len() + 1;
        let rank = if config.rank_check_stride > 0 && iter.is_multiple_of(config.rank_check_stride)
        {
            Some(rank_ratio(&homotopy.jacobian(&c.point)?))
        } else {
            None
        };
        trace.push(TraceRecord {
            iter,
            lambda: c.point[0],
            arclen,
            res_inf: c.res_inf,
            tangent_lambda: t[0],
            min_margin: homotopy.margin(&c.point),
            corrector_iters: c.iters,
            rank_ratio: rank,
            point: c.point.clone(),
        });
        w = c.point;
        prev_t = Some(t);
        if let Some(ratio) = rank {
            if ratio <= config.rank_threshold {
                break finish(
                    SolveStatus::RankDeficient,
                    w.clone(),
                    trace,
                    None,
                    tangent_warnings,
                );
            }
        }
        successes += 1;
        if successes >= 2 && h < config.step_size {
            h = config.step_size;
            successes = 0;
        }
    };
    let steps = outcome.trace.len();
    Ok(TrackOutcome { steps, ..outcome })
}

/// Outcome of a full homotopy solve of the control problem.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub u: StackedControl,
    pub mu: DVector<f64>,
    pub lambda_final: f64,
    pub cost: f64,
    pub kkt: KktResiduals,
    pub steps: usize,
    pub trace: Vec<TraceRecord>,
    pub tangent_warnings: usize,
}

/// Validates `a`, solves for `μ⁰`, tracks the curve and verifies the endpoint.
pub fn solve(view: NlpView, params: HomotopyParams, config: &TrackerConfig) -> Result<SolveResult> {
    let homotopy = OcpHomotopy::new(view, params)?;
    solve_with(&homotopy, config)
}

pub fn solve_with(homotopy: &OcpHomotopy, config: &TrackerConfig) -> Result<SolveResult> {
    let start = homotopy.start_point()?.to_vector();
    let outcome = track(homotopy, &start, config)?;
    let r = homotopy.r();
    let final_point = outcome
        .endpoint
        .clone()
        .unwrap_or_else(|| outcome.last.clone());
    let p = CurvePoint::from_vector(&final_point, r);
    let view = homotopy.view();
    let cost = view.problem().total_cost(&p.u)?;
    let (entry, kkt) = verify_kkt(view, &p.u, &p.mu, config.kkt_tol)?;
    let mut status = outcome.status;
    if status == SolveStatus::Converged && entry.status == CheckStatus::Fail {
        warn!("endpoint refined but KKT verification failed: {kkt:?}");
        status = SolveStatus::CorrectorFailed;
    }
    Ok(SolveResult {
        status,
        u: p.u,
        mu: p.mu,
        lambda_final: p.lambda,
        cost,
        kkt,
        steps: outcome.steps,
        trace: outcome.trace,
        tangent_warnings: outcome.tangent_warnings,
    })
}
