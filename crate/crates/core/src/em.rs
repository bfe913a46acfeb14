//! The implicit population EM update and full EM runs.
//!
//! One outer step maps `lambda_t` to the unique root `lambda` of
//!
//! ```text
//! h(lambda_t, lambda) = E_{mu,S}[tanh(x^T Sigma^{-1} lambda_t) x]
//!                     - E_{lambda,S}[x tanh(x^T Sigma^{-1} lambda)] = 0
//! ```
//!
//! (the common `Sigma^{-1}` factor is cancelled on both sides). The left
//! term is [`target_moment`], the right is [`self_moment`]; the root is found
//! by a damped Newton solve whose Jacobian is the self-moment derivative,
//! positive definite after multiplication by `Sigma`, so the inner problem is
//! well posed.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::model::{whiten, MixtureParams, TruncationSpec, Whitener};
use crate::moments;
use crate::quad::{Estimate, QuadConfig};
use crate::{Error, Result};

/// Default relative tolerance of the inner Newton solve.
pub const DEFAULT_INNER_TOL: f64 = 1e-10;
/// Default outer fixed-point iteration tolerance.
pub const DEFAULT_OUTER_TOL: f64 = 1e-8;
/// Newton iteration budget for one implicit solve.
pub const DEFAULT_MAX_NEWTON_ITERS: usize = 60;

/// Everything an EM run needs: true parameters, truncation and quadrature
/// settings, plus cached derived quantities. Immutable after construction,
/// safe to share across parallel workers.
#[derive(Debug, Clone)]
pub struct Context {
    params: MixtureParams,
    trunc: TruncationSpec,
    quad: QuadConfig,
    whitener: Whitener,
    sigma_inv: DMatrix<f64>,
    pub inner_tol: f64,
    pub outer_tol: f64,
    pub max_newton_iters: usize,
}

impl Context {
    pub fn new(params: MixtureParams, trunc: TruncationSpec, quad: QuadConfig) -> Result<Self> {
        quad.validate()?;
        let whitener = whiten(&params)?;
        let sigma_inv = &whitener.w * &whitener.w;
        Ok(Self {
            params,
            trunc,
            quad,
            whitener,
            sigma_inv,
            inner_tol: DEFAULT_INNER_TOL,
            outer_tol: DEFAULT_OUTER_TOL,
            max_newton_iters: DEFAULT_MAX_NEWTON_ITERS,
        })
    }

    pub fn with_tols(mut self, inner_tol: f64, outer_tol: f64) -> Self {
        self.inner_tol = inner_tol;
        self.outer_tol = outer_tol;
        self
    }

    /// Same truncation, tolerances and quadrature, different true mean.
    pub fn with_mu(&self, mu: DVector<f64>) -> Result<Self> {
        let ctx = Self::new(
            self.params.with_mu(mu)?,
            self.trunc.clone(),
            self.quad.clone(),
        )?;
        Ok(Self {
            inner_tol: self.inner_tol,
            outer_tol: self.outer_tol,
            max_newton_iters: self.max_newton_iters,
            ..ctx
        })
    }

    pub fn params(&self) -> &MixtureParams {
        &self.params
    }

    pub fn trunc(&self) -> &TruncationSpec {
        &self.trunc
    }

    pub fn quad(&self) -> &QuadConfig {
        &self.quad
    }

    pub fn whitener(&self) -> &Whitener {
        &self.whitener
    }

    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }

    pub fn mu(&self) -> &DVector<f64> {
        self.params.mu()
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Whitened Euclidean distance between two points.
    pub fn whitened_distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.whitener.whitened_norm(&(a - b))
    }

    /// Step-norm cap for the damped Newton solve: generous enough to never
    /// bind near the fixed points, tight enough to stop wild steps when the
    /// survival mass is small.
    fn trust_cap(&self) -> f64 {
        let sigma_spectral = self
            .params
            .sigma()
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .max();
        self.mu().norm() + 3.0 * sigma_spectral.sqrt()
    }

    fn check_accuracy_conflict(&self, inner_tol: f64) -> Result<()> {
        let quad_tol = self.quad.abs_tol.max(self.quad.rel_tol);
        if quad_tol * 100.0 > inner_tol {
            return Err(Error::AccuracyConflict {
                quad_tol,
                inner_tol,
            });
        }
        Ok(())
    }
}

/// `b(lambda_t) = E_{mu,S}[tanh(x^T Sigma^{-1} lambda_t) x]`: the target the
/// inner solve must match.
pub fn target_moment(lambda_t: &DVector<f64>, ctx: &Context) -> Result<Estimate<DVector<f64>>> {
    check_dim(ctx, lambda_t)?;
    let m = moments::x_tanh(ctx, ctx.mu(), lambda_t)?;
    let err = m.error_norm();
    Ok(Estimate {
        value: m.value,
        error_estimate: err,
        method: m.method,
    })
}

/// `H(lambda) = E_{lambda,S}[x tanh(x^T Sigma^{-1} lambda)]`: the self-moment
/// whose root defines the next iterate. For `S == 1` this is the identity
/// map.
pub fn self_moment(lambda: &DVector<f64>, ctx: &Context) -> Result<Estimate<DVector<f64>>> {
    check_dim(ctx, lambda)?;
    let m = moments::x_tanh(ctx, lambda, lambda)?;
    let err = m.error_norm();
    Ok(Estimate {
        value: m.value,
        error_estimate: err,
        method: m.method,
    })
}

/// Outcome of one implicit EM step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub lambda_next: DVector<f64>,
    /// `||H(lambda_next) - b(lambda_t)||` at acceptance.
    pub inner_residual: f64,
    pub newton_iters: usize,
}

/// One EM step: damped Newton on `H(lambda) = b(lambda_t)`, started at
/// `lambda_t`, step capped by the trust radius, halved until the residual
/// decreases.
pub fn em_step(lambda_t: &DVector<f64>, ctx: &Context, inner_tol: f64) -> Result<StepOutcome> {
    check_dim(ctx, lambda_t)?;
    if !(inner_tol > 0.0) {
        return Err(Error::InvalidParameter("inner_tol must be > 0".into()));
    }
    ctx.check_accuracy_conflict(inner_tol)?;

    let b = moments::x_tanh(ctx, ctx.mu(), lambda_t)?.value;
    let scale = b.norm().max(1.0);
    let cap = ctx.trust_cap();

    let mut lambda = lambda_t.clone();
    let mut set = moments::x_tanh_and_xx(ctx, &lambda, &lambda)?;
    let mut residual = (&set.first - &b).norm();

    for iter in 0..ctx.max_newton_iters {
        if residual <= inner_tol * scale {
            return Ok(StepOutcome {
                lambda_next: lambda,
                inner_residual: residual,
                newton_iters: iter,
            });
        }
        // Column-convention Jacobian of H at lambda:
        // (E[xx^T] - H H^T) Sigma^{-1}.
        let a_mat = &set.second - &set.first * set.first.transpose();
        let jac = &a_mat * ctx.sigma_inv();
        let rhs = &b - &set.first;
        let mut delta = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSelfMoment {
                point: lambda.iter().copied().collect(),
            })?;
        let dn = delta.norm();
        if dn > cap {
            delta *= cap / dn;
        }

        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let trial = &lambda + &delta * t;
            let trial_set = moments::x_tanh_and_xx(ctx, &trial, &trial)?;
            let trial_residual = (&trial_set.first - &b).norm();
            if trial_residual < residual {
                lambda = trial;
                set = trial_set;
                residual = trial_residual;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }

    if residual <= inner_tol * scale {
        return Ok(StepOutcome {
            lambda_next: lambda,
            inner_residual: residual,
            newton_iters: ctx.max_newton_iters,
        });
    }
    Err(Error::NewtonStagnation {
        iters: ctx.max_newton_iters,
        residual,
    })
}

/// `||b(lambda) - H(lambda)||_2`; zero (within quadrature error) exactly at
/// fixed points of the EM map. The error estimate combines both quadrature
/// error norms.
pub fn fixed_point_residual(lambda: &DVector<f64>, ctx: &Context) -> Result<Estimate<f64>> {
    check_dim(ctx, lambda)?;
    let b = moments::x_tanh(ctx, ctx.mu(), lambda)?;
    let h = moments::x_tanh(ctx, lambda, lambda)?;
    Ok(Estimate {
        value: (&b.value - &h.value).norm(),
        error_estimate: b.error_norm() + h.error_norm(),
        method: b.method,
    })
}

/// Which limit an EM trajectory settled on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LimitLabel {
    PlusMu,
    MinusMu,
    Zero,
    Other(Vec<f64>),
    NotConverged,
}

/// One accepted EM iterate.
#[derive(Debug, Clone, Serialize)]
pub struct EmState {
    pub lambda: Vec<f64>,
    pub iter: usize,
    /// Newton residual of the implicit solve that produced this state.
    pub inner_residual: f64,
    /// `||lambda_t - lambda_{t-1}||` (zero for the initial state).
    pub step_norm: f64,
}

/// An ordered EM run with its convergence verdict.
#[derive(Debug, Clone, Serialize)]
pub struct EmTrajectory {
    pub states: Vec<EmState>,
    pub converged: bool,
    pub limit_label: LimitLabel,
    /// Inner-solver failure recorded instead of thrown.
    pub solver_error: Option<String>,
}

impl EmTrajectory {
    pub fn final_lambda(&self) -> DVector<f64> {
        DVector::from_vec(self.states.last().expect("non-empty").lambda.clone())
    }

    /// CSV with columns `iter, lambda_1..lambda_d, step_norm, inner_residual`.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, |s| s.lambda.len());
        let mut out = String::from("iter");
        for i in 1..=d {
            out.push_str(&format!(",lambda_{i}"));
        }
        out.push_str(",step_norm,inner_residual\n");
        for s in &self.states {
            out.push_str(&format!("{}", s.iter));
            for v in &s.lambda {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", s.step_norm, s.inner_residual));
        }
        out
    }
}

/// Iterates [`em_step`] until the step norm drops below `outer_tol` or the
/// budget is exhausted, then labels the limit against `{-mu, 0, mu}` using
/// whitened distance with cluster tolerance `10 * outer_tol`.
///
/// `lambda_0 = 0` is a valid (repelling) fixed point and is iterated as-is;
/// perturbing it is the caller's decision.
pub fn run_em(
    lambda_0: &DVector<f64>,
    ctx: &Context,
    outer_tol: f64,
    max_iters: usize,
) -> EmTrajectory {
    let mut states = vec![EmState {
        lambda: lambda_0.iter().copied().collect(),
        iter: 0,
        inner_residual: 0.0,
        step_norm: 0.0,
    }];
    let mut lambda = lambda_0.clone();
    let mut converged = false;
    let mut solver_error = None;

    for iter in 1..=max_iters.max(1) {
        match em_step(&lambda, ctx, ctx.inner_tol) {
            Ok(step) => {
                let step_norm = (&step.lambda_next - &lambda).norm();
                lambda = step.lambda_next;
                states.push(EmState {
                    lambda: lambda.iter().copied().collect(),
                    iter,
                    inner_residual: step.inner_residual,
                    step_norm,
                });
                if step_norm <= outer_tol {
                    converged = true;
                    break;
                }
            }
            Err(e) => {
                solver_error = Some(e.to_string());
                break;
            }
        }
    }

    let limit_label = if converged {
        label_limit(&lambda, ctx, 10.0 * outer_tol)
    } else {
        LimitLabel::NotConverged
    };
    EmTrajectory {
        states,
        converged,
        limit_label,
        solver_error,
    }
}

fn label_limit(lambda: &DVector<f64>, ctx: &Context, cluster_tol: f64) -> LimitLabel {
    let mu = ctx.mu();
    let zero = DVector::zeros(ctx.dim());
    let neg = -mu;
    let candidates = [
        (LimitLabel::PlusMu, mu.clone()),
        (LimitLabel::MinusMu, neg),
        (LimitLabel::Zero, zero),
    ];
    let mut best: Option<(f64, LimitLabel)> = None;
    for (label, point) in candidates {
        let dist = ctx.whitened_distance(lambda, &point);
        if dist <= cluster_tol && best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, label));
        }
    }
    match best {
        Some((_, label)) => label,
        None => LimitLabel::Other(lambda.iter().copied().collect()),
    }
}

fn check_dim(ctx: &Context, v: &DVector<f64>) -> Result<()> {
    if v.len() != ctx.dim() {
        return Err(Error::DimensionMismatch {
            expected: ctx.dim(),
            got: v.len(),
        });
    }
    Ok(())
}
