//! Empirical contraction rates, bracketing checks, the denominator/numerator
//! identities behind the 1-D rate bound, and FKG correlation checks.
//!
//! The theoretical rate statements carry unspecified constants, so
//! everything quantitative here is either a strict sign/ordering assertion
//! (factors below one, derivative minima positive, spectral radius below
//! one) or a fitted-constant report.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::analysis::em_jacobian;
use crate::em::{Context, EmTrajectory, LimitLabel};
use crate::model::{whiten, MixtureParams, TruncationSpec, Whitener};
use crate::moments;
use crate::quad::{integrate_1d, survival_mass, MixtureWeight, QuadConfig};
use crate::{Error, Result};

/// Per-trajectory contraction measurements.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub alpha: f64,
    /// `|lambda_{t+1} - mu*| / |lambda_t - mu*|` per step, whitened norm,
    /// recorded while the distance stays resolvable.
    pub contraction_factors: Vec<f64>,
    pub spectral_radius_at_limit: f64,
    /// Named fitted multipliers (reports, not assertions).
    pub fitted_constants: BTreeMap<String, f64>,
}

/// Contraction profile of a labeled trajectory toward its limit.
///
/// In 1-D also fits the largest `C` with
/// `factor_t <= 1 - C * min(alpha^2 min(|lambda_t|, |mu|), 1) * alpha^4`
/// across the recorded steps.
pub fn contraction_profile(traj: &EmTrajectory, ctx: &Context) -> Result<RateReport> {
    if traj.states.len() < 2 {
        return Err(Error::InvalidParameter(
            "trajectory needs at least two states".into(),
        ));
    }
    let limit = match &traj.limit_label {
        LimitLabel::PlusMu => ctx.mu().clone(),
        LimitLabel::MinusMu => -ctx.mu(),
        LimitLabel::Zero => DVector::zeros(ctx.dim()),
        LimitLabel::Other(p) => DVector::from_vec(p.clone()),
        LimitLabel::NotConverged => {
            return Err(Error::InvalidParameter("unlabeled trajectory".into()))
        }
    };

    let alpha = survival_mass(ctx.params(), ctx.trunc(), ctx.quad())?.value;
    let floor = 10.0 * ctx.outer_tol;
    let mut factors = Vec::new();
    let mut lambdas = Vec::new();
    for w in traj.states.windows(2) {
        let prev = DVector::from_vec(w[0].lambda.clone());
        let next = DVector::from_vec(w[1].lambda.clone());
        let d_prev = ctx.whitened_distance(&prev, &limit);
        let d_next = ctx.whitened_distance(&next, &limit);
        if d_prev <= floor {
            break;
        }
        factors.push(d_next / d_prev);
        lambdas.push(prev);
    }

    let radius = em_jacobian(&limit, ctx)?.spectral_radius;

    let mut fitted = BTreeMap::new();
    if ctx.dim() == 1 && !factors.is_empty() {
        let mu_abs = ctx.mu()[0].abs();
        let mut c_fit = f64::INFINITY;
        for (factor, lam) in factors.iter().zip(&lambdas) {
            let gate = (alpha * alpha * lam[0].abs().min(mu_abs)).min(1.0) * alpha.powi(4);
            if gate > 0.0 {
                c_fit = c_fit.min((1.0 - factor) / gate);
            }
        }
        if c_fit.is_finite() {
            fitted.insert("contraction_rate_multiplier".to_string(), c_fit);
        }
    }

    Ok(RateReport {
        alpha,
        contraction_factors: factors,
        spectral_radius_at_limit: radius,
        fitted_constants: fitted,
    })
}

/// Monotone bracketing of a 1-D trajectory: whenever `0 < l_t < mu` the next
/// iterate lies in `(l_t, mu)`; whenever `l_t > mu` it lies in `(mu, l_t)`;
/// mirrored on the negative side (the update map is odd). Comparisons use a
/// small slack so terminal solver noise does not flip the verdict.
pub fn bracket_check(traj: &EmTrajectory, mu: f64) -> bool {
    let tol = 1e-9 * (1.0 + mu.abs());
    for w in traj.states.windows(2) {
        let l = w[0].lambda[0];
        let n = w[1].lambda[0];
        let (l_m, n_m) = if l < 0.0 { (-l, -n) } else { (l, n) };
        if l_m > tol && (l_m - mu.abs()).abs() > tol {
            let ok = if l_m < mu.abs() {
                n_m > l_m - tol && n_m < mu.abs() + tol
            } else {
                n_m > mu.abs() - tol && n_m < l_m + tol
            };
            if !ok {
                return false;
            }
        }
    }
    true
}

/// The two routes of the denominator identity at `xi`.
#[derive(Debug, Clone, Serialize)]
pub struct DenominatorIdentityReport {
    pub xi: f64,
    /// Via the self-moment derivative formula.
    pub derivative_route: f64,
    /// Via the variance of the single Gaussian at `xi` reweighted by the
    /// even-folded truncation `(S(x) + S(-x)) / 2`.
    pub folded_route: f64,
    pub rel_discrepancy: f64,
}

/// Checks, at one `xi`, that the derivative of the self-consistency map
/// equals the folded-measure variance over `sigma^2` (exact identity).
pub fn denominator_identity_check(xi: f64, ctx: &Context) -> Result<DenominatorIdentityReport> {
    if ctx.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: ctx.dim(),
        });
    }
    let sigma_sq = ctx.params().sigma()[(0, 0)];
    let xi_v = DVector::from_vec(vec![xi]);

    let set = moments::x_tanh_and_xx(ctx, &xi_v, &xi_v)?;
    let derivative_route = (set.second[(0, 0)] - set.first[0] * set.first[0]) / sigma_sq;

    let dist = Density1d::folded_gaussian(
        xi,
        sigma_sq.sqrt(),
        ctx.trunc().clone(),
        ctx.whitener().clone(),
    );
    let (vals, _) = dist.moments_with(&[], &[&|x: f64| x, &|x: f64| x * x], ctx.quad())?;
    let folded_route = (vals[1] - vals[0] * vals[0]) / sigma_sq;

    let rel = (derivative_route - folded_route).abs() / derivative_route.abs().max(f64::MIN_POSITIVE);
    Ok(DenominatorIdentityReport {
        xi,
        derivative_route,
        folded_route,
        rel_discrepancy: rel,
    })
}

/// Numerator derivative sweep over the mean-value interval.
#[derive(Debug, Clone, Serialize)]
pub struct NumeratorBoundReport {
    pub lambda_t: f64,
    pub values: Vec<(f64, f64)>,
    pub min_value: f64,
    pub min_xi: f64,
    pub all_positive: bool,
    pub alpha: f64,
    /// `min_value / (alpha^2 tanh^2(sqrt(2 pi) lambda_t alpha))`.
    pub fitted_multiplier: f64,
}

/// Evaluates the cross derivative `d G(lambda_t, y) / d y` on an `n_xi` grid
/// of `xi` in `[lambda_t, mu]`, reports the minimum and its positivity, and
/// the fitted multiplier against the tanh lower-bound shape.
pub fn numerator_bound_eval(
    lambda_t: f64,
    ctx: &Context,
    n_xi: usize,
) -> Result<NumeratorBoundReport> {
    if ctx.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: ctx.dim(),
        });
    }
    let mu = ctx.mu()[0];
    if !(lambda_t > 0.0 && lambda_t < mu) {
        return Err(Error::InvalidParameter(
            "numerator sweep requires 0 < lambda_t < mu".into(),
        ));
    }
    let sigma_sq = ctx.params().sigma()[(0, 0)];
    let lam_v = DVector::from_vec(vec![lambda_t]);
    let n = n_xi.max(2);

    let mut values = Vec::with_capacity(n);
    let mut min_value = f64::INFINITY;
    let mut min_xi = lambda_t;
    for i in 0..n {
        let xi = lambda_t + (mu - lambda_t) * i as f64 / (n - 1) as f64;
        let xi_v = DVector::from_vec(vec![xi]);
        let set = moments::cross_tanh_set(ctx, &xi_v, &lam_v, &xi_v)?;
        let v = (set.second[(0, 0)] - set.first_a[0] * set.first_b[0]) / sigma_sq;
        values.push((xi, v));
        if v < min_value {
            min_value = v;
            min_xi = xi;
        }
    }

    let alpha = survival_mass(ctx.params(), ctx.trunc(), ctx.quad())?.value;
    let gate = alpha
        * alpha
        * ((2.0 * std::f64::consts::PI).sqrt() * lambda_t * alpha)
            .tanh()
            .powi(2);
    Ok(NumeratorBoundReport {
        lambda_t,
        values,
        min_value,
        min_xi,
        all_positive: min_value > 0.0,
        alpha,
        fitted_multiplier: if gate > 0.0 {
            min_value / gate
        } else {
            f64::NAN
        },
    })
}

/// A 1-D probability measure for the correlation checks.
#[derive(Clone)]
pub enum Density1d {
    Gaussian {
        mean: f64,
        sd: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// The truncated two-component mixture itself.
    TruncatedMixture {
        params: MixtureParams,
        trunc: TruncationSpec,
    },
    /// Single Gaussian reweighted by the even-folded truncation
    /// `(S(x) + S(-x)) / 2`.
    FoldedGaussian {
        mean: f64,
        sd: f64,
        trunc: TruncationSpec,
        whitener: Whitener,
    },
}

impl Density1d {
    pub fn folded_gaussian(mean: f64, sd: f64, trunc: TruncationSpec, whitener: Whitener) -> Self {
        Self::FoldedGaussian {
            mean,
            sd,
            trunc,
            whitener,
        }
    }

    fn window(&self, cfg: &QuadConfig) -> (f64, f64) {
        match self {
            Self::Gaussian { mean, sd } => {
                (mean - cfg.window_radius * sd, mean + cfg.window_radius * sd)
            }
            Self::Uniform { lo, hi } => (*lo, *hi),
            Self::TruncatedMixture { params, .. } => {
                let sd = params.sigma()[(0, 0)].sqrt();
                let m = params.mu()[0].abs();
                (-m - cfg.window_radius * sd, m + cfg.window_radius * sd)
            }
            Self::FoldedGaussian { mean, sd, .. } => {
                (mean - cfg.window_radius * sd, mean + cfg.window_radius * sd)
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Self::Gaussian { .. } | Self::Uniform { .. } => Vec::new(),
            Self::TruncatedMixture { params, trunc } => {
                let wh = whiten(params).expect("validated params");
                let mut bp = trunc
                    .axis_breakpoints(1, &wh)
                    .map(|b| b[0].clone())
                    .unwrap_or_default();
                bp.push(params.mu()[0]);
                bp.push(-params.mu()[0]);
                bp
            }
            Self::FoldedGaussian {
                trunc, whitener, ..
            } => {
                let mut bp = trunc
                    .axis_breakpoints(1, whitener)
                    .map(|b| b[0].clone())
                    .unwrap_or_default();
                let mirrored: Vec<f64> = bp.iter().map(|x| -x).collect();
                bp.extend(mirrored);
                bp
            }
        }
    }

    fn weight(&self) -> Box<dyn Fn(f64) -> f64 + Sync + '_> {
        match self {
            Self::Gaussian { mean, sd } => {
                let (m, s) = (*mean, *sd);
                Box::new(move |x: f64| (-0.5 * ((x - m) / s).powi(2)).exp())
            }
            Self::Uniform { .. } => Box::new(|_| 1.0),
            Self::TruncatedMixture { params, trunc } => {
                let w = MixtureWeight::new(params).expect("validated params");
                let wh = whiten(params).expect("validated params");
                Box::new(move |x: f64| {
                    let xs = [x];
                    w.eval(&xs) * trunc.value(&xs, &wh)
                })
            }
            Self::FoldedGaussian {
                mean,
                sd,
                trunc,
                whitener,
            } => {
                let (m, s) = (*mean, *sd);
                Box::new(move |x: f64| {
                    let fold = 0.5 * (trunc.value(&[x], whitener) + trunc.value(&[-x], whitener));
                    (-0.5 * ((x - m) / s).powi(2)).exp() * fold
                })
            }
        }
    }

    /// Normalized expectations of the payload functions under this measure,
    /// one fused quadrature pass. Returns values and error estimates.
    pub fn moments_with(
        &self,
        extra_breakpoints: &[f64],
        payloads: &[&(dyn Fn(f64) -> f64 + Sync)],
        cfg: &QuadConfig,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let (a, b) = self.window(cfg);
        let mut bp = self.breakpoints();
        bp.extend_from_slice(extra_breakpoints);
        let w = self.weight();
        let dim = payloads.len() + 1;
        let integrand = |x: f64, out: &mut [f64]| {
            let wx = w(x);
            out[0] = wx;
            for (k, f) in payloads.iter().enumerate() {
                out[k + 1] = wx * f(x);
            }
        };
        let (vals, errs) = integrate_1d(
            &integrand,
            a,
            b,
            &bp,
            dim,
            cfg.abs_tol,
            cfg.rel_tol,
            cfg.max_panels,
        )?;
        let mass = vals[0];
        if mass <= 0.0 {
            return Err(Error::DegenerateTruncation { alpha: mass });
        }
        let mut values = Vec::with_capacity(dim - 1);
        let mut errors = Vec::with_capacity(dim - 1);
        for k in 1..dim {
            let e = vals[k] / mass;
            values.push(e);
            errors.push((errs[k] + e.abs() * errs[0]) / mass);
        }
        Ok((values, errors))
    }

    /// `P(|x| >= c)`.
    pub fn tail_mass(&self, c: f64, cfg: &QuadConfig) -> Result<f64> {
        let ind = move |x: f64| if x.abs() >= c { 1.0 } else { 0.0 };
        let (vals, _) = self.moments_with(&[-c, c], &[&ind], cfg)?;
        Ok(vals[0])
    }

    /// `Var[x | |x| >= c]`, or `Var[|x| | |x| >= c]` when `folded`.
    pub fn conditional_tail_variance(&self, c: f64, folded: bool, cfg: &QuadConfig) -> Result<f64> {
        let ind = move |x: f64| if x.abs() >= c { 1.0 } else { 0.0 };
        let first = move |x: f64| {
            let v = if folded { x.abs() } else { x };
            if x.abs() >= c {
                v
            } else {
                0.0
            }
        };
        let second = move |x: f64| if x.abs() >= c { x * x } else { 0.0 };
        let (vals, _) = self.moments_with(&[-c, c], &[&ind, &first, &second], cfg)?;
        let q = vals[0];
        if q <= 0.0 {
            return Err(Error::DegenerateTruncation { alpha: q });
        }
        let m1 = vals[1] / q;
        let m2 = vals[2] / q;
        Ok((m2 - m1 * m1).max(0.0))
    }
}

/// Plain FKG inequality check: `E[fg] >= E[f] E[g]` up to a `1e-12`-scaled
/// slack, for monotonically increasing `f`, `g`.
pub fn fkg_monotone_check(
    f: &(dyn Fn(f64) -> f64 + Sync),
    g: &(dyn Fn(f64) -> f64 + Sync),
    distribution: &Density1d,
    cfg: &QuadConfig,
) -> Result<bool> {
    fkg_monotone_check_with_breakpoints(f, g, &[], distribution, cfg)
}

/// As [`fkg_monotone_check`], with known discontinuity locations of `f`/`g`
/// supplied for panel alignment.
pub fn fkg_monotone_check_with_breakpoints(
    f: &(dyn Fn(f64) -> f64 + Sync),
    g: &(dyn Fn(f64) -> f64 + Sync),
    breakpoints: &[f64],
    distribution: &Density1d,
    cfg: &QuadConfig,
) -> Result<bool> {
    let fg = |x: f64| f(x) * g(x);
    let (vals, _) = distribution.moments_with(breakpoints, &[&*f, &*g, &fg], cfg)?;
    let scale = vals[2].abs().max(1.0);
    Ok(vals[2] >= vals[0] * vals[1] - 1e-12 * scale)
}

/// Scalar evaluator used by the quantitative FKG check.
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Inputs of the quantitative FKG check: even, C^2 functions increasing on
/// the positive half-line, a cutoff `c > 0` and a 1-D measure with tail mass
/// `q = P(|x| >= c)`.
#[derive(Clone)]
pub struct FkgCheckSpec {
    pub f: ScalarFn,
    pub g: ScalarFn,
    pub c: f64,
    pub distribution: Density1d,
    pub q: f64,
}

impl FkgCheckSpec {
    /// Computes the tail mass and probes evenness of `f` and `g`.
    pub fn new(
        f: ScalarFn,
        g: ScalarFn,
        c: f64,
        distribution: Density1d,
        cfg: &QuadConfig,
    ) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidParameter("cutoff c must be > 0".into()));
        }
        for (name, h) in [("f", &f), ("g", &g)] {
            for x in [0.3, 0.9, 1.7, 2.6] {
                let scale = h(x).abs().max(1.0);
                if (h(x) - h(-x)).abs() > 1e-9 * scale {
                    return Err(Error::InvalidParameter(format!("{name} is not even")));
                }
            }
        }
        let q = distribution.tail_mass(c, cfg)?;
        if !(q > 0.0 && q <= 1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "tail mass q = {q} out of (0, 1]"
            )));
        }
        Ok(Self {
            f,
            g,
            c,
            distribution,
            q,
        })
    }
}

/// Both variants of the quantitative FKG bound at one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct FkgQuantReport {
    pub lhs: f64,
    /// `2 f'(c) g'(c) q^2 Var[x | |x| >= c]` (the literal bound).
    pub rhs_std: f64,
    /// Same with `Var[|x| | |x| >= c]` (folded variant).
    pub rhs_folded: f64,
    pub holds_std: bool,
    pub holds_folded: bool,
    pub q: f64,
    pub fprime_c: f64,
    pub gprime_c: f64,
    pub var_tail: f64,
    pub var_abs_tail: f64,
}

/// Evaluates `E[fg] - E[f]E[g]` against both right-hand sides. The literal
/// variant can fail when mass sits on both signs; both are reported and
/// neither is asserted here.
pub fn fkg_quantitative_check(spec: &FkgCheckSpec, cfg: &QuadConfig) -> Result<FkgQuantReport> {
    let f = spec.f.clone();
    let g = spec.g.clone();
    let fg = |x: f64| f(x) * g(x);
    let f_ref: &(dyn Fn(f64) -> f64 + Sync) = &*spec.f;
    let g_ref: &(dyn Fn(f64) -> f64 + Sync) = &*spec.g;
    let (vals, _) =
        spec.distribution
            .moments_with(&[-spec.c, spec.c], &[f_ref, g_ref, &fg], cfg)?;
    let lhs = vals[2] - vals[0] * vals[1];

    let h = 1e-6 * (1.0 + spec.c.abs());
    let fprime = ((spec.f)(spec.c + h) - (spec.f)(spec.c - h)) / (2.0 * h);
    let gprime = ((spec.g)(spec.c + h) - (spec.g)(spec.c - h)) / (2.0 * h);

    let var_tail = spec
        .distribution
        .conditional_tail_variance(spec.c, false, cfg)?;
    let var_abs_tail = spec
        .distribution
        .conditional_tail_variance(spec.c, true, cfg)?;
    let rhs_std = 2.0 * fprime * gprime * spec.q * spec.q * var_tail;
    let rhs_folded = 2.0 * fprime * gprime * spec.q * spec.q * var_abs_tail;

    let slack = 1e-9 * lhs.abs().max(1.0);
    Ok(FkgQuantReport {
        lhs,
        rhs_std,
        rhs_folded,
        holds_std: lhs >= rhs_std - slack,
        holds_folded: lhs >= rhs_folded - slack,
        q: spec.q,
        fprime_c: fprime,
        gprime_c: gprime,
        var_tail,
        var_abs_tail,
    })
}

/// The cutoff used by the rate proof: the `c` whose excluded central
/// Gaussian mass equals `sqrt(2 pi sigma^2) * alpha / 2`, found by bisection
/// on the Gaussian CDF.
pub fn default_fkg_cutoff(sigma: f64, alpha: f64, cfg: &QuadConfig) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter("alpha must lie in (0, 1]".into()));
    }
    let target = (2.0 * std::f64::consts::PI * sigma * sigma).sqrt() * alpha / 2.0;
    let mass = |c: f64| -> Result<f64> {
        if c <= 0.0 {
            return Ok(0.0);
        }
        let f = |x: f64, out: &mut [f64]| out[0] = (-0.5 * (x / sigma).powi(2)).exp();
        let (v, _) = integrate_1d(
            &f,
            -c,
            c,
            &[0.0],
            1,
            cfg.abs_tol,
            cfg.rel_tol,
            cfg.max_panels,
        )?;
        Ok(v[0])
    };
    let mut lo = 0.0;
    let mut hi = 10.0 * sigma;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * sigma {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Spectral radii at the true means with the fitted rate multiplier.
#[derive(Debug, Clone, Serialize)]
pub struct LocalRateReport {
    pub alpha: f64,
    pub radius_plus: f64,
    pub radius_minus: f64,
    pub both_below_one: bool,
    /// `(1 - max radius) / alpha^6`.
    pub fitted_multiplier: f64,
}

/// Computes the EM-map spectral radius at both true means and the fitted
/// constant of the `1 - O(alpha^6)` local rate shape.
pub fn local_rate_check(ctx: &Context) -> Result<LocalRateReport> {
    let alpha = survival_mass(ctx.params(), ctx.trunc(), ctx.quad())?.value;
    let plus = em_jacobian(ctx.mu(), ctx)?.spectral_radius;
    let minus = em_jacobian(&-ctx.mu(), ctx)?.spectral_radius;
    let worst = plus.max(minus);
    Ok(LocalRateReport {
        alpha,
        radius_plus: plus,
        radius_minus: minus,
        both_below_one: worst < 1.0,
        fitted_multiplier: (1.0 - worst) / alpha.powi(6),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::run_em;
    use crate::model::TruncationSpec;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn ctx_1d(mu: f64, s2: f64, trunc: TruncationSpec) -> Context {
        let p = MixtureParams::univariate(mu, s2).unwrap();
        Context::new(p, trunc, QuadConfig::default()).unwrap()
    }

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    #[test]
    fn denominator_identity_untruncated_is_unit() {
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let rep = denominator_identity_check(0.7, &ctx).unwrap();
        assert_relative_eq!(rep.derivative_route, 1.0, epsilon = 1e-9);
        assert_relative_eq!(rep.folded_route, 1.0, epsilon = 1e-9);
        assert!(rep.rel_discrepancy < 1e-9);
    }

    #[test]
    fn denominator_identity_half_line() {
        let ctx = ctx_1d(
            1.0,
            1.0,
            TruncationSpec::interval(0.5, f64::INFINITY).unwrap(),
        );
        let rep = denominator_identity_check(1.0, &ctx).unwrap();
        assert!(
            rep.rel_discrepancy < 1e-6,
            "routes {} vs {}",
            rep.derivative_route,
            rep.folded_route
        );
    }

    #[test]
    fn denominator_identity_even_truncation() {
        let trunc = TruncationSpec::union(vec![
            TruncationSpec::interval(-3.0, -0.5).unwrap(),
            TruncationSpec::interval(0.5, 3.0).unwrap(),
        ])
        .unwrap();
        let ctx = ctx_1d(1.0, 1.0, trunc);
        let rep = denominator_identity_check(0.8, &ctx).unwrap();
        assert!(rep.rel_discrepancy < 1e-6, "rel {}", rep.rel_discrepancy);
    }

    #[test]
    fn numerator_bound_positive_untruncated() {
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let rep = numerator_bound_eval(0.5, &ctx, 21).unwrap();
        assert!(
            rep.all_positive,
            "min {} at xi {}",
            rep.min_value, rep.min_xi
        );
        assert!(rep.fitted_multiplier.is_finite() && rep.fitted_multiplier > 0.0);
    }

    #[test]
    fn numerator_bound_small_alpha_still_positive() {
        let ctx = ctx_1d(
            1.0,
            1.0,
            TruncationSpec::interval(2.5, f64::INFINITY).unwrap(),
        );
        let rep = numerator_bound_eval(0.5, &ctx, 11).unwrap();
        assert!(rep.alpha < 0.1);
        assert!(rep.all_positive, "min {}", rep.min_value);
    }

    #[test]
    fn fkg_monotone_identity_pair() {
        let dist = Density1d::Gaussian { mean: 0.0, sd: 1.0 };
        let id = |x: f64| x;
        assert!(fkg_monotone_check(&id, &id, &dist, &QuadConfig::default()).unwrap());
    }

    #[test]
    fn fkg_monotone_constant_gives_equality() {
        let dist = Density1d::Uniform { lo: -1.0, hi: 2.0 };
        let c = |_: f64| 3.0;
        let id = |x: f64| x;
        assert!(fkg_monotone_check(&c, &id, &dist, &QuadConfig::default()).unwrap());
    }

    #[test]
    fn fkg_quantitative_uniform_instance_exact_values() {
        // x uniform on [-1,1], f = g = x^2, c = 1/2: the literal bound fails
        // (7/24 > 4/45) while the folded variant holds (1/96 < 4/45).
        let cfg = QuadConfig::default();
        let sq: ScalarFn = Arc::new(|x: f64| x * x);
        let spec = FkgCheckSpec::new(
            sq.clone(),
            sq,
            0.5,
            Density1d::Uniform { lo: -1.0, hi: 1.0 },
            &cfg,
        )
        .unwrap();
        assert_relative_eq!(spec.q, 0.5, epsilon = 1e-12);
        let rep = fkg_quantitative_check(&spec, &cfg).unwrap();
        assert_relative_eq!(rep.lhs, 4.0 / 45.0, epsilon = 1e-6);
        assert_relative_eq!(rep.rhs_std, 7.0 / 24.0, epsilon = 1e-6);
        assert_relative_eq!(rep.rhs_folded, 1.0 / 96.0, epsilon = 1e-6);
        assert!(!rep.holds_std);
        assert!(rep.holds_folded);
    }

    #[test]
    fn fkg_quantitative_constant_function_trivial() {
        let cfg = QuadConfig::default();
        let c5: ScalarFn = Arc::new(|_| 5.0);
        let sq: ScalarFn = Arc::new(|x: f64| x * x);
        let spec = FkgCheckSpec::new(
            c5,
            sq,
            0.5,
            Density1d::Gaussian { mean: 0.0, sd: 1.0 },
            &cfg,
        )
        .unwrap();
        let rep = fkg_quantitative_check(&spec, &cfg).unwrap();
        assert!(rep.lhs.abs() < 1e-10);
        assert!(rep.rhs_std.abs() < 1e-10);
        assert!(rep.holds_std && rep.holds_folded);
    }

    #[test]
    fn default_cutoff_matches_target_mass() {
        let cfg = QuadConfig::default();
        let c = default_fkg_cutoff(1.0, 0.3, &cfg).unwrap();
        // Recompute the excluded mass at the returned cutoff.
        let f = |x: f64, out: &mut [f64]| out[0] = (-0.5 * x * x).exp();
        let (v, _) = integrate_1d(&f, -c, c, &[], 1, 1e-13, 1e-13, 2000).unwrap();
        let target = (2.0 * std::f64::consts::PI).sqrt() * 0.3 / 2.0;
        assert_relative_eq!(v[0], target, epsilon = 1e-10);
    }

    #[test]
    fn contraction_profile_of_converged_run() {
        let ctx = ctx_1d(
            1.0,
            1.0,
            TruncationSpec::interval(0.5, f64::INFINITY).unwrap(),
        );
        let traj = run_em(&v1(0.3), &ctx, 1e-8, 1000);
        assert!(traj.converged);
        let rep = contraction_profile(&traj, &ctx).unwrap();
        assert!(!rep.contraction_factors.is_empty());
        assert!(rep.contraction_factors.iter().all(|&f| f < 1.0));
        assert!(rep.spectral_radius_at_limit < 1.0);
        // Terminal factor approaches the Jacobian at the limit.
        let last = *rep.contraction_factors.last().unwrap();
        assert_relative_eq!(last, rep.spectral_radius_at_limit, max_relative = 0.05);
    }

    #[test]
    fn contraction_profile_trivial_at_limit() {
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let traj = run_em(&v1(1.0), &ctx, 1e-8, 10);
        let rep = contraction_profile(&traj, &ctx).unwrap();
        assert!(rep.contraction_factors.is_empty());
    }

    #[test]
    fn bracket_check_examples() {
        let ctx = ctx_1d(
            1.0,
            1.0,
            TruncationSpec::interval(0.5, f64::INFINITY).unwrap(),
        );
        let at_mu = run_em(&v1(1.0), &ctx, 1e-8, 10);
        assert!(bracket_check(&at_mu, 1.0));
        let below = run_em(&v1(0.3), &ctx, 1e-8, 1000);
        assert!(bracket_check(&below, 1.0));
        let above = run_em(&v1(2.5), &ctx, 1e-8, 1000);
        assert!(bracket_check(&above, 1.0));
        // Iterates from above decrease toward mu.
        let xs: Vec<f64> = above.states.iter().map(|s| s.lambda[0]).collect();
        assert!(xs.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn local_rate_untruncated_2d() {
        let p =
            MixtureParams::new(DVector::from_vec(vec![1.0, 0.5]), DMatrix::identity(2, 2)).unwrap();
        let ctx = Context::new(p, TruncationSpec::constant_one(), QuadConfig::default()).unwrap();
        let rep = local_rate_check(&ctx).unwrap();
        assert_relative_eq!(rep.alpha, 1.0, epsilon = 1e-10);
        assert!(rep.both_below_one);
        assert!(rep.radius_plus < 1.0 && rep.radius_minus < 1.0);
    }
}
