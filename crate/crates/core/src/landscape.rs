//! Fixed-point enumeration, vector-field and basin exports.
//!
//! A fixed point of the EM map solves `psi(lambda) = b(lambda) - H(lambda) = 0`
//! where both moments use the same `lambda` (target measure `mu` in `b`,
//! moving measure in `H`). The canonical triple `{-mu, 0, mu}` always
//! satisfies this; scans and multistarts look for anything else.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{em_jacobian, JacobianReport};
use crate::em::{run_em, Context, EmTrajectory, LimitLabel};
use crate::moments;
use crate::{Error, Result};

/// Residual below which a point is accepted as a fixed point by the scan.
pub const SCAN_RESIDUAL_TOL: f64 = 1e-9;
/// Residual below which a multistart root is accepted.
pub const MULTISTART_RESIDUAL_TOL: f64 = 1e-8;

/// Fixed points with their residuals and stability reports.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointSet {
    pub points: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub reports: Vec<JacobianReport>,
    /// Newton starts that did not converge to an accepted root.
    pub failed_starts: usize,
}

impl FixedPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// True if some accepted point lies within `tol` (whitened) of `target`.
    pub fn contains_point(&self, target: &DVector<f64>, ctx: &Context, tol: f64) -> bool {
        self.points
            .iter()
            .any(|p| ctx.whitened_distance(&DVector::from_vec(p.clone()), target) <= tol)
    }
}

/// `psi(lambda) = b(lambda) - H(lambda)` and the combined quadrature error.
fn psi(ctx: &Context, lambda: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let b = moments::x_tanh(ctx, ctx.mu(), lambda)?;
    let h = moments::x_tanh(ctx, lambda, lambda)?;
    let err = b.error_norm() + h.error_norm();
    Ok((&b.value - &h.value, err))
}

/// Full Newton state at a point: `psi`, its Jacobian pieces and residual,
/// from two fused quadrature passes.
struct PsiState {
    lambda: DVector<f64>,
    value: DVector<f64>,
    residual: f64,
    /// `A = E_lambda[xx^T] - H H^T` (self-side derivative times `Sigma`).
    a: nalgebra::DMatrix<f64>,
    /// `B = E_mu[xx^T (1 - tanh^2)]` (target-side derivative times `Sigma`).
    b: nalgebra::DMatrix<f64>,
}

fn eval_psi_state(ctx: &Context, lambda: &DVector<f64>) -> Result<PsiState> {
    let target = moments::x_tanh_and_xx_sech2(ctx, ctx.mu(), lambda)?;
    let own = moments::x_tanh_and_xx(ctx, lambda, lambda)?;
    let value = &target.first - &own.first;
    let a = &own.second - &own.first * own.first.transpose();
    Ok(PsiState {
        lambda: lambda.clone(),
        residual: value.norm(),
        value,
        a,
        b: target.sech2_second,
    })
}

/// Damped Newton iteration on `psi`, returning the polished point and its
/// residual when the residual target is met.
///
/// Acceptance needs both a small residual and a small final Newton step:
/// around the repelling origin `psi` can vanish to cubic order on a
/// hyperplane (rank-one linearization), where tiny residuals occur at points
/// still `O(tol^{1/3})` away from the root. The step check keeps iterating
/// through that regime instead of accepting a smeared root.
fn newton_fixed_point(
    ctx: &Context,
    start: &DVector<f64>,
    residual_tol: f64,
    position_tol: f64,
    max_iters: usize,
) -> Result<Option<(DVector<f64>, f64)>> {
    let cap = 2.0 * (ctx.mu().norm() + 3.0);
    let mut state = match eval_psi_state(ctx, start) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };

    for _ in 0..max_iters {
        // d psi / d lambda (column layout) = (B - A) Sigma^{-1}.
        let jac = (&state.b - &state.a) * ctx.sigma_inv();
        let Some(mut delta) = jac.lu().solve(&(-&state.value)) else {
            break;
        };
        if state.residual <= residual_tol * 0.01 && delta.norm() <= position_tol {
            break;
        }
        let dn = delta.norm();
        if dn > cap {
            delta *= cap / dn;
        }
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..10 {
            let trial = &state.lambda + &delta * t;
            if let Ok(trial_state) = eval_psi_state(ctx, &trial) {
                if trial_state.residual < state.residual {
                    state = trial_state;
                    improved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }

    if state.residual <= residual_tol {
        Ok(Some((state.lambda, state.residual)))
    } else {
        Ok(None)
    }
}

fn dedupe_and_classify(
    ctx: &Context,
    candidates: Vec<(DVector<f64>, f64)>,
    dedupe_radius: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<JacobianReport>)> {
    let mut points: Vec<DVector<f64>> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    for (p, r) in candidates {
        match points
            .iter()
            .position(|q| ctx.whitened_distance(q, &p) <= dedupe_radius)
        {
            Some(i) => {
                // Keep the better-polished representative of the cluster.
                if r < residuals[i] {
                    points[i] = p;
                    residuals[i] = r;
                }
            }
            None => {
                points.push(p);
                residuals.push(r);
            }
        }
    }
    let mut reports = Vec::with_capacity(points.len());
    for p in &points {
        reports.push(em_jacobian(p, ctx)?);
    }
    Ok((
        points.iter().map(|p| p.iter().copied().collect()).collect(),
        residuals,
        reports,
    ))
}

/// 1-D fixed-point scan: evaluates `psi` on a uniform grid over `[lo, hi]`,
/// bisects every sign change down to `|psi| <= 1e-9`, polishes grid minima of
/// `|psi|` by Newton (tangential roots would otherwise be missed), always
/// probes the canonical triple, dedupes within 1e-6 and classifies each root.
pub fn scan_fixed_points_1d(ctx: &Context, lo: f64, hi: f64, n: usize) -> Result<FixedPointSet> {
    if ctx.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: ctx.dim(),
        });
    }
    if !(lo < hi) || n < 100 {
        return Err(Error::InvalidParameter(
            "scan requires lo < hi and n >= 100".into(),
        ));
    }

    let grid: Vec<f64> = (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect();
    let values: Result<Vec<f64>> = grid
        .par_iter()
        .map(|&x| Ok(psi(ctx, &DVector::from_vec(vec![x]))?.0[0]))
        .collect();
    let values = values?;

    let mut candidates: Vec<(DVector<f64>, f64)> = Vec::new();

    // Canonical triple first.
    let mu = ctx.mu()[0];
    for x in [-mu, 0.0, mu] {
        let (v, _) = psi(ctx, &DVector::from_vec(vec![x]))?;
        if v.norm() <= SCAN_RESIDUAL_TOL {
            candidates.push((DVector::from_vec(vec![x]), v.norm()));
        }
    }

    // Bisection on sign changes.
    for i in 0..n {
        if values[i] == 0.0 {
            candidates.push((DVector::from_vec(vec![grid[i]]), 0.0));
            continue;
        }
        if values[i].signum() * values[i + 1].signum() < 0.0 {
            let (mut a, mut fa) = (grid[i], values[i]);
            let mut b = grid[i + 1];
            let mut mid = 0.5 * (a + b);
            let mut fm = 0.0;
            for _ in 0..200 {
                mid = 0.5 * (a + b);
                fm = psi(ctx, &DVector::from_vec(vec![mid]))?.0[0];
                if fm.abs() <= SCAN_RESIDUAL_TOL || (b - a) < 1e-15 * (hi - lo) {
                    break;
                }
                if fa.signum() * fm.signum() < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            if fm.abs() <= SCAN_RESIDUAL_TOL {
                candidates.push((DVector::from_vec(vec![mid]), fm.abs()));
            }
        }
    }

    // Newton from interior minima of |psi| without an adjacent sign change.
    for i in 1..n {
        let (l, c, r) = (values[i - 1].abs(), values[i].abs(), values[i + 1].abs());
        if c < l && c < r && values[i - 1].signum() == values[i + 1].signum() {
            if let Some(hit) = newton_fixed_point(
                ctx,
                &DVector::from_vec(vec![grid[i]]),
                SCAN_RESIDUAL_TOL,
                1e-6,
                40,
            )? {
                candidates.push(hit);
            }
        }
    }

    candidates.sort_by(|x, y| x.0[0].partial_cmp(&y.0[0]).unwrap());
    let sigma = ctx.params().sigma()[(0, 0)].sqrt();
    let (points, residuals, reports) = dedupe_and_classify(ctx, candidates, 1e-6 / sigma)?;
    Ok(FixedPointSet {
        points,
        residuals,
        reports,
        failed_starts: 0,
    })
}

/// Multistart Newton root-finding on `psi` from uniform starts in the
/// whitened box `[-box_scale ||mu||, box_scale ||mu||]^d`, always probing the
/// canonical triple as well. Roots are accepted at residual 1e-8 and deduped
/// within `1e-5 (1 + ||mu||)` in whitened coordinates.
pub fn multistart_fixed_points(
    ctx: &Context,
    n_starts: usize,
    box_scale: f64,
    rng_seed: u64,
) -> Result<FixedPointSet> {
    if n_starts < 1 {
        return Err(Error::InvalidParameter("n_starts must be >= 1".into()));
    }
    let d = ctx.dim();
    let mu_w_norm = ctx.whitener().whitened_norm(ctx.mu()).max(1e-6);
    let half = box_scale * mu_w_norm;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut starts: Vec<DVector<f64>> =
        vec![ctx.mu().clone(), DVector::zeros(d), -ctx.mu().clone()];
    for _ in 0..n_starts {
        let z = DVector::from_fn(d, |_, _| rng.gen_range(-half..half));
        starts.push(ctx.whitener().to_original(&z));
    }

    let dedupe = 1e-5 * (1.0 + ctx.mu().norm());
    let results: Result<Vec<Option<(DVector<f64>, f64)>>> = starts
        .par_iter()
        .map(|s| newton_fixed_point(ctx, s, MULTISTART_RESIDUAL_TOL, 0.2 * dedupe, 60))
        .collect();
    let results = results?;

    let failed = results.iter().filter(|r| r.is_none()).count();
    let mut candidates: Vec<(DVector<f64>, f64)> = results.into_iter().flatten().collect();
    // psi is odd, so the mirror of every root is a root with the identical
    // residual; include it in case no start landed in that basin.
    for i in 0..candidates.len() {
        let (p, r) = (&candidates[i].0, candidates[i].1);
        if p.norm() > dedupe {
            candidates.push((-p, r));
        }
    }
    let (points, residuals, reports) = dedupe_and_classify(ctx, candidates, dedupe)?;
    Ok(FixedPointSet {
        points,
        residuals,
        reports,
        failed_starts: failed,
    })
}

/// Re-solves the true mean so that `point` is exactly a fixed point of the
/// EM map, keeping `Sigma` and the truncation. Newton in the location
/// parameter of the target measure; returns the adjusted context and the
/// final fixed-point residual at `point`.
pub fn refine_mu_for_fixed_point(ctx: &Context, point: &DVector<f64>) -> Result<(Context, f64)> {
    let h = moments::x_tanh(ctx, point, point)?.value;
    let mut mu = ctx.mu().clone();
    let mut best: Option<(DVector<f64>, f64)> = None;

    for _ in 0..60 {
        let moved = ctx.with_mu(mu.clone())?;
        let set = moments::cross_tanh_set(&moved, &mu, point, &mu)?;
        let b = set.first_a.clone(); // E_{mu,S}[x tanh_point]
        let resid = (&b - &h).norm();
        if best.as_ref().is_none_or(|(_, r)| resid < *r) {
            best = Some((mu.clone(), resid));
        }
        if resid <= 1e-12 {
            break;
        }
        // Column-layout derivative of b in mu: (C - b v^T) Sigma^{-1},
        // v = E_{mu,S}[x tanh_mu].
        let jac = (&set.second - &b * set.first_b.transpose()) * ctx.sigma_inv();
        let Some(delta) = jac.lu().solve(&(&h - &b)) else {
            break;
        };
        mu += delta;
    }

    let (mu_star, _) =
        best.ok_or_else(|| Error::QuadratureFailure("mu refinement failed".into()))?;
    let refined = ctx.with_mu(mu_star)?;
    let resid = crate::em::fixed_point_residual(point, &refined)?.value;
    Ok((refined, resid))
}

/// Rectangular evaluation grid for 2-D vector fields.
#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldCell {
    pub lambda: [f64; 2],
    /// `em_step(lambda) - lambda`; zeros with `failed = true` when the inner
    /// solve did not converge (never silently).
    pub displacement: [f64; 2],
    pub failed: bool,
}

/// Per-cell EM displacement field.
#[derive(Debug, Clone, Serialize)]
pub struct VectorFieldGrid {
    pub spec: GridSpec,
    pub cells: Vec<FieldCell>,
}

impl VectorFieldGrid {
    /// CSV with columns `lambda_1, lambda_2, d_1, d_2, flag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda_1,lambda_2,d_1,d_2,flag\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.lambda[0],
                c.lambda[1],
                c.displacement[0],
                c.displacement[1],
                u8::from(c.failed)
            ));
        }
        out
    }
}

/// Evaluates `em_step(lambda) - lambda` on the grid (row-major, x outer).
pub fn vector_field_2d(ctx: &Context, spec: &GridSpec) -> Result<VectorFieldGrid> {
    if ctx.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: ctx.dim(),
        });
    }
    if spec.nx < 2 || spec.ny < 2 {
        return Err(Error::InvalidParameter(
            "grid needs at least 2x2 cells".into(),
        ));
    }
    let points: Vec<(f64, f64)> = (0..spec.nx)
        .flat_map(|i| {
            let x = spec.x_min + (spec.x_max - spec.x_min) * i as f64 / (spec.nx - 1) as f64;
            (0..spec.ny).map(move |j| {
                let y = spec.y_min + (spec.y_max - spec.y_min) * j as f64 / (spec.ny - 1) as f64;
                (x, y)
            })
        })
        .collect();

    let cells: Vec<FieldCell> = points
        .par_iter()
        .map(|&(x, y)| {
            let lambda = DVector::from_vec(vec![x, y]);
            match crate::em::em_step(&lambda, ctx, ctx.inner_tol) {
                Ok(step) => FieldCell {
                    lambda: [x, y],
                    displacement: [step.lambda_next[0] - x, step.lambda_next[1] - y],
                    failed: false,
                },
                Err(_) => FieldCell {
                    lambda: [x, y],
                    displacement: [0.0, 0.0],
                    failed: true,
                },
            }
        })
        .collect();

    Ok(VectorFieldGrid {
        spec: spec.clone(),
        cells,
    })
}

/// One basin-sampling run.
#[derive(Debug, Clone, Serialize)]
pub struct BasinRun {
    pub init: Vec<f64>,
    pub label: LimitLabel,
    pub iterations: usize,
}

/// Label tallies over random initializations.
#[derive(Debug, Clone, Serialize)]
pub struct BasinReport {
    pub n_inits: usize,
    pub count_plus_mu: usize,
    pub count_minus_mu: usize,
    pub count_zero: usize,
    pub count_other: usize,
    pub count_not_converged: usize,
    pub fraction_plus_mu: f64,
    pub fraction_minus_mu: f64,
    pub fraction_pm_mu: f64,
    pub runs: Vec<BasinRun>,
}

/// Runs EM from `n_inits` random starts, uniform in the whitened box of
/// half-width `init_scale * ||mu||`, excluding the ball `||lambda_0|| < 1e-3`
/// around the repelling fixed point at the origin.
pub fn basin_sample(
    ctx: &Context,
    n_inits: usize,
    init_scale: f64,
    rng_seed: u64,
    max_iters: usize,
) -> Result<BasinReport> {
    if n_inits < 1 {
        return Err(Error::InvalidParameter("n_inits must be >= 1".into()));
    }
    let d = ctx.dim();
    let mu_w_norm = ctx.whitener().whitened_norm(ctx.mu()).max(1e-6);
    let half = init_scale * mu_w_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut inits = Vec::with_capacity(n_inits);
    while inits.len() < n_inits {
        let z = DVector::from_fn(d, |_, _| rng.gen_range(-half..half));
        if z.norm() < 1e-3 {
            continue;
        }
        inits.push(ctx.whitener().to_original(&z));
    }

    let trajectories: Vec<EmTrajectory> = inits
        .par_iter()
        .map(|x0| run_em(x0, ctx, ctx.outer_tol, max_iters))
        .collect();

    let mut report = BasinReport {
        n_inits,
        count_plus_mu: 0,
        count_minus_mu: 0,
        count_zero: 0,
        count_other: 0,
        count_not_converged: 0,
        fraction_plus_mu: 0.0,
        fraction_minus_mu: 0.0,
        fraction_pm_mu: 0.0,
        runs: Vec::with_capacity(n_inits),
    };
    for (init, traj) in inits.iter().zip(&trajectories) {
        match traj.limit_label {
            LimitLabel::PlusMu => report.count_plus_mu += 1,
            LimitLabel::MinusMu => report.count_minus_mu += 1,
            LimitLabel::Zero => report.count_zero += 1,
            LimitLabel::Other(_) => report.count_other += 1,
            LimitLabel::NotConverged => report.count_not_converged += 1,
        }
        report.runs.push(BasinRun {
            init: init.iter().copied().collect(),
            label: traj.limit_label.clone(),
            iterations: traj.states.len() - 1,
        });
    }
    let nf = n_inits as f64;
    report.fraction_plus_mu = report.count_plus_mu as f64 / nf;
    report.fraction_minus_mu = report.count_minus_mu as f64 / nf;
    report.fraction_pm_mu = (report.count_plus_mu + report.count_minus_mu) as f64 / nf;
    Ok(report)
}
