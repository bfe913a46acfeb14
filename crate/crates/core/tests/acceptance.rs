//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). Randomized
//! configurations are deterministic from fixed seeds.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use truncmix::analysis::{
    d_cross_moment_lambda, d_cross_moment_mu, d_self_moment, em_jacobian, fd_step,
    finite_diff_jacobian, Classification,
};
use truncmix::em::{
    em_step, fixed_point_residual, run_em, self_moment, target_moment, Context,
};
use truncmix::landscape::{
    basin_sample, multistart_fixed_points, refine_mu_for_fixed_point, scan_fixed_points_1d,
};
use truncmix::model::{MixtureParams, TruncationSpec};
use truncmix::quad::{survival_mass, QuadConfig};
use truncmix::rates::{
    bracket_check, contraction_profile, denominator_identity_check,
    fkg_monotone_check_with_breakpoints, fkg_quantitative_check, local_rate_check,
    numerator_bound_eval, Density1d, FkgCheckSpec, ScalarFn,
};

fn report(criterion: usize, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion:2} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.8..0.8));
    &g * g.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.4..1.2)
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_vec(vec![x])
}

/// Random 1-D truncation with enough survival mass: intervals, half-lines,
/// unions, soft steps and soft ramps.
fn random_trunc_1d(rng: &mut ChaCha8Rng) -> TruncationSpec {
    match rng.gen_range(0..5) {
        0 => {
            let lo = rng.gen_range(-2.0..0.5);
            let hi = lo + rng.gen_range(1.0..3.5);
            TruncationSpec::interval(lo, hi).unwrap()
        }
        1 => TruncationSpec::interval(rng.gen_range(-1.5..0.8), f64::INFINITY).unwrap(),
        2 => {
            let a = rng.gen_range(-2.5..-0.5);
            let b = a + rng.gen_range(0.5..1.5);
            let c = rng.gen_range(0.0..1.0);
            let d = c + rng.gen_range(0.8..2.0);
            TruncationSpec::union(vec![
                TruncationSpec::interval(a, b).unwrap(),
                TruncationSpec::interval(c, d).unwrap(),
            ])
            .unwrap()
        }
        3 => {
            // level + (1 - level) * 1[x > threshold]
            let level = rng.gen_range(0.1..0.6);
            let thr = rng.gen_range(-1.0..1.0);
            TruncationSpec::soft(
                Arc::new(move |x: &[f64]| if x[0] > thr { 1.0 } else { level }),
                Some(vec![vec![thr]]),
            )
        }
        _ => {
            // linear ramp from 0 to 1 on [lo, hi]
            let lo = rng.gen_range(-2.0..0.0);
            let hi = lo + rng.gen_range(0.5..2.0);
            TruncationSpec::soft(
                Arc::new(move |x: &[f64]| ((x[0] - lo) / (hi - lo)).clamp(0.0, 1.0)),
                Some(vec![vec![lo, hi]]),
            )
        }
    }
}

/// Random 2-D truncation: boxes, half-spaces and Mahalanobis annuli.
fn random_trunc_2d(rng: &mut ChaCha8Rng) -> TruncationSpec {
    match rng.gen_range(0..3) {
        0 => {
            let lo1 = rng.gen_range(-2.5..0.0);
            let lo2 = rng.gen_range(-2.5..0.0);
            TruncationSpec::box_nd(vec![
                (lo1, lo1 + rng.gen_range(1.5..4.0)),
                (lo2, lo2 + rng.gen_range(1.5..4.0)),
            ])
            .unwrap()
        }
        1 => {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            TruncationSpec::half_space(
                DVector::from_vec(vec![angle.cos(), angle.sin()]),
                rng.gen_range(-1.0..0.5),
            )
            .unwrap()
        }
        _ => {
            let l = rng.gen_range(0.0..0.8);
            TruncationSpec::annulus_union(vec![(l, l + rng.gen_range(1.5..3.0))]).unwrap()
        }
    }
}

/// A randomized truncated context in dimension `d` with survival mass at
/// least `alpha_min`.
fn random_ctx(d: usize, alpha_min: f64, rng: &mut ChaCha8Rng) -> Context {
    loop {
        let mu = DVector::from_fn(d, |_, _| {
            let s: f64 = rng.gen_range(0.6..1.3);
            if rng.gen_bool(0.5) {
                s
            } else {
                -s
            }
        });
        let sigma = if rng.gen_bool(0.5) {
            random_spd(d, rng)
        } else {
            DMatrix::identity(d, d)
        };
        let params = MixtureParams::new(mu, sigma).unwrap();
        let trunc = if d == 1 {
            random_trunc_1d(rng)
        } else {
            random_trunc_2d(rng)
        };
        let ctx = Context::new(params, trunc, QuadConfig::default()).unwrap();
        match survival_mass(ctx.params(), ctx.trunc(), ctx.quad()) {
            Ok(a) if a.value >= alpha_min => return ctx,
            _ => continue,
        }
    }
}

#[test]
fn criterion_01_untruncated_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_self = 0.0f64;
    let mut worst_step = 0.0f64;
    for k in 0..20 {
        let d = k % 3 + 1;
        let mu = DVector::from_fn(d, |_, _| rng.gen_range(-1.5..1.5));
        let sigma = random_spd(d, &mut rng);
        let params = MixtureParams::new(mu, sigma).unwrap();
        let ctx = Context::new(
            params,
            TruncationSpec::constant_one(),
            QuadConfig::default(),
        )
        .unwrap();
        let lambda = loop {
            let l = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            if l.norm() > 0.3 {
                break l;
            }
        };
        let h = self_moment(&lambda, &ctx).unwrap();
        worst_self = worst_self.max((&h.value - &lambda).norm() / lambda.norm());

        let step = em_step(&lambda, &ctx, 1e-10).unwrap();
        let b = target_moment(&lambda, &ctx).unwrap();
        worst_step =
            worst_step.max((&step.lambda_next - &b.value).norm() / b.value.norm().max(1.0));
    }
    report(
        1,
        worst_self <= 1e-8 && worst_step <= 1e-7,
        &format!(
            "untruncated identities: worst self-moment rel {worst_self:.2e} (<= 1e-8), \
             worst em-step rel {worst_step:.2e} (<= 1e-7)"
        ),
    );
}

#[test]
fn criterion_02_canonical_fixed_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_ratio = 0.0f64;
    for k in 0..20 {
        let d = if k % 2 == 0 { 1 } else { 2 };
        let ctx = random_ctx(d, 0.05, &mut rng);
        let zero = DVector::zeros(d);
        for point in [ctx.mu().clone(), zero, -ctx.mu()] {
            let r = fixed_point_residual(&point, &ctx).unwrap();
            let budget = 10.0 * r.error_estimate;
            if budget > 0.0 {
                worst_ratio = worst_ratio.max(r.value / budget);
            } else {
                worst_ratio = worst_ratio.max(if r.value == 0.0 { 0.0 } else { f64::INFINITY });
            }
        }
    }
    report(
        2,
        worst_ratio <= 1.0,
        &format!(
            "canonical triple residuals vs 10x combined quadrature error: \
             worst ratio {worst_ratio:.3e}"
        ),
    );
}

#[test]
fn criterion_03_derivative_formulas_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for d in [1usize, 2] {
        for _ in 0..10 {
            let ctx = random_ctx(d, 0.05, &mut rng);
            let lambda = DVector::from_fn(d, |_, _| rng.gen_range(-1.2..1.2));
            let h = fd_step(&lambda);

            let ds = d_self_moment(&lambda, &ctx).unwrap().value;
            let fd_self =
                finite_diff_jacobian(|l| Ok(self_moment(l, &ctx)?.value), &lambda, h).unwrap();
            worst = worst.max((&ds - &fd_self).amax() / ds.amax());

            let dl = d_cross_moment_lambda(&lambda, &ctx).unwrap().value;
            let fd_lam =
                finite_diff_jacobian(|l| Ok(target_moment(l, &ctx)?.value), &lambda, h).unwrap();
            worst = worst.max((&dl - &fd_lam).amax() / dl.amax());

            let dm = d_cross_moment_mu(&lambda, &ctx).unwrap().value;
            let fd_mu = finite_diff_jacobian(
                |m| {
                    let moved = ctx.with_mu(m.clone())?;
                    Ok(target_moment(&lambda, &moved)?.value)
                },
                ctx.mu(),
                fd_step(ctx.mu()),
            )
            .unwrap();
            worst = worst.max((&dm - &fd_mu).amax() / dm.amax().max(1e-6));
        }
    }
    report(
        3,
        worst <= 1e-4,
        &format!("derivative formulas vs central differences: worst rel {worst:.2e} (<= 1e-4)"),
    );
}

#[test]
fn criterion_04_one_dimensional_stability() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut ok = true;
    let mut detail = String::new();
    for _ in 0..20 {
        let ctx = random_ctx(1, 0.05, &mut rng);
        let at_zero = em_jacobian(&v1(0.0), &ctx).unwrap().spectral_radius;
        let at_plus = em_jacobian(ctx.mu(), &ctx).unwrap().spectral_radius;
        let at_minus = em_jacobian(&-ctx.mu(), &ctx).unwrap().spectral_radius;
        if !(at_zero > 1.0 && at_plus < 1.0 && at_minus < 1.0) {
            ok = false;
            detail = format!("violation: at0 {at_zero} at+mu {at_plus} at-mu {at_minus}");
            break;
        }
    }
    // Closed form for the untruncated case.
    let mut worst_closed = 0.0f64;
    for _ in 0..5 {
        let mu: f64 = rng.gen_range(0.4..1.8);
        let s2: f64 = rng.gen_range(0.5..1.6);
        let params = MixtureParams::univariate(mu, s2).unwrap();
        let ctx = Context::new(
            params,
            TruncationSpec::constant_one(),
            QuadConfig::default(),
        )
        .unwrap();
        let got = em_jacobian(&v1(0.0), &ctx).unwrap().spectral_radius;
        worst_closed = worst_closed.max((got - (1.0 + mu * mu / s2)).abs());
    }
    if worst_closed > 1e-6 {
        ok = false;
        detail = format!("untruncated value at 0 off by {worst_closed:.2e}");
    }
    report(
        4,
        ok,
        &if detail.is_empty() {
            format!(
                "repelling at 0, attracting at +-mu on 20 truncations; \
                 untruncated 1 + mu^2/sigma^2 within {worst_closed:.2e}"
            )
        } else {
            detail
        },
    );
}

#[test]
fn criterion_05_exactly_three_roots_in_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut ok = true;
    let mut detail = String::new();
    for k in 0..20 {
        let ctx = random_ctx(1, 0.05, &mut rng);
        let mu = ctx.mu()[0].abs();
        let set = scan_fixed_points_1d(&ctx, -4.0 * mu, 4.0 * mu, 4000).unwrap();
        if set.len() != 3 {
            ok = false;
            detail = format!("config {k}: found {} roots: {:?}", set.len(), set.points);
            break;
        }
        let canonical = [-ctx.mu()[0], 0.0, ctx.mu()[0]];
        let mut sorted = canonical;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (p, want) in set.points.iter().zip(sorted) {
            if (p[0] - want).abs() > 1e-5 {
                ok = false;
                detail = format!("config {k}: root {} far from {want}", p[0]);
            }
        }
    }
    report(
        5,
        ok,
        &if detail.is_empty() {
            "20 randomized truncations (asymmetric sets, soft functions): \
             scan finds exactly {-mu, 0, mu}"
                .to_string()
        } else {
            detail
        },
    );
}

#[test]
fn criterion_06_global_convergence_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let params = MixtureParams::univariate(1.0, 1.0).unwrap();
    let ramp = TruncationSpec::soft(
        Arc::new(move |x: &[f64]| ((x[0] + 0.5) / 1.5).clamp(0.0, 1.0)),
        Some(vec![vec![-0.5, 1.0]]),
    );
    let truncs = vec![
        TruncationSpec::interval(0.5, f64::INFINITY).unwrap(),
        TruncationSpec::interval(-0.3, 2.0).unwrap(),
        ramp,
    ];
    let mut ok = true;
    let mut detail = String::new();
    'outer: for trunc in truncs {
        let ctx = Context::new(params.clone(), trunc, QuadConfig::default()).unwrap();
        for _ in 0..100 {
            let lambda0 = loop {
                let x: f64 = rng.gen_range(-3.0..3.0);
                if x.abs() >= 1e-3 {
                    break x;
                }
            };
            let traj = run_em(&v1(lambda0), &ctx, 1e-8, 1000);
            let target = lambda0.signum();
            let final_l = traj.final_lambda()[0];
            if !traj.converged || (final_l - target).abs() > 1e-6 {
                ok = false;
                detail = format!(
                    "init {lambda0}: converged={} final={final_l} target={target}",
                    traj.converged
                );
                break 'outer;
            }
            if !bracket_check(&traj, 1.0) {
                ok = false;
                detail = format!("bracket check failed from init {lambda0}");
                break 'outer;
            }
            let rep = contraction_profile(&traj, &ctx).unwrap();
            if rep.contraction_factors.iter().any(|&f| f >= 1.0) {
                ok = false;
                detail = format!("non-contracting factor from init {lambda0}");
                break 'outer;
            }
        }
    }
    report(
        6,
        ok,
        &if detail.is_empty() {
            "100 inits x 3 truncations all reach sign(lambda_0) mu within 1e-6, \
             bracketing and contraction hold"
                .to_string()
        } else {
            detail
        },
    );
}

#[test]
fn criterion_07_rotation_invariant_multid() {
    let params =
        MixtureParams::new(DVector::from_vec(vec![1.5, 0.5]), DMatrix::identity(2, 2)).unwrap();
    let trunc = TruncationSpec::annulus_union(vec![(1.0, 3.0)]).unwrap();
    let ctx = Context::new(params, trunc, QuadConfig::default()).unwrap();

    let set = multistart_fixed_points(&ctx, 64, 3.0, 707).unwrap();
    let three = set.len() == 3
        && set.contains_point(ctx.mu(), &ctx, 1e-6)
        && set.contains_point(&DVector::zeros(2), &ctx, 1e-6)
        && set.contains_point(&-ctx.mu(), &ctx, 1e-6);

    let basin = basin_sample(&ctx, 50, 2.5, 708, 2000).unwrap();
    let all_pm = basin.count_plus_mu + basin.count_minus_mu == 50;

    let r_plus = em_jacobian(ctx.mu(), &ctx).unwrap().spectral_radius;
    let r_zero = em_jacobian(&DVector::zeros(2), &ctx).unwrap();
    let stability = r_plus < 1.0 && r_zero.spectral_radius > 1.0;

    report(
        7,
        three && all_pm && stability,
        &format!(
            "annulus d=2: multistart(64) -> {} points, basin 50/50 to +-mu: {}, \
             radius(mu) {:.4} < 1, radius(0) {:.4} > 1",
            set.len(),
            all_pm,
            r_plus,
            r_zero.spectral_radius
        ),
    );
}

#[test]
fn criterion_08_rectangle_counterexample() {
    let params = MixtureParams::new(
        DVector::from_vec(vec![2.534, 6.395]),
        DMatrix::identity(2, 2),
    )
    .unwrap();
    let trunc = TruncationSpec::box_nd(vec![(1.0, 2.0), (-3.0, 1.5)]).unwrap();
    let ctx = Context::new(params, trunc, QuadConfig::default()).unwrap();
    let point = DVector::from_vec(vec![1.0, 0.0]);

    let quoted = fixed_point_residual(&point, &ctx).unwrap().value;
    let (refined, resid) = refine_mu_for_fixed_point(&ctx, &point).unwrap();
    let shift = (refined.mu() - ctx.mu()).norm();
    let rep = em_jacobian(&point, &refined).unwrap();
    let straddle = rep.eigenvalues.iter().any(|e| e.norm() > 1.0)
        && rep.eigenvalues.iter().any(|e| e.norm() < 1.0);

    let pass = quoted <= 1e-3
        && shift <= 5e-3
        && resid <= 1e-8
        && rep.classification == Classification::Saddle
        && straddle;
    report(
        8,
        pass,
        &format!(
            "rectangle counterexample: residual((1,0)) {quoted:.2e} <= 1e-3 at quoted mean, \
             mu* shift {shift:.2e} <= 5e-3, refined residual {resid:.2e} <= 1e-8, \
             classification {:?} with eigen moduli straddling 1",
            rep.classification
        ),
    );
}

#[test]
fn criterion_09_rate_identities_and_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut ok = true;
    let mut detail = String::new();

    // Denominator identity on 10 (xi, S) pairs.
    let mut worst_denom = 0.0f64;
    for _ in 0..10 {
        let ctx = random_ctx(1, 0.05, &mut rng);
        let xi = rng.gen_range(0.2..1.5);
        let rep = denominator_identity_check(xi, &ctx).unwrap();
        worst_denom = worst_denom.max(rep.rel_discrepancy);
    }
    if worst_denom > 1e-6 {
        ok = false;
        detail = format!("denominator identity discrepancy {worst_denom:.2e} > 1e-6");
    }

    // Numerator minimum strictly positive on probed configurations.
    for _ in 0..6 {
        let ctx = random_ctx(1, 0.05, &mut rng);
        let mu = ctx.mu()[0].abs();
        let lam = rng.gen_range(0.15 * mu..0.85 * mu);
        let flipped = if ctx.mu()[0] < 0.0 {
            ctx.with_mu(v1(mu)).unwrap()
        } else {
            ctx
        };
        let rep = numerator_bound_eval(lam, &flipped, 15).unwrap();
        if !rep.all_positive {
            ok = false;
            detail = format!("numerator minimum {:.2e} not positive", rep.min_value);
        }
    }

    // Annulus-width sweep: radii below one, increasing as alpha shrinks.
    let mu = DVector::from_vec(vec![1.2, 0.4]);
    let mut last_alpha = f64::INFINITY;
    let mut last_radius = 0.0f64;
    let mut sweep = String::new();
    for w in [3.0, 2.2, 1.6, 1.2, 0.9, 0.7] {
        let params = MixtureParams::new(mu.clone(), DMatrix::identity(2, 2)).unwrap();
        let trunc = TruncationSpec::annulus_union(vec![(1.0, 1.0 + w)]).unwrap();
        let ctx = Context::new(params, trunc, QuadConfig::default()).unwrap();
        let rep = local_rate_check(&ctx).unwrap();
        sweep.push_str(&format!(" ({:.3},{:.3})", rep.alpha, rep.radius_plus));
        if !rep.both_below_one {
            ok = false;
            detail = format!(
                "sweep radius {:.4} >= 1",
                rep.radius_plus.max(rep.radius_minus)
            );
        }
        if !(rep.alpha < last_alpha && rep.radius_plus > last_radius) {
            ok = false;
            detail = format!("sweep not monotone:{sweep}");
        }
        last_alpha = rep.alpha;
        last_radius = rep.radius_plus;
    }

    report(
        9,
        ok,
        &if detail.is_empty() {
            format!(
                "denominator identity <= {worst_denom:.2e}, numerator minima positive, \
                 sweep (alpha, radius):{sweep} monotone with radius < 1"
            )
        } else {
            detail
        },
    );
}

#[test]
fn criterion_10_fkg_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let cfg = QuadConfig::default();

    // 200 random monotone step-function pairs under random truncated
    // mixtures.
    let mut monotone_ok = true;
    for _ in 0..200 {
        let mk = |rng: &mut ChaCha8Rng| {
            let k = rng.gen_range(1..=4);
            let steps: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.0)))
                .collect();
            steps
        };
        let fs = mk(&mut rng);
        let gs = mk(&mut rng);
        let mut bps: Vec<f64> = fs.iter().chain(&gs).map(|s| s.0).collect();
        bps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let f =
            move |x: f64| -> f64 { fs.iter().map(|&(t, a)| if x >= t { a } else { 0.0 }).sum() };
        let g =
            move |x: f64| -> f64 { gs.iter().map(|&(t, a)| if x >= t { a } else { 0.0 }).sum() };

        let ctx = random_ctx(1, 0.02, &mut rng);
        let dist = Density1d::TruncatedMixture {
            params: ctx.params().clone(),
            trunc: ctx.trunc().clone(),
        };
        if !fkg_monotone_check_with_breakpoints(&f, &g, &bps, &dist, &cfg).unwrap() {
            monotone_ok = false;
            break;
        }
    }

    // The quantitative instance with closed-form values.
    let sq: ScalarFn = Arc::new(|x: f64| x * x);
    let spec = FkgCheckSpec::new(
        sq.clone(),
        sq,
        0.5,
        Density1d::Uniform { lo: -1.0, hi: 1.0 },
        &cfg,
    )
    .unwrap();
    let rep = fkg_quantitative_check(&spec, &cfg).unwrap();
    let lhs_ok = (rep.lhs - 4.0 / 45.0).abs() <= 1e-6;
    let std_ok = (rep.rhs_std - 7.0 / 24.0).abs() <= 1e-6 && !rep.holds_std;
    let folded_ok = (rep.rhs_folded - 1.0 / 96.0).abs() <= 1e-6 && rep.holds_folded;

    report(
        10,
        monotone_ok && lhs_ok && std_ok && folded_ok,
        &format!(
            "monotone FKG on 200 random pairs: {monotone_ok}; quantitative instance \
             LHS {:.6} (4/45), RHS_std {:.6} (7/24, literal bound fails as documented), \
             RHS_folded {:.6} (1/96, holds)",
            rep.lhs, rep.rhs_std, rep.rhs_folded
        ),
    );
}
