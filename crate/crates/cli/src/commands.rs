//! Subcommand implementations. Each writes its artifacts through
//! [`OutputWriter`] and prints a one-line summary.

use anyhow::{bail, Result};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use truncmix::analysis::{
    d_cross_moment_lambda, d_cross_moment_mu, d_self_moment, em_jacobian, fd_step,
    finite_diff_jacobian, pd_product_spectrum_check,
};
use truncmix::em::{self, run_em, Context, LimitLabel};
use truncmix::landscape::{
    basin_sample, multistart_fixed_points, scan_fixed_points_1d, vector_field_2d, GridSpec,
};
use truncmix::model::validate_symmetry;
use truncmix::quad::{survival_mass, ALPHA_WARN};
use truncmix::rates::{
    bracket_check, contraction_profile, denominator_identity_check, fkg_monotone_check,
    fkg_quantitative_check, local_rate_check, numerator_bound_eval, Density1d, FkgCheckSpec,
};

use crate::config::ExperimentConfig;
use crate::output::OutputWriter;

fn warn_small_alpha(ctx: &Context) -> Result<f64> {
    let alpha = survival_mass(ctx.params(), ctx.trunc(), ctx.quad())?.value;
    if alpha < ALPHA_WARN {
        eprintln!(
            "warning: survival mass alpha = {alpha:.3e} is below {ALPHA_WARN:.0e}; \
             integration noise may dominate"
        );
    }
    Ok(alpha)
}

fn initial_point(cfg: &ExperimentConfig, ctx: &Context) -> Result<DVector<f64>> {
    let d = ctx.dim();
    let mut lambda0 = match (&cfg.run.lambda0, cfg.run.init_seed) {
        (Some(v), _) => {
            if v.len() != d {
                bail!("run.lambda0 has length {} but dimension is {d}", v.len());
            }
            DVector::from_vec(v.clone())
        }
        (None, Some(seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu_norm = ctx.whitener().whitened_norm(ctx.mu()).max(1e-6);
            let half = cfg.run.init_scale * mu_norm;
            let z = DVector::from_fn(d, |_, _| rng.gen_range(-half..half));
            ctx.whitener().to_original(&z)
        }
        (None, None) => bail!("provide run.lambda0 or run.init_seed"),
    };
    if cfg.run.perturb_zero && lambda0.norm() < 1e-3 {
        lambda0[0] += 1e-3;
    }
    Ok(lambda0)
}

#[derive(Serialize)]
struct RunSummary {
    alpha: f64,
    lambda0: Vec<f64>,
    iterations: usize,
    converged: bool,
    limit_label: LimitLabel,
    final_lambda: Vec<f64>,
    final_step_norm: f64,
    final_inner_residual: f64,
    solver_error: Option<String>,
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    let alpha = warn_small_alpha(&ctx)?;
    let lambda0 = initial_point(cfg, &ctx)?;
    let traj = run_em(&lambda0, &ctx, ctx.outer_tol, cfg.solver.max_iters);
    let last = traj.states.last().expect("non-empty trajectory");
    let summary = RunSummary {
        alpha,
        lambda0: lambda0.iter().copied().collect(),
        iterations: traj.states.len() - 1,
        converged: traj.converged,
        limit_label: traj.limit_label.clone(),
        final_lambda: last.lambda.clone(),
        final_step_norm: last.step_norm,
        final_inner_residual: last.inner_residual,
        solver_error: traj.solver_error.clone(),
    };
    out.write_csv("trajectory.csv", &traj.to_csv())?;
    out.write_json("run_summary.json", &summary)?;
    println!(
        "run: {} iterations, converged = {}, label = {:?}",
        summary.iterations, summary.converged, summary.limit_label
    );
    Ok(if traj.solver_error.is_some() { 1 } else { 0 })
}

pub fn cmd_scan(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    warn_small_alpha(&ctx)?;
    if ctx.dim() != 1 {
        bail!("scan requires a 1-D configuration");
    }
    let set = scan_fixed_points_1d(&ctx, cfg.scan.lo, cfg.scan.hi, cfg.scan.n)?;
    out.write_json("fixed_points.json", &set)?;
    println!(
        "scan: {} fixed points over [{}, {}]",
        set.len(),
        cfg.scan.lo,
        cfg.scan.hi
    );
    Ok(0)
}

pub fn cmd_multistart(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    warn_small_alpha(&ctx)?;
    let set = multistart_fixed_points(
        &ctx,
        cfg.multistart.n_starts,
        cfg.multistart.box_scale,
        cfg.multistart.seed,
    )?;
    out.write_json("fixed_points.json", &set)?;
    println!(
        "multistart: {} fixed points from {} starts ({} failed)",
        set.len(),
        cfg.multistart.n_starts,
        set.failed_starts
    );
    Ok(0)
}

pub fn cmd_field(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    warn_small_alpha(&ctx)?;
    let spec = GridSpec {
        x_min: cfg.field.x_min,
        x_max: cfg.field.x_max,
        nx: cfg.field.nx,
        y_min: cfg.field.y_min,
        y_max: cfg.field.y_max,
        ny: cfg.field.ny,
    };
    let grid = vector_field_2d(&ctx, &spec)?;
    let failed = grid.cells.iter().filter(|c| c.failed).count();
    out.write_csv("vector_field.csv", &grid.to_csv())?;
    println!("field: {} cells ({} flagged)", grid.cells.len(), failed);
    Ok(0)
}

pub fn cmd_basin(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    warn_small_alpha(&ctx)?;
    let report = basin_sample(
        &ctx,
        cfg.basin.n_inits,
        cfg.basin.init_scale,
        cfg.basin.seed,
        cfg.solver.max_iters,
    )?;
    let mut csv = String::from("init_norm,label,iterations\n");
    for run in &report.runs {
        let norm = run.init.iter().map(|v| v * v).sum::<f64>().sqrt();
        csv.push_str(&format!("{},{:?},{}\n", norm, run.label, run.iterations));
    }
    out.write_csv("basin.csv", &csv)?;
    out.write_json("basin.json", &report)?;
    println!(
        "basin: {}/{} to +mu, {}/{} to -mu, {} other, {} unconverged",
        report.count_plus_mu,
        report.n_inits,
        report.count_minus_mu,
        report.n_inits,
        report.count_other + report.count_zero,
        report.count_not_converged
    );
    Ok(0)
}

#[derive(Serialize)]
struct RatesArtifact {
    alpha: f64,
    contraction: Option<truncmix::rates::RateReport>,
    bracket_ok: Option<bool>,
    denominator_identity: Option<truncmix::rates::DenominatorIdentityReport>,
    numerator_bound: Option<truncmix::rates::NumeratorBoundReport>,
    local_rate: truncmix::rates::LocalRateReport,
}

pub fn cmd_rates(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    let alpha = warn_small_alpha(&ctx)?;

    let contraction = match &cfg.rates.lambda0 {
        Some(l0) => {
            let traj = run_em(
                &DVector::from_vec(l0.clone()),
                &ctx,
                ctx.outer_tol,
                cfg.solver.max_iters,
            );
            if traj.converged {
                Some(contraction_profile(&traj, &ctx)?)
            } else {
                None
            }
        }
        None => None,
    };
    let bracket_ok = match (&cfg.rates.lambda0, ctx.dim()) {
        (Some(l0), 1) => {
            let traj = run_em(
                &DVector::from_vec(l0.clone()),
                &ctx,
                ctx.outer_tol,
                cfg.solver.max_iters,
            );
            Some(bracket_check(&traj, ctx.mu()[0]))
        }
        _ => None,
    };

    let denominator_identity = match (cfg.rates.xi, ctx.dim()) {
        (Some(xi), 1) => Some(denominator_identity_check(xi, &ctx)?),
        _ => None,
    };
    let numerator_bound = if ctx.dim() == 1 {
        let mu = ctx.mu()[0];
        let lam = cfg.rates.lambda0.as_ref().map(|l| l[0]).unwrap_or(0.5 * mu);
        if lam > 0.0 && lam < mu {
            Some(numerator_bound_eval(lam, &ctx, cfg.rates.n_xi)?)
        } else {
            None
        }
    } else {
        None
    };

    let local_rate = local_rate_check(&ctx)?;

    // Optional annulus-width sweep around the configured mean.
    if !cfg.rates.sweep_widths.is_empty() {
        let mut csv = String::from("alpha,radius,fitted_c\n");
        for &w in &cfg.rates.sweep_widths {
            let inner = cfg.rates.sweep_inner_radius;
            let trunc = truncmix::model::TruncationSpec::annulus_union(vec![(inner, inner + w)])?;
            let swept = Context::new(cfg.build_params()?, trunc, cfg.quad.clone())?
                .with_tols(cfg.solver.inner_tol, cfg.solver.outer_tol);
            let rep = local_rate_check(&swept)?;
            csv.push_str(&format!(
                "{},{},{}\n",
                rep.alpha,
                rep.radius_plus.max(rep.radius_minus),
                rep.fitted_multiplier
            ));
        }
        out.write_csv("rate_sweep.csv", &csv)?;
    }

    let artifact = RatesArtifact {
        alpha,
        contraction,
        bracket_ok,
        denominator_identity,
        numerator_bound,
        local_rate,
    };
    out.write_json("rates.json", &artifact)?;
    println!(
        "rates: alpha = {alpha:.6}, spectral radius at +-mu = {:.6}/{:.6}",
        artifact.local_rate.radius_plus, artifact.local_rate.radius_minus
    );
    Ok(0)
}

#[derive(Serialize)]
struct CheckResult {
    name: String,
    hard: bool,
    pass: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyArtifact {
    checks: Vec<CheckResult>,
    hard_failures: usize,
}

/// Full invariant battery on the configured context. Hard checks are the
/// identities and stability facts the analysis guarantees; soft checks are
/// fitted-constant reports and the literal form of the quantitative FKG
/// bound, which is expected to fail on sign-mixed mass and is logged only.
pub fn cmd_verify(cfg: &ExperimentConfig, out: &OutputWriter) -> Result<i32> {
    let ctx = cfg.build_context()?;
    let d = ctx.dim();
    let mut checks: Vec<CheckResult> = Vec::new();
    let hard = |name: &str, pass: bool, detail: String, checks: &mut Vec<CheckResult>| {
        checks.push(CheckResult {
            name: name.to_string(),
            hard: true,
            pass,
            detail,
        });
    };

    // Survival mass in range.
    let alpha = survival_mass(ctx.params(), ctx.trunc(), ctx.quad())?;
    hard(
        "survival_mass_in_unit_interval",
        alpha.value > 0.0 && alpha.value <= 1.0 + 1e-9,
        format!(
            "alpha = {:.6e} (err {:.1e})",
            alpha.value, alpha.error_estimate
        ),
        &mut checks,
    );

    // Normalization: E[1] = 1.
    let one = truncmix::quad::expect_scalar(|_| 1.0, ctx.params(), ctx.trunc(), ctx.quad())?;
    hard(
        "normalization_unit_expectation",
        (one.value - 1.0).abs() <= 1e-9,
        format!("E[1] = {:.12}", one.value),
        &mut checks,
    );

    // Symmetry probe against declared flags.
    let sym = validate_symmetry(ctx.trunc(), d, 512, cfg.quad.rng_seed);
    hard(
        "declared_symmetry_flags_consistent",
        !sym.contradicts_declared_even
            && !sym.contradicts_declared_rotation
            && !sym.range_violation,
        format!(
            "rotation dev {:.2e}, reflection dev {:.2e}",
            sym.max_rotation_deviation, sym.max_reflection_deviation
        ),
        &mut checks,
    );

    // Derivative formulas vs finite differences at a generic probe point.
    let probe = {
        let mut p = ctx.mu().clone() * 0.6;
        p[0] += 0.1;
        p
    };
    let h = fd_step(&probe);
    let ds = d_self_moment(&probe, &ctx)?.value;
    let fd_self = finite_diff_jacobian(|l| Ok(em::self_moment(l, &ctx)?.value), &probe, h)?;
    let rel_self = (&ds - &fd_self).amax() / ds.amax();
    hard(
        "self_moment_derivative_matches_fd",
        rel_self <= 1e-4,
        format!("rel {rel_self:.2e}"),
        &mut checks,
    );
    let dl = d_cross_moment_lambda(&probe, &ctx)?.value;
    let fd_l = finite_diff_jacobian(|l| Ok(em::target_moment(l, &ctx)?.value), &probe, h)?;
    let rel_l = (&dl - &fd_l).amax() / dl.amax();
    hard(
        "cross_moment_lambda_derivative_matches_fd",
        rel_l <= 1e-4,
        format!("rel {rel_l:.2e}"),
        &mut checks,
    );
    let dm = d_cross_moment_mu(&probe, &ctx)?.value;
    let fd_m = finite_diff_jacobian(
        |m| {
            let moved = ctx.with_mu(m.clone())?;
            Ok(em::target_moment(&probe, &moved)?.value)
        },
        ctx.mu(),
        fd_step(ctx.mu()),
    )?;
    let rel_m = (&dm - &fd_m).amax() / dm.amax().max(1e-6);
    hard(
        "cross_moment_mu_derivative_matches_fd",
        rel_m <= 1e-4,
        format!("rel {rel_m:.2e}"),
        &mut checks,
    );

    // Positive definiteness of Sigma times the derivative matrices.
    let sds = ctx.params().sigma() * &ds;
    let min_a = ((&sds + sds.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .min();
    let sdl = ctx.params().sigma() * &dl;
    let min_b = ((&sdl + sdl.transpose()) * 0.5)
        .symmetric_eigen()
        .eigenvalues
        .min();
    hard(
        "sigma_times_derivatives_positive_definite",
        min_a > -1e-9 && min_b > -1e-9,
        format!("min eigenvalues {min_a:.3e}, {min_b:.3e}"),
        &mut checks,
    );

    // Product of SPD matrices has positive spectrum.
    let spd_ok = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.quad.rng_seed);
        let mut all = true;
        for _ in 0..20 {
            let g1 = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let g2 = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let a = &g1 * g1.transpose() + nalgebra::DMatrix::identity(d, d) * 0.2;
            let b = &g2 * g2.transpose() + nalgebra::DMatrix::identity(d, d) * 0.2;
            all &= pd_product_spectrum_check(&a, &b)?;
        }
        all
    };
    hard(
        "spd_product_spectrum_positive",
        spd_ok,
        "20 random SPD pairs".to_string(),
        &mut checks,
    );

    // Canonical fixed points.
    let mut worst_ratio = 0.0f64;
    for point in [ctx.mu().clone(), DVector::zeros(d), -ctx.mu()] {
        let r = em::fixed_point_residual(&point, &ctx)?;
        worst_ratio = worst_ratio.max(r.value / (10.0 * r.error_estimate).max(1e-300));
    }
    hard(
        "canonical_triple_fixed",
        worst_ratio <= 1.0,
        format!("worst residual / (10 x quad error) = {worst_ratio:.3e}"),
        &mut checks,
    );

    // Stability at the canonical points.
    let rep_zero = em_jacobian(&DVector::zeros(d), &ctx)?;
    let rep_plus = em_jacobian(ctx.mu(), &ctx)?;
    hard(
        "zero_repels_mu_attracts",
        rep_zero.spectral_radius > 1.0 && rep_plus.spectral_radius < 1.0,
        format!(
            "radius(0) = {:.6}, radius(mu) = {:.6}",
            rep_zero.spectral_radius, rep_plus.spectral_radius
        ),
        &mut checks,
    );

    // 1-D identities.
    if d == 1 {
        let xi = cfg.rates.xi.unwrap_or(0.7 * ctx.mu()[0]);
        let den = denominator_identity_check(xi, &ctx)?;
        hard(
            "denominator_folding_identity",
            den.rel_discrepancy <= 1e-6,
            format!("rel discrepancy {:.2e} at xi = {xi}", den.rel_discrepancy),
            &mut checks,
        );
    }

    // FKG: monotone pairs under the configured measure (1-D only).
    if d == 1 {
        let dist = Density1d::TruncatedMixture {
            params: ctx.params().clone(),
            trunc: ctx.trunc().clone(),
        };
        let id = |x: f64| x;
        let cube = |x: f64| x * x * x;
        let ok = fkg_monotone_check(&id, &cube, &dist, ctx.quad())?
            && fkg_monotone_check(&id, &id, &dist, ctx.quad())?;
        hard(
            "fkg_monotone_pairs",
            ok,
            "identity and cubic pairs".to_string(),
            &mut checks,
        );
    }

    // Soft: the literal quantitative FKG bound on the documented
    // sign-mixed instance fails by design; report, do not gate.
    {
        let sq: truncmix::rates::ScalarFn = std::sync::Arc::new(|x: f64| x * x);
        let spec = FkgCheckSpec::new(
            sq.clone(),
            sq,
            0.5,
            Density1d::Uniform { lo: -1.0, hi: 1.0 },
            ctx.quad(),
        )?;
        let rep = fkg_quantitative_check(&spec, ctx.quad())?;
        checks.push(CheckResult {
            name: "fkg_quantitative_literal_vs_folded".to_string(),
            hard: false,
            pass: rep.holds_folded,
            detail: format!(
                "LHS {:.6}; literal RHS {:.6} (holds: {}); folded RHS {:.6} (holds: {})",
                rep.lhs, rep.rhs_std, rep.holds_std, rep.rhs_folded, rep.holds_folded
            ),
        });
    }

    // Soft: fitted local-rate multiplier.
    {
        let rep = local_rate_check(&ctx)?;
        checks.push(CheckResult {
            name: "local_rate_fitted_multiplier".to_string(),
            hard: false,
            pass: rep.both_below_one,
            detail: format!(
                "alpha {:.4}, radius {:.6}, fitted (1 - rho)/alpha^6 = {:.4}",
                rep.alpha,
                rep.radius_plus.max(rep.radius_minus),
                rep.fitted_multiplier
            ),
        });
    }

    let hard_failures = checks.iter().filter(|c| c.hard && !c.pass).count();
    for c in &checks {
        println!(
            "{} [{}] {}: {}",
            if c.pass { "ok  " } else { "FAIL" },
            if c.hard { "hard" } else { "soft" },
            c.name,
            c.detail
        );
    }
    println!(
        "verify: {}/{} checks passed ({} hard failures)",
        checks.iter().filter(|c| c.pass).count(),
        checks.len(),
        hard_failures
    );
    out.write_json(
        "verify.json",
        &VerifyArtifact {
            hard_failures,
            checks,
        },
    )?;
    Ok(if hard_failures > 0 { 2 } else { 0 })
}
