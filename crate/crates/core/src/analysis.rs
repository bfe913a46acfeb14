//! Moment derivatives, the EM-map Jacobian via the implicit function theorem,
//! and fixed-point stability classification.
//!
//! Derivative matrices follow the gradient layout: entry `(i, j)` holds the
//! derivative of output component `j` with respect to input coordinate `i`.
//! With `A = Sigma * d_self_moment` and `B = Sigma * d_cross_moment_lambda`
//! (both symmetric, positive definite for truncations of positive measure),
//! the EM-map Jacobian is `A^{-1} B`, whose spectrum is real and positive
//! whenever the positive-definiteness holds; it is computed on the
//! symmetrized similarity form `A^{-1/2} B A^{-1/2}` for conditioning, with a
//! general complex eigensolve as fallback.

use nalgebra::{Complex, DMatrix, DVector};
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::em::Context;
use crate::moments;
use crate::quad::Estimate;
use crate::{Error, Result};

/// Stability class of a fixed point of the EM map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    Attracting,
    Repelling,
    Saddle,
    Marginal,
}

/// EM-map Jacobian at a point with spectrum and stability classification.
#[derive(Debug, Clone)]
pub struct JacobianReport {
    pub point: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    pub classification: Classification,
    /// Classification margin: 1e-6 plus the quadrature error propagated
    /// first-order into the eigenvalues.
    pub margin: f64,
}

impl Serialize for JacobianReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("JacobianReport", 6)?;
        s.serialize_field("point", &self.point)?;
        let row_major: Vec<f64> = (0..self.matrix.nrows())
            .flat_map(|i| (0..self.matrix.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| self.matrix[(i, j)])
            .collect();
        s.serialize_field("matrix", &row_major)?;
        let eigs: Vec<(f64, f64)> = self.eigenvalues.iter().map(|c| (c.re, c.im)).collect();
        s.serialize_field("eigenvalues", &eigs)?;
        s.serialize_field("spectral_radius", &self.spectral_radius)?;
        s.serialize_field("classification", &self.classification)?;
        s.serialize_field("margin", &self.margin)?;
        s.end()
    }
}

/// Derivative of the self moment `H` in its own parameter:
/// `Sigma^{-1} E_{lambda,S}[x x^T] - Sigma^{-1} H H^T`. `Sigma` times the
/// result is symmetric positive definite for truncations of positive
/// measure.
pub fn d_self_moment(lambda: &DVector<f64>, ctx: &Context) -> Result<Estimate<DMatrix<f64>>> {
    let set = moments::x_tanh_and_xx(ctx, lambda, lambda)?;
    let a = &set.second - &set.first * set.first.transpose();
    let err = rank_one_error(&set.second_err, &set.first, &set.first_err);
    Ok(Estimate {
        value: ctx.sigma_inv() * a,
        error_estimate: err,
        method: set.method,
    })
}

/// Derivative of the target moment in the location parameter of its measure:
/// `Sigma^{-1} E_{mu,S}[x x^T tanh_lambda tanh_mu]
///  - Sigma^{-1} E_{mu,S}[x tanh_mu] E_{mu,S}[x tanh_lambda]^T`
/// (gradient layout; the rank-one factor order follows from the quotient
/// rule and is confirmed against central finite differences).
pub fn d_cross_moment_mu(lambda: &DVector<f64>, ctx: &Context) -> Result<Estimate<DMatrix<f64>>> {
    let set = moments::cross_tanh_set(ctx, ctx.mu(), lambda, ctx.mu())?;
    let u = &set.first_a; // E[x tanh_lambda]
    let v = &set.first_b; // E[x tanh_mu]
    let c = &set.second - v * u.transpose();
    let err = {
        let mut e = set.second_err.iter().map(|x| x * x).sum::<f64>();
        for i in 0..u.len() {
            for j in 0..u.len() {
                let t = v[i].abs() * set.first_a_err[j] + set.first_b_err[i] * u[j].abs();
                e += t * t;
            }
        }
        e.sqrt()
    };
    Ok(Estimate {
        value: ctx.sigma_inv() * c,
        error_estimate: err,
        method: set.method,
    })
}

/// Derivative of the target moment in the tanh parameter:
/// `Sigma^{-1} E_{mu,S}[x x^T (1 - tanh^2(x^T Sigma^{-1} lambda))]`.
pub fn d_cross_moment_lambda(
    lambda: &DVector<f64>,
    ctx: &Context,
) -> Result<Estimate<DMatrix<f64>>> {
    let m = moments::xx_sech2(ctx, ctx.mu(), lambda)?;
    let err = m.error_norm();
    Ok(Estimate {
        value: ctx.sigma_inv() * m.value,
        error_estimate: err,
        method: m.method,
    })
}

/// Frobenius-aggregated error of `E[xx^T] - m m^T` given entry errors.
fn rank_one_error(second_err: &DMatrix<f64>, m: &DVector<f64>, m_err: &DVector<f64>) -> f64 {
    let d = m.len();
    let mut e = second_err.iter().map(|x| x * x).sum::<f64>();
    for i in 0..d {
        for j in 0..d {
            let t = m[i].abs() * m_err[j] + m_err[i] * m[j].abs();
            e += t * t;
        }
    }
    e.sqrt()
}

/// EM-map Jacobian at `gamma`: `d_self_moment(gamma)^{-1} *
/// d_cross_moment_lambda(gamma)`, with eigenvalues and stability
/// classification. In 1-D this is the scalar ratio of the two derivatives.
pub fn em_jacobian(gamma: &DVector<f64>, ctx: &Context) -> Result<JacobianReport> {
    Ok(em_jacobian_full(gamma, ctx)?.0)
}

/// As [`em_jacobian`], also returning the eigenvector basis when the
/// symmetric route applies (columns are eigenvectors of `A^{-1} B` matching
/// the eigenvalue order).
pub fn em_jacobian_full(
    gamma: &DVector<f64>,
    ctx: &Context,
) -> Result<(JacobianReport, Option<DMatrix<f64>>)> {
    let d = ctx.dim();
    let self_set = moments::x_tanh_and_xx(ctx, gamma, gamma)?;
    let a = {
        let raw = &self_set.second - &self_set.first * self_set.first.transpose();
        symmetrize(&raw)
    };
    let err_a = rank_one_error(&self_set.second_err, &self_set.first, &self_set.first_err);
    let cross = moments::xx_sech2(ctx, ctx.mu(), gamma)?;
    let b = symmetrize(&cross.value);
    let err_b = cross.error_norm();

    let eig_a = a.clone().symmetric_eigen();
    let a_min = eig_a.eigenvalues.min();
    let a_scale = eig_a.eigenvalues.amax();
    if a_min.abs() <= a_scale * 1e3 * f64::EPSILON {
        return Err(Error::SingularSelfMoment {
            point: gamma.iter().copied().collect(),
        });
    }

    let matrix = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::SingularSelfMoment {
            point: gamma.iter().copied().collect(),
        })?;

    let (eigenvalues, vectors) = if a_min > 0.0 {
        // Similarity transform to the symmetric form A^{-1/2} B A^{-1/2};
        // same spectrum, real arithmetic, well conditioned.
        let mut a_inv_sqrt = DMatrix::zeros(d, d);
        for k in 0..d {
            let v = eig_a.eigenvectors.column(k);
            let s = 1.0 / eig_a.eigenvalues[k].sqrt();
            for i in 0..d {
                for j in 0..d {
                    a_inv_sqrt[(i, j)] += v[i] * v[j] * s;
                }
            }
        }
        let c = symmetrize(&(&a_inv_sqrt * &b * &a_inv_sqrt));
        let eig_c = c.symmetric_eigen();
        let eigs: Vec<Complex<f64>> = eig_c
            .eigenvalues
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        let vectors = &a_inv_sqrt * eig_c.eigenvectors;
        (eigs, Some(vectors))
    } else {
        let eigs = matrix
            .clone()
            .complex_eigenvalues()
            .iter()
            .copied()
            .collect();
        (eigs, None)
    };

    let spectral_radius = eigenvalues.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let min_modulus = eigenvalues
        .iter()
        .map(|c| c.norm())
        .fold(f64::INFINITY, f64::min);

    // First-order eigenvalue uncertainty from the quadrature errors.
    let err_rho = (err_b + spectral_radius * err_a) / a_min.abs().max(f64::MIN_POSITIVE);
    let margin = 1e-6 + err_rho;

    let classification = if spectral_radius < 1.0 - margin {
        Classification::Attracting
    } else if min_modulus > 1.0 + margin {
        Classification::Repelling
    } else if spectral_radius > 1.0 + margin && min_modulus < 1.0 - margin {
        Classification::Saddle
    } else {
        Classification::Marginal
    };

    Ok((
        JacobianReport {
            point: gamma.iter().copied().collect(),
            matrix,
            eigenvalues,
            spectral_radius,
            classification,
            margin,
        },
        vectors,
    ))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// True iff every eigenvalue of `a * b` has positive real part and a
/// negligible imaginary part (<= 1e-10 relative). Inputs must be symmetric
/// positive definite; the product spectrum is computed directly by a general
/// eigensolve rather than assumed.
pub fn pd_product_spectrum_check(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<bool> {
    for (name, m) in [("a", a), ("b", b)] {
        let asym = (m - m.transpose()).amax();
        if asym > 1e-10 * m.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} is not symmetric"
            )));
        }
        if m.clone().symmetric_eigen().eigenvalues.min() <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "{name} has a non-positive eigenvalue"
            )));
        }
    }
    let eigs = (a * b).complex_eigenvalues();
    let max_mod = eigs.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    Ok(eigs
        .iter()
        .all(|c| c.re > 0.0 && c.im.abs() <= 1e-10 * max_mod.max(1.0)))
}

/// Central-difference Jacobian in gradient layout: entry `(i, j)` is
/// `d f_j / d x_i`, with entry error `O(step^2)` plus evaluation noise.
pub fn finite_diff_jacobian<F>(f: F, point: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("step must be > 0".into()));
    }
    let d = point.len();
    let probe = f(point)?;
    let m = probe.len();
    let mut jac = DMatrix::zeros(d, m);
    for i in 0..d {
        let mut plus = point.clone();
        plus[i] += step;
        let mut minus = point.clone();
        minus[i] -= step;
        let fp = f(&plus)?;
        let fm = f(&minus)?;
        for j in 0..m {
            jac[(i, j)] = (fp[j] - fm[j]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// The relative step used for derivative validation:
/// `1e-5 * (1 + ||point||)`, balancing truncation against quadrature noise.
pub fn fd_step(point: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + point.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em;
    use crate::model::{MixtureParams, TruncationSpec};
    use crate::quad::QuadConfig;
    use crate::testutil::{trapezoid, TruncFn};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn ctx_1d(mu: f64, s2: f64, trunc: TruncationSpec) -> Context {
        let p = MixtureParams::univariate(mu, s2).unwrap();
        Context::new(p, trunc, QuadConfig::default()).unwrap()
    }

    fn ctx_2d_box() -> Context {
        let mu = DVector::from_vec(vec![0.9, -0.4]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.4, 0.3, 0.3, 0.8]);
        let p = MixtureParams::new(mu, sigma).unwrap();
        let t = TruncationSpec::box_nd(vec![(-0.6, 2.2), (-2.0, 1.1)]).unwrap();
        Context::new(p, t, QuadConfig::default()).unwrap()
    }

    #[test]
    fn d_self_moment_is_identity_untruncated() {
        let ctx = ctx_1d(1.0, 1.3, TruncationSpec::constant_one());
        for lam in [-0.7, 0.0, 0.9] {
            let m = d_self_moment(&v1(lam), &ctx).unwrap();
            assert_relative_eq!(m.value[(0, 0)], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn d_self_moment_at_zero_is_second_moment_over_sigma() {
        let ctx = ctx_1d(0.8, 1.0, TruncationSpec::constant_one());
        let m = d_self_moment(&v1(0.0), &ctx).unwrap();
        // E_0[x^2] / sigma^2 = 1 for S == 1.
        assert_relative_eq!(m.value[(0, 0)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn d_self_moment_matches_finite_differences() {
        let ctx = ctx_2d_box();
        let lambda = DVector::from_vec(vec![0.6, 0.3]);
        let analytic = d_self_moment(&lambda, &ctx).unwrap().value;
        let fd = finite_diff_jacobian(
            |l| Ok(em::self_moment(l, &ctx)?.value),
            &lambda,
            fd_step(&lambda),
        )
        .unwrap();
        let rel = (&analytic - &fd).amax() / analytic.amax();
        assert!(rel < 1e-4, "rel {rel:e}\nanalytic {analytic}\nfd {fd}");
    }

    #[test]
    fn d_cross_moment_lambda_matches_finite_differences() {
        let ctx = ctx_2d_box();
        let lambda = DVector::from_vec(vec![0.5, -0.2]);
        let analytic = d_cross_moment_lambda(&lambda, &ctx).unwrap().value;
        let fd = finite_diff_jacobian(
            |l| Ok(em::target_moment(l, &ctx)?.value),
            &lambda,
            fd_step(&lambda),
        )
        .unwrap();
        let rel = (&analytic - &fd).amax() / analytic.amax();
        assert!(rel < 1e-4, "rel {rel:e}");
    }

    #[test]
    fn d_cross_moment_mu_matches_finite_differences() {
        // Differentiate the target moment in the measure location with the
        // tanh parameter held fixed; the asymmetric 2-D configuration pins
        // down the orientation of the rank-one term.
        let ctx = ctx_2d_box();
        let lambda = DVector::from_vec(vec![0.6, 0.3]);
        let analytic = d_cross_moment_mu(&lambda, &ctx).unwrap().value;
        let fd = finite_diff_jacobian(
            |m| {
                let moved = Context::new(
                    ctx.params().with_mu(m.clone())?,
                    ctx.trunc().clone(),
                    ctx.quad().clone(),
                )?;
                Ok(em::target_moment(&lambda, &moved)?.value)
            },
            ctx.mu(),
            fd_step(ctx.mu()),
        )
        .unwrap();
        let rel = (&analytic - &fd).amax() / analytic.amax();
        assert!(rel < 1e-4, "rel {rel:e}\nanalytic {analytic}\nfd {fd}");
    }

    #[test]
    fn d_cross_moment_lambda_at_zero_untruncated() {
        // tanh^2(0) = 0, so the derivative reduces to the plain second
        // moment over sigma^2: (sigma^2 + mu^2) / sigma^2 in 1-D.
        let ctx = ctx_1d(1.2, 0.8, TruncationSpec::constant_one());
        let m = d_cross_moment_lambda(&v1(0.0), &ctx).unwrap();
        assert_relative_eq!(m.value[(0, 0)], (0.8 + 1.2 * 1.2) / 0.8, epsilon = 1e-9);
    }

    #[test]
    fn d_cross_moment_mu_vanishes_at_lambda_zero() {
        let ctx = ctx_2d_box();
        let m = d_cross_moment_mu(&DVector::zeros(2), &ctx).unwrap();
        assert!(m.value.amax() < 1e-11);
    }

    #[test]
    fn d_cross_moment_mu_1d_untruncated_oracle() {
        // lambda = mu = 1, sigma^2 = 1, S == 1:
        // E[x^2 tanh^2 x] - E[x tanh x]^2 via a dense oracle.
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let got = d_cross_moment_mu(&v1(1.0), &ctx).unwrap().value[(0, 0)];
        let f = TruncFn::new(1.0, 1.0, f64::NEG_INFINITY, f64::INFINITY);
        let e_x2t2 = trapezoid(
            |x| x * x * x.tanh() * x.tanh() * f.weight(x),
            -14.0,
            14.0,
            4_000_000,
        );
        let e_xt = trapezoid(|x| x * x.tanh() * f.weight(x), -14.0, 14.0, 4_000_000);
        let oracle = e_x2t2 - e_xt * e_xt;
        assert_relative_eq!(got, oracle, epsilon = 1e-8);
    }

    #[test]
    fn em_jacobian_1d_at_zero_untruncated() {
        // E_mu[x^2] / E_0[x^2] = 1 + mu^2/sigma^2 for S == 1.
        let ctx = ctx_1d(1.2, 0.9, TruncationSpec::constant_one());
        let rep = em_jacobian(&v1(0.0), &ctx).unwrap();
        assert_relative_eq!(rep.spectral_radius, 1.0 + 1.2 * 1.2 / 0.9, epsilon = 1e-6);
        assert_eq!(rep.classification, Classification::Repelling);
    }

    #[test]
    fn em_jacobian_1d_at_mu_untruncated_oracle() {
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let rep = em_jacobian(&v1(1.0), &ctx).unwrap();
        // Denominator A(mu) = E[x^2] - E[x tanh x]^2 = (1 + mu^2) - mu^2 = 1,
        // so the ratio equals E_mu[x^2 (1 - tanh^2 x)].
        let f = TruncFn::new(1.0, 1.0, f64::NEG_INFINITY, f64::INFINITY);
        let oracle = trapezoid(
            |x| x * x * (1.0 - x.tanh() * x.tanh()) * f.weight(x),
            -14.0,
            14.0,
            4_000_000,
        );
        assert_relative_eq!(rep.spectral_radius, oracle, epsilon = 1e-7);
        assert!(rep.spectral_radius < 1.0);
        assert_eq!(rep.classification, Classification::Attracting);
    }

    #[test]
    fn pd_product_check_basics() {
        let i2 = DMatrix::identity(2, 2);
        assert!(pd_product_spectrum_check(&i2, &i2).unwrap());
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0]));
        assert!(pd_product_spectrum_check(&a, &b).unwrap());
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]));
        assert!(pd_product_spectrum_check(&neg, &b).is_err());
    }

    #[test]
    fn pd_product_check_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let d = rng.gen_range(2..=3);
            let g1 = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let g2 = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            let a = &g1 * g1.transpose() + DMatrix::identity(d, d) * 0.1;
            let b = &g2 * g2.transpose() + DMatrix::identity(d, d) * 0.1;
            assert!(pd_product_spectrum_check(&a, &b).unwrap());
        }
    }

    #[test]
    fn finite_diff_identity_and_linear() {
        let p = DVector::from_vec(vec![0.3, -0.8]);
        let id = finite_diff_jacobian(|x| Ok(x.clone()), &p, 1e-5).unwrap();
        assert!((id - DMatrix::identity(2, 2)).amax() < 1e-10);

        let sigma_inv = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        let lin = finite_diff_jacobian(|x| Ok(&sigma_inv * x), &p, 1e-5).unwrap();
        assert!((lin - sigma_inv).amax() < 1e-10);
    }

    #[test]
    fn sigma_times_derivatives_are_spd_on_truncated_probes() {
        let ctx = ctx_2d_box();
        for lam in [
            DVector::from_vec(vec![0.4, 0.1]),
            DVector::from_vec(vec![-0.9, 0.6]),
            DVector::zeros(2),
        ] {
            let ds = d_self_moment(&lam, &ctx).unwrap();
            let a = ctx.params().sigma() * &ds.value;
            let min_eig = ((&a + a.transpose()) * 0.5)
                .symmetric_eigen()
                .eigenvalues
                .min();
            assert!(
                min_eig > -10.0 * ds.error_estimate,
                "self-derivative lost positive definiteness: {min_eig:e}"
            );
            let dc = d_cross_moment_lambda(&lam, &ctx).unwrap();
            let b = ctx.params().sigma() * &dc.value;
            let min_eig_b = ((&b + b.transpose()) * 0.5)
                .symmetric_eigen()
                .eigenvalues
                .min();
            assert!(min_eig_b > -10.0 * dc.error_estimate);
        }
    }

    #[test]
    fn jacobian_report_serializes_row_major() {
        let ctx = ctx_1d(1.0, 1.0, TruncationSpec::constant_one());
        let rep = em_jacobian(&v1(0.0), &ctx).unwrap();
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["matrix"].is_array());
        assert_eq!(json["eigenvalues"][0].as_array().unwrap().len(), 2);
        assert_eq!(json["classification"], "Repelling");
    }
}
