//! Polar (d = 2) and spherical (d = 3) quadrature for truncations that are
//! radial in whitened coordinates.
//!
//! Annulus indicators have curved discontinuities that axis-aligned panels
//! cannot track; in polar coordinates they become radial breakpoints and the
//! angular integrand is analytic and periodic, where the uniform rule
//! converges geometrically.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::{Error, Result};

use super::legendre::gauss_legendre;

pub(crate) struct RadialPlan {
    /// Panel edges in whitened radius, aligned to annulus boundaries.
    pub r_edges: Vec<f64>,
    pub n_r: usize,
    pub n_theta: usize,
    /// Nodes in cos(polar angle) for d = 3; unused for d = 2.
    pub n_u: usize,
}

/// One full pass at the plan's resolution. `s_radial` is the radial profile
/// (piecewise constant on panels), `payload` writes `[1, g_1, ..]` given the
/// original-coordinate point.
pub(crate) fn radial_pass<F>(
    d: usize,
    nu_w: &[f64],
    w_inv: &DMatrix<f64>,
    plan: &RadialPlan,
    s_radial: &(dyn Fn(f64) -> f64 + Sync),
    dim: usize,
    payload: &F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let rule_r = gauss_legendre(plan.n_r);
    let nu_norm_sq: f64 = nu_w.iter().map(|v| v * v).sum();
    let log_nc = -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln();

    let panels: Vec<(f64, f64, f64)> = plan
        .r_edges
        .windows(2)
        .map(|w| (w[0], w[1], s_radial(0.5 * (w[0] + w[1]))))
        .filter(|&(_, _, s)| s != 0.0)
        .collect();

    let partials: Result<Vec<(Vec<f64>, Vec<f64>)>> = panels
        .par_iter()
        .map(|&(ra, rb, s_panel)| {
            let mut acc = vec![0.0; dim];
            let mut absacc = vec![0.0; dim];
            let mut z = vec![0.0; d];
            let mut x = vec![0.0; d];
            let mut buf = vec![0.0; dim];
            let c = 0.5 * (ra + rb);
            let h = 0.5 * (rb - ra);
            for (ri, rw) in rule_r.0.iter().zip(&rule_r.1) {
                let r = c + h * ri;
                let wr = h * rw * s_panel;
                match d {
                    2 => {
                        let wt = 2.0 * std::f64::consts::PI / plan.n_theta as f64;
                        for j in 0..plan.n_theta {
                            let theta = wt * (j as f64 + 0.5);
                            z[0] = r * theta.cos();
                            z[1] = r * theta.sin();
                            let p = z[0] * nu_w[0] + z[1] * nu_w[1];
                            let base = log_nc - 0.5 * (r * r + nu_norm_sq);
                            let gw = 0.5 * ((base + p).exp() + (base - p).exp());
                            let w = wr * wt * r * gw;
                            accumulate(
                                &z,
                                w_inv,
                                &mut x,
                                payload,
                                &mut buf,
                                w,
                                &mut acc,
                                &mut absacc,
                            )?;
                        }
                    }
                    3 => {
                        let rule_u = gauss_legendre(plan.n_u);
                        let wt = 2.0 * std::f64::consts::PI / plan.n_theta as f64;
                        for (ui, uw) in rule_u.0.iter().zip(&rule_u.1) {
                            let s_phi = (1.0 - ui * ui).max(0.0).sqrt();
                            for j in 0..plan.n_theta {
                                let theta = wt * (j as f64 + 0.5);
                                z[0] = r * s_phi * theta.cos();
                                z[1] = r * s_phi * theta.sin();
                                z[2] = r * ui;
                                let p = z[0] * nu_w[0] + z[1] * nu_w[1] + z[2] * nu_w[2];
                                let base = log_nc - 0.5 * (r * r + nu_norm_sq);
                                let gw = 0.5 * ((base + p).exp() + (base - p).exp());
                                let w = wr * uw * wt * r * r * gw;
                                accumulate(
                                    &z,
                                    w_inv,
                                    &mut x,
                                    payload,
                                    &mut buf,
                                    w,
                                    &mut acc,
                                    &mut absacc,
                                )?;
                            }
                        }
                    }
                    _ => {
                        return Err(Error::UnsupportedTruncation(
                            "radial quadrature supports d in {2, 3}".into(),
                        ))
                    }
                }
            }
            Ok((acc, absacc))
        })
        .collect();

    let partials = partials?;
    let mut values = vec![0.0; dim];
    let mut resabs = vec![0.0; dim];
    for (acc, absacc) in partials {
        for k in 0..dim {
            values[k] += acc[k];
            resabs[k] += absacc[k];
        }
    }
    Ok((values, resabs))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate<F>(
    z: &[f64],
    w_inv: &DMatrix<f64>,
    x: &mut [f64],
    payload: &F,
    buf: &mut [f64],
    w: f64,
    acc: &mut [f64],
    absacc: &mut [f64],
) -> Result<()>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let d = z.len();
    for i in 0..d {
        let mut xi = 0.0;
        for j in 0..d {
            xi += w_inv[(i, j)] * z[j];
        }
        x[i] = xi;
    }
    payload(x, buf);
    for k in 0..acc.len() {
        let v = w * buf[k];
        if !v.is_finite() {
            return Err(Error::NonFiniteIntegrand { point: x.to_vec() });
        }
        acc[k] += v;
        absacc[k] += v.abs();
    }
    Ok(())
}
