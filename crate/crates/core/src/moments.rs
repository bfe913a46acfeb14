//! Fused moment kernels shared by the EM update and the derivative formulas.
//!
//! Every function here is a single quadrature pass; vector and matrix pieces
//! that belong to one formula are accumulated under the same node set.

use nalgebra::{DMatrix, DVector};

use crate::em::Context;
use crate::quad::{truncated_expectation, Method};
use crate::Result;

#[inline]
fn dot(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

/// Upper-triangle packed length for a d x d symmetric matrix.
fn sym_len(d: usize) -> usize {
    d * (d + 1) / 2
}

fn sym_unpack(flat: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in i..d {
            m[(i, j)] = flat[idx];
            m[(j, i)] = flat[idx];
            idx += 1;
        }
    }
    m
}

/// `E_{nu,S}[x tanh(x^T Sigma^{-1} a)]`, with per-entry error estimates.
pub(crate) struct VecMoment {
    pub value: DVector<f64>,
    pub errors: DVector<f64>,
    pub method: Method,
}

impl VecMoment {
    pub fn error_norm(&self) -> f64 {
        self.errors.norm()
    }
}

pub(crate) fn x_tanh(ctx: &Context, nu: &DVector<f64>, a: &DVector<f64>) -> Result<VecMoment> {
    let d = ctx.dim();
    let w: Vec<f64> = (ctx.sigma_inv() * a).iter().copied().collect();
    let osc = ctx.whitener().whitened_norm(a);
    let meas = ctx.params().with_mu(nu.clone())?;
    let m = truncated_expectation(
        &meas,
        ctx.trunc(),
        ctx.whitener(),
        ctx.quad(),
        d,
        &|x: &[f64], out: &mut [f64]| {
            let t = dot(x, &w).tanh();
            for i in 0..d {
                out[i] = x[i] * t;
            }
        },
        osc,
        None,
    )?;
    Ok(VecMoment {
        value: DVector::from_vec(m.values.clone()),
        errors: DVector::from_vec(m.errors.clone()),
        method: m.method,
    })
}

/// Fused `E_{nu,S}[x tanh(x^T Sigma^{-1} a)]` and `E_{nu,S}[x x^T]`.
pub(crate) struct SelfMomentSet {
    pub first: DVector<f64>,
    pub first_err: DVector<f64>,
    pub second: DMatrix<f64>,
    pub second_err: DMatrix<f64>,
    pub method: Method,
}

pub(crate) fn x_tanh_and_xx(
    ctx: &Context,
    nu: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<SelfMomentSet> {
    let d = ctx.dim();
    let w: Vec<f64> = (ctx.sigma_inv() * a).iter().copied().collect();
    let osc = ctx.whitener().whitened_norm(a);
    let meas = ctx.params().with_mu(nu.clone())?;
    let dim_out = d + sym_len(d);
    let m = truncated_expectation(
        &meas,
        ctx.trunc(),
        ctx.whitener(),
        ctx.quad(),
        dim_out,
        &|x: &[f64], out: &mut [f64]| {
            let t = dot(x, &w).tanh();
            for i in 0..d {
                out[i] = x[i] * t;
            }
            let mut idx = d;
            for i in 0..d {
                for j in i..d {
                    out[idx] = x[i] * x[j];
                    idx += 1;
                }
            }
        },
        osc,
        None,
    )?;
    Ok(SelfMomentSet {
        first: DVector::from_vec(m.values[..d].to_vec()),
        first_err: DVector::from_vec(m.errors[..d].to_vec()),
        second: sym_unpack(&m.values[d..], d),
        second_err: sym_unpack(&m.errors[d..], d),
        method: m.method,
    })
}

/// Fused pieces of the cross derivative in the location parameter:
/// `E[x tanh_a]`, `E[x tanh_b]` and `E[x x^T tanh_a tanh_b]` under one
/// measure.
pub(crate) struct CrossMomentSet {
    pub first_a: DVector<f64>,
    pub first_a_err: DVector<f64>,
    pub first_b: DVector<f64>,
    pub first_b_err: DVector<f64>,
    pub second: DMatrix<f64>,
    pub second_err: DMatrix<f64>,
    pub method: Method,
}

pub(crate) fn cross_tanh_set(
    ctx: &Context,
    nu: &DVector<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<CrossMomentSet> {
    let d = ctx.dim();
    let wa: Vec<f64> = (ctx.sigma_inv() * a).iter().copied().collect();
    let wb: Vec<f64> = (ctx.sigma_inv() * b).iter().copied().collect();
    let osc = ctx.whitener().whitened_norm(a) + ctx.whitener().whitened_norm(b);
    let meas = ctx.params().with_mu(nu.clone())?;
    let dim_out = 2 * d + sym_len(d);
    let m = truncated_expectation(
        &meas,
        ctx.trunc(),
        ctx.whitener(),
        ctx.quad(),
        dim_out,
        &|x: &[f64], out: &mut [f64]| {
            let ta = dot(x, &wa).tanh();
            let tb = dot(x, &wb).tanh();
            for i in 0..d {
                out[i] = x[i] * ta;
                out[d + i] = x[i] * tb;
            }
            let mut idx = 2 * d;
            let tt = ta * tb;
            for i in 0..d {
                for j in i..d {
                    out[idx] = x[i] * x[j] * tt;
                    idx += 1;
                }
            }
        },
        osc,
        None,
    )?;
    Ok(CrossMomentSet {
        first_a: DVector::from_vec(m.values[..d].to_vec()),
        first_a_err: DVector::from_vec(m.errors[..d].to_vec()),
        first_b: DVector::from_vec(m.values[d..2 * d].to_vec()),
        first_b_err: DVector::from_vec(m.errors[d..2 * d].to_vec()),
        second: sym_unpack(&m.values[2 * d..], d),
        second_err: sym_unpack(&m.errors[2 * d..], d),
        method: m.method,
    })
}

/// Matrix moment with errors.
pub(crate) struct MatMoment {
    pub value: DMatrix<f64>,
    pub errors: DMatrix<f64>,
    pub method: Method,
}

impl MatMoment {
    pub fn error_norm(&self) -> f64 {
        self.errors.iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

/// `E_{nu,S}[x x^T (1 - tanh^2(x^T Sigma^{-1} a))]`.
pub(crate) fn xx_sech2(ctx: &Context, nu: &DVector<f64>, a: &DVector<f64>) -> Result<MatMoment> {
    let d = ctx.dim();
    let w: Vec<f64> = (ctx.sigma_inv() * a).iter().copied().collect();
    let osc = ctx.whitener().whitened_norm(a);
    let meas = ctx.params().with_mu(nu.clone())?;
    let m = truncated_expectation(
        &meas,
        ctx.trunc(),
        ctx.whitener(),
        ctx.quad(),
        sym_len(d),
        &|x: &[f64], out: &mut [f64]| {
            let t = dot(x, &w).tanh();
            let sech2 = 1.0 - t * t;
            let mut idx = 0;
            for i in 0..d {
                for j in i..d {
                    out[idx] = x[i] * x[j] * sech2;
                    idx += 1;
                }
            }
        },
        osc,
        None,
    )?;
    Ok(MatMoment {
        value: sym_unpack(&m.values, d),
        errors: sym_unpack(&m.errors, d),
        method: m.method,
    })
}

/// Fused target-side pieces for fixed-point Newton: `E_{nu,S}[x tanh_a]` and
/// `E_{nu,S}[x x^T (1 - tanh^2_a)]` under the same node set.
pub(crate) struct TargetSideSet {
    pub first: DVector<f64>,
    pub sech2_second: DMatrix<f64>,
}

pub(crate) fn x_tanh_and_xx_sech2(
    ctx: &Context,
    nu: &DVector<f64>,
    a: &DVector<f64>,
) -> Result<TargetSideSet> {
    let d = ctx.dim();
    let w: Vec<f64> = (ctx.sigma_inv() * a).iter().copied().collect();
    let osc = ctx.whitener().whitened_norm(a);
    let meas = ctx.params().with_mu(nu.clone())?;
    let dim_out = d + sym_len(d);
    let m = truncated_expectation(
        &meas,
        ctx.trunc(),
        ctx.whitener(),
        ctx.quad(),
        dim_out,
        &|x: &[f64], out: &mut [f64]| {
            let t = dot(x, &w).tanh();
            let sech2 = 1.0 - t * t;
            for i in 0..d {
                out[i] = x[i] * t;
            }
            let mut idx = d;
            for i in 0..d {
                for j in i..d {
                    out[idx] = x[i] * x[j] * sech2;
                    idx += 1;
                }
            }
        },
        osc,
        None,
    )?;
    Ok(TargetSideSet {
        first: DVector::from_vec(m.values[..d].to_vec()),
        sech2_second: sym_unpack(&m.values[d..], d),
    })
}
