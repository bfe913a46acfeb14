//! Truncated-mixture expectations `E_{nu,S}[g(x)]` and survival masses to
//! controlled accuracy.
//!
//! Strategy by dimension: adaptive Gauss-Kronrod panels in 1-D (split at
//! truncation breakpoints and the component means), breakpoint-aligned
//! tensor-product Gauss-Legendre for d <= 3 (polar/spherical for radial
//! truncations, rotated whitened frames for oblique half-spaces), and
//! importance-sampled Monte Carlo above that. Matrix-valued integrands are
//! accumulated entry-wise under one shared node set, so assembled moment
//! matrices stay symmetric to roundoff.

mod gk;
mod legendre;
mod mc;
mod radial;
mod tensor;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{whiten, MixtureParams, TruncationKind, TruncationSpec, Whitener};
use crate::{Error, Result};

pub(crate) use gk::integrate_1d;

/// Survival masses below this are reported as degenerate truncations.
pub const ALPHA_DEGENERATE: f64 = 1e-12;
/// Below this, integration noise dominates the normalization; callers should
/// surface a warning.
pub const ALPHA_WARN: f64 = 1e-6;

/// Quadrature configuration.
///
/// The integration window has per-axis half-width `window_radius + |nu_i|`
/// in whitened standard deviations, which keeps at least `window_radius`
/// sigmas of tail depth beyond each component mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Tail depth in whitened standard deviations (default 12; tails beyond
    /// 12 sigma contribute less than 1e-30).
    pub window_radius: f64,
    /// Panel budget of the 1-D adaptive integrator.
    pub max_panels: usize,
    /// Gauss-Legendre nodes per panel for the tensor paths.
    pub nodes_per_axis: usize,
    pub mc_samples: usize,
    pub rng_seed: u64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 1e-12,
            window_radius: 12.0,
            max_panels: 4000,
            nodes_per_axis: 16,
            mc_samples: 200_000,
            rng_seed: 42,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter(
                "quad tolerances must be > 0".into(),
            ));
        }
        if self.window_radius < 6.0 {
            return Err(Error::InvalidParameter("window_radius must be >= 6".into()));
        }
        if self.nodes_per_axis < 8 {
            return Err(Error::InvalidParameter(
                "nodes_per_axis must be >= 8".into(),
            ));
        }
        Ok(())
    }
}

/// Which integration path produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Adaptive1D,
    Tensor,
    MonteCarlo,
}

/// A numerically integrated value with error estimate and method provenance.
/// For vector and matrix values the error estimate aggregates the per-entry
/// estimates in Euclidean norm. Monte Carlo results record the sample
/// standard error.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate<T> {
    pub value: T,
    pub error_estimate: f64,
    pub method: Method,
}

/// Rich internal result: normalized expectations with per-entry errors plus
/// the survival mass of the measure.
#[derive(Debug, Clone)]
pub(crate) struct MomentEstimate {
    pub alpha: f64,
    pub alpha_err: f64,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub method: Method,
}

impl MomentEstimate {
    pub fn error_norm(&self) -> f64 {
        self.errors.iter().map(|e| e * e).sum::<f64>().sqrt()
    }
}

/// Untruncated mixture weight `f_nu(x)` evaluated from precomputed pieces.
pub(crate) struct MixtureWeight {
    nu: Vec<f64>,
    sigma_inv: DMatrix<f64>,
    log_norm: f64,
}

impl MixtureWeight {
    pub fn new(params: &MixtureParams) -> Result<Self> {
        let d = params.dim();
        let chol = params
            .sigma()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("sigma in quadrature weight".into()))?;
        let sigma_inv = chol.inverse();
        let det = params.sigma().determinant();
        let log_norm = 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln();
        Ok(Self {
            nu: params.mu().iter().copied().collect(),
            sigma_inv,
            log_norm,
        })
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = self.nu.len();
        let mut qp = 0.0;
        let mut qm = 0.0;
        for i in 0..d {
            let mut sp = 0.0;
            let mut sm = 0.0;
            for j in 0..d {
                sp += self.sigma_inv[(i, j)] * (x[j] - self.nu[j]);
                sm += self.sigma_inv[(i, j)] * (x[j] + self.nu[j]);
            }
            qp += sp * (x[i] - self.nu[i]);
            qm += sm * (x[i] + self.nu[i]);
        }
        0.5 * ((-0.5 * qp - self.log_norm).exp() + (-0.5 * qm - self.log_norm).exp())
    }
}

enum Strategy {
    Adaptive,
    TensorOriginal(Vec<Vec<f64>>),
    TensorWhitened(Option<DMatrix<f64>>),
    Radial(Vec<f64>),
    MonteCarlo,
}

fn choose_strategy(
    params: &MixtureParams,
    trunc: &TruncationSpec,
    wh: &Whitener,
    force: Option<Method>,
) -> Strategy {
    let d = params.dim();
    if force == Some(Method::MonteCarlo) {
        return Strategy::MonteCarlo;
    }
    if d == 1 {
        return Strategy::Adaptive;
    }
    if d <= 3 {
        if matches!(trunc.kind, TruncationKind::ConstantOne) {
            return Strategy::TensorWhitened(None);
        }
        if let Some(bp) = trunc.radial_breakpoints() {
            return Strategy::Radial(bp);
        }
        if let Some(bp) = trunc.axis_breakpoints(d, wh) {
            return Strategy::TensorOriginal(bp);
        }
        if let Some((normal, offset)) = trunc.as_half_space() {
            let n_w = &wh.w_inv * normal; // Sigma^{1/2} n
            let scale = n_w.norm();
            let u = n_w / scale;
            let q = householder_to_e1(&u);
            let _ = offset;
            return Strategy::TensorWhitened(Some(q));
        }
        return Strategy::MonteCarlo;
    }
    Strategy::MonteCarlo
}

/// Core panel width in axis scales: 3.0 for mild integrands, shrinking once
/// the tanh bandwidth (whitened) exceeds what 16-node panels resolve.
fn core_width_factor(osc_hint: f64) -> f64 {
    if osc_hint > 2.5 {
        (3.0 * 2.5 / osc_hint).max(0.8)
    } else {
        3.0
    }
}

/// Symmetric orthogonal Q with Q e_1 = u.
fn householder_to_e1(u: &DVector<f64>) -> DMatrix<f64> {
    let d = u.len();
    let mut v = u.clone();
    v[0] -= 1.0;
    let vn = v.norm_squared();
    if vn < 1e-28 {
        return DMatrix::identity(d, d);
    }
    DMatrix::identity(d, d) - (&v * v.transpose()) * (2.0 / vn)
}

/// Normalized truncated-mixture expectation of a `dim_out`-valued payload.
///
/// `osc_hint` bounds the whitened norms of any `tanh`-argument vectors inside
/// the payload; the angular resolution of the radial path scales with it.
pub(crate) fn truncated_expectation<F>(
    params: &MixtureParams,
    trunc: &TruncationSpec,
    wh: &Whitener,
    cfg: &QuadConfig,
    dim_out: usize,
    payload: &F,
    osc_hint: f64,
    force: Option<Method>,
) -> Result<MomentEstimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    cfg.validate()?;
    let d = params.dim();
    let dim = dim_out + 1;
    let nu_w = wh.to_whitened(params.mu());
    let nu_w_norm = nu_w.norm();

    match choose_strategy(params, trunc, wh, force) {
        Strategy::Adaptive => {
            let sigma = params.sigma()[(0, 0)].sqrt();
            let nu = params.mu()[0];
            let half = nu.abs() + cfg.window_radius * sigma;
            let mut interior = vec![-nu, nu];
            if let Some(bp) = trunc.axis_breakpoints(1, wh) {
                interior.extend(bp[0].iter());
            }
            let weight = MixtureWeight::new(params)?;
            let full = |x: f64, out: &mut [f64]| {
                let xs = [x];
                let w = weight.eval(&xs) * trunc.value(&xs, wh);
                out[0] = w;
                if w != 0.0 {
                    payload(&xs, &mut out[1..]);
                    for v in out[1..].iter_mut() {
                        *v *= w;
                    }
                } else {
                    out[1..].iter_mut().for_each(|v| *v = 0.0);
                }
            };
            let (values, errors) = gk::integrate_1d(
                &full,
                -half,
                half,
                &interior,
                dim,
                cfg.abs_tol,
                cfg.rel_tol,
                cfg.max_panels,
            )?;
            normalize(values, errors, Method::Adaptive1D)
        }

        Strategy::TensorOriginal(bp) => {
            let sigma = params.sigma();
            let sigma_inv = wh.w.clone() * &wh.w;
            let det = sigma.determinant();
            let log_nc = -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
            let width_factor = core_width_factor(osc_hint);
            let n_lo = (cfg.nodes_per_axis - 6).max(8);
            let mut axes_hi = Vec::with_capacity(d);
            let mut axes_lo = Vec::with_capacity(d);
            for i in 0..d {
                let marginal_sd = sigma[(i, i)].sqrt();
                let cond_sd = 1.0 / sigma_inv[(i, i)].sqrt();
                let half = params.mu()[i].abs() + cfg.window_radius * marginal_sd;
                let core_hi = params.mu()[i].abs() + 6.0 * marginal_sd;
                let mid_hi = params.mu()[i].abs() + 9.0 * marginal_sd;
                let width = width_factor * cond_sd;
                let hi = tensor::graded_panels(
                    -half,
                    half,
                    &bp[i],
                    core_hi,
                    mid_hi,
                    width,
                    cfg.nodes_per_axis,
                    10,
                );
                let lo =
                    tensor::graded_panels(-half, half, &bp[i], core_hi, mid_hi, width, n_lo, 8);
                axes_hi.push(tensor::build_axis_panels(&hi));
                axes_lo.push(tensor::build_axis_panels(&lo));
            }
            let center: Vec<f64> = params.mu().iter().copied().collect();
            let frame_hi = tensor::TensorFrame {
                axes: axes_hi,
                map: None,
                quad_form: Some(&sigma_inv),
                center: center.clone(),
                log_nc,
            };
            let frame_lo = tensor::TensorFrame {
                axes: axes_lo,
                map: None,
                quad_form: Some(&sigma_inv),
                center,
                log_nc,
            };
            let (hi, resabs) = tensor::tensor_pass(&frame_hi, trunc, wh, dim, payload)?;
            let (lo, _) = tensor::tensor_pass(&frame_lo, trunc, wh, dim, payload)?;
            two_pass_normalize(hi, lo, resabs, cfg, Method::Tensor)
        }

        Strategy::TensorWhitened(q) => {
            let nu_rot = match &q {
                Some(q) => q.transpose() * &nu_w,
                None => nu_w.clone(),
            };
            // x = Sigma^{1/2} Q y
            let map = match &q {
                Some(q) => &wh.w_inv * q,
                None => wh.w_inv.clone(),
            };
            let mut bp_axis0: Vec<f64> = Vec::new();
            if q.is_some() {
                if let Some((normal, offset)) = trunc.as_half_space() {
                    let scale = (&wh.w_inv * normal).norm();
                    bp_axis0.push(offset / scale);
                }
            }
            let log_nc = -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln();
            let width = core_width_factor(osc_hint);
            let n_lo = (cfg.nodes_per_axis - 6).max(8);
            let mut axes_hi = Vec::with_capacity(d);
            let mut axes_lo = Vec::with_capacity(d);
            for i in 0..d {
                let half = nu_rot[i].abs() + cfg.window_radius;
                let core_hi = nu_rot[i].abs() + 6.0;
                let mid_hi = nu_rot[i].abs() + 9.0;
                let interior: &[f64] = if i == 0 { &bp_axis0 } else { &[] };
                let hi = tensor::graded_panels(
                    -half,
                    half,
                    interior,
                    core_hi,
                    mid_hi,
                    width,
                    cfg.nodes_per_axis,
                    10,
                );
                let lo =
                    tensor::graded_panels(-half, half, interior, core_hi, mid_hi, width, n_lo, 8);
                axes_hi.push(tensor::build_axis_panels(&hi));
                axes_lo.push(tensor::build_axis_panels(&lo));
            }
            let center: Vec<f64> = nu_rot.iter().copied().collect();
            let frame_hi = tensor::TensorFrame {
                axes: axes_hi,
                map: Some(&map),
                quad_form: None,
                center: center.clone(),
                log_nc,
            };
            let frame_lo = tensor::TensorFrame {
                axes: axes_lo,
                map: Some(&map),
                quad_form: None,
                center,
                log_nc,
            };
            let (hi, resabs) = tensor::tensor_pass(&frame_hi, trunc, wh, dim, payload)?;
            let (lo, _) = tensor::tensor_pass(&frame_lo, trunc, wh, dim, payload)?;
            two_pass_normalize(hi, lo, resabs, cfg, Method::Tensor)
        }

        Strategy::Radial(bp) => {
            let r_max = nu_w_norm + cfg.window_radius;
            let mut edges = tensor::build_edges(0.0, r_max, &bp, 1.2);
            edges.retain(|&e| e >= 0.0);
            let bandwidth = r_max * (nu_w_norm + osc_hint + 0.5);
            let n_theta = ((2.5 * bandwidth).ceil() as usize + 64).clamp(64, 4096);
            let n_u = ((1.5 * bandwidth).ceil() as usize + 24).clamp(48, 2048);
            let plan_hi = radial::RadialPlan {
                r_edges: edges.clone(),
                n_r: cfg.nodes_per_axis,
                n_theta,
                n_u,
            };
            let plan_lo = radial::RadialPlan {
                r_edges: edges,
                n_r: (cfg.nodes_per_axis - 6).max(8),
                n_theta: (n_theta * 3 / 4).max(48),
                n_u: (n_u * 3 / 4).max(32),
            };
            let s_radial = |r: f64| trunc.radial_value(r);
            let radial_payload = |x: &[f64], out: &mut [f64]| {
                out[0] = 1.0;
                payload(x, &mut out[1..]);
            };
            let nu_slice: Vec<f64> = nu_w.iter().copied().collect();
            let (hi, resabs) = radial::radial_pass(
                d,
                &nu_slice,
                &wh.w_inv,
                &plan_hi,
                &s_radial,
                dim,
                &radial_payload,
            )?;
            let (lo, _) = radial::radial_pass(
                d,
                &nu_slice,
                &wh.w_inv,
                &plan_lo,
                &s_radial,
                dim,
                &radial_payload,
            )?;
            two_pass_normalize(hi, lo, resabs, cfg, Method::Tensor)
        }

        Strategy::MonteCarlo => {
            let res = mc::mc_expect(
                params,
                trunc,
                wh,
                cfg.mc_samples,
                cfg.rng_seed,
                dim_out,
                payload,
            )?;
            Ok(MomentEstimate {
                alpha: res.alpha,
                alpha_err: res.alpha_err,
                values: res.values,
                errors: res.errors,
                method: Method::MonteCarlo,
            })
        }
    }
}

/// Ratio normalization with first-order error propagation.
fn normalize(values: Vec<f64>, errors: Vec<f64>, method: Method) -> Result<MomentEstimate> {
    let alpha = values[0];
    let alpha_err = errors[0];
    if alpha < ALPHA_DEGENERATE {
        return Err(Error::DegenerateTruncation { alpha });
    }
    let dim_out = values.len() - 1;
    let mut out_v = Vec::with_capacity(dim_out);
    let mut out_e = Vec::with_capacity(dim_out);
    for k in 0..dim_out {
        let e = values[k + 1] / alpha;
        out_v.push(e);
        out_e.push((errors[k + 1] + e.abs() * alpha_err) / alpha);
    }
    Ok(MomentEstimate {
        alpha,
        alpha_err: alpha_err / alpha.max(f64::MIN_POSITIVE),
        values: out_v,
        errors: out_e,
        method,
    })
}

fn two_pass_normalize(
    hi: Vec<f64>,
    lo: Vec<f64>,
    resabs: Vec<f64>,
    cfg: &QuadConfig,
    method: Method,
) -> Result<MomentEstimate> {
    let dim = hi.len();
    // The floor covers roundoff on the absolute sums and the coarse-node
    // tail panels, whose contribution the two-pass comparison cannot see.
    let mut errors = vec![0.0; dim];
    for k in 0..dim {
        errors[k] = (hi[k] - lo[k])
            .abs()
            .max(50.0 * f64::EPSILON * resabs[k])
            .max(0.05 * cfg.abs_tol);
    }
    normalize(hi, errors, method)
}

/// Survival mass `alpha = integral of f_mu * S`, in `(0, 1]`.
pub fn survival_mass(
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<f64>> {
    let wh = whiten(params)?;
    let m = truncated_expectation(params, trunc, &wh, cfg, 0, &|_, _| {}, 0.0, None)?;
    Ok(Estimate {
        value: m.alpha,
        error_estimate: m.alpha_err * m.alpha,
        method: m.method,
    })
}

/// `E_{nu,S}[g]` for scalar `g`.
pub fn expect_scalar<G>(
    g: G,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    expect_scalar_via(None, g, params, trunc, cfg)
}

/// `expect_scalar` over an explicitly chosen path (`Some(Method::MonteCarlo)`
/// forces importance sampling even in low dimension).
pub fn expect_scalar_via<G>(
    method: Option<Method>,
    g: G,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<f64>>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    let wh = whiten(params)?;
    let m = truncated_expectation(
        params,
        trunc,
        &wh,
        cfg,
        1,
        &|x, out| out[0] = g(x),
        0.0,
        method,
    )?;
    Ok(Estimate {
        value: m.values[0],
        error_estimate: m.errors[0],
        method: m.method,
    })
}

/// `E_{nu,S}[g]` for vector-valued `g` writing `dim_out` components.
pub fn expect_vector<G>(
    g: G,
    dim_out: usize,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<DVector<f64>>>
where
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    expect_vector_via(None, g, dim_out, params, trunc, cfg)
}

pub fn expect_vector_via<G>(
    method: Option<Method>,
    g: G,
    dim_out: usize,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<DVector<f64>>>
where
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    let wh = whiten(params)?;
    let m = truncated_expectation(params, trunc, &wh, cfg, dim_out, &g, 0.0, method)?;
    Ok(Estimate {
        value: DVector::from_vec(m.values.clone()),
        error_estimate: m.error_norm(),
        method: m.method,
    })
}

/// `E_{nu,S}[g]` for a matrix-valued `g` writing row-major `rows x cols`
/// entries. All entries share one node set.
pub fn expect_matrix<G>(
    g: G,
    rows: usize,
    cols: usize,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<DMatrix<f64>>>
where
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    expect_matrix_via(None, g, rows, cols, params, trunc, cfg)
}

pub fn expect_matrix_via<G>(
    method: Option<Method>,
    g: G,
    rows: usize,
    cols: usize,
    params: &MixtureParams,
    trunc: &TruncationSpec,
    cfg: &QuadConfig,
) -> Result<Estimate<DMatrix<f64>>>
where
    G: Fn(&[f64], &mut [f64]) + Sync,
{
    let wh = whiten(params)?;
    let m = truncated_expectation(params, trunc, &wh, cfg, rows * cols, &g, 0.0, method)?;
    let mut mat = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            mat[(i, j)] = m.values[i * cols + j];
        }
    }
    Ok(Estimate {
        value: mat,
        error_estimate: m.error_norm(),
        method: m.method,
    })
}
