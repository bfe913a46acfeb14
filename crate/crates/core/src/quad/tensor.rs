//! Tensor-product Gauss-Legendre quadrature over axis-aligned panels,
//! for dimensions 2 and 3.
//!
//! Panels are aligned to per-axis breakpoints so indicator truncations are
//! exactly resolved; panels beyond the core region (six axis scales past the
//! component means) carry fewer nodes, since the Gaussian weight there is
//! below 2e-8 and only a few digits survive into the total. Accuracy is
//! estimated by re-running with a lower core node count; the high-resolution
//! value is returned.
//!
//! The node loops are written out per level so coordinate maps and the
//! Gaussian quadratic forms are hoisted out of the innermost loop.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::model::{TruncationSpec, Whitener};
use crate::{Error, Result};

use super::legendre::gauss_legendre;

/// Quadrature nodes and weights along one axis (all panels concatenated).
pub(crate) struct AxisGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Panel list `[a, b, nodes]` over `[lo, hi]`. Interior breakpoints and the
/// band boundaries are hard edges. Three bands, measured from the origin:
/// the core `|y| <= core_hi` gets `n_core` nodes at `core_width`; the mid
/// band `|y| <= mid_hi` (weight below ~2e-8) gets `n_mid` nodes; the far
/// tail (weight below ~3e-18) gets 6 nodes at double width.
#[allow(clippy::too_many_arguments)]
pub(crate) fn graded_panels(
    lo: f64,
    hi: f64,
    interior: &[f64],
    core_hi: f64,
    mid_hi: f64,
    core_width: f64,
    n_core: usize,
    n_mid: usize,
) -> Vec<(f64, f64, usize)> {
    let mut edges = vec![lo, hi];
    edges.extend(interior.iter().copied().filter(|&x| x > lo && x < hi));
    for b in [-mid_hi, -core_hi, core_hi, mid_hi] {
        if b > lo && b < hi {
            edges.push(b);
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-13 * (hi - lo).max(1.0));

    let mut panels = Vec::new();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let (width, n) = if mid.abs() <= core_hi {
            (core_width, n_core)
        } else if mid.abs() <= mid_hi {
            (core_width, n_mid)
        } else {
            (2.0 * core_width, 6)
        };
        let n_sub = ((b - a) / width).ceil().max(1.0) as usize;
        for k in 0..n_sub {
            let pa = a + (b - a) * k as f64 / n_sub as f64;
            let pb = a + (b - a) * (k + 1) as f64 / n_sub as f64;
            panels.push((pa, pb, n));
        }
    }
    panels
}

/// Uniform-width panels (1-D adaptive path seeds and tests).
pub(crate) fn build_edges(lo: f64, hi: f64, interior: &[f64], max_width: f64) -> Vec<f64> {
    let mut edges = vec![lo, hi];
    edges.extend(interior.iter().copied().filter(|&x| x > lo && x < hi));
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-13 * (hi - lo).max(1.0));
    let mut out = Vec::with_capacity(edges.len() * 2);
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.push(a);
        let n_sub = ((b - a) / max_width).ceil() as usize;
        for k in 1..n_sub {
            out.push(a + (b - a) * k as f64 / n_sub as f64);
        }
    }
    out.push(hi);
    out
}

pub(crate) fn build_axis_panels(panels: &[(f64, f64, usize)]) -> AxisGrid {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for &(a, b, n) in panels {
        let rule = gauss_legendre(n);
        let center = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for (x, wt) in rule.0.iter().zip(&rule.1) {
            nodes.push(center + half * x);
            weights.push(half * wt);
        }
    }
    AxisGrid { nodes, weights }
}

#[cfg(test)]
pub(crate) fn build_axis(edges: &[f64], n_per_panel: usize) -> AxisGrid {
    let panels: Vec<(f64, f64, usize)> = edges
        .windows(2)
        .map(|w| (w[0], w[1], n_per_panel))
        .collect();
    build_axis_panels(&panels)
}

/// Geometry of one tensor integral in integration coordinates `y`:
/// `x = map * y` (identity when `map` is `None`), mixture weight
/// `0.5 exp(log_nc) [e^{-qp/2} + e^{-qm/2}]` with
/// `qp/qm = (y -+ center)^T Q (y -+ center)` (`Q` identity when `None`).
pub(crate) struct TensorFrame<'a> {
    pub axes: Vec<AxisGrid>,
    pub map: Option<&'a DMatrix<f64>>,
    pub quad_form: Option<&'a DMatrix<f64>>,
    pub center: Vec<f64>,
    pub log_nc: f64,
}

/// One pass over the product grid: accumulates the mixture-weighted payload
/// `w * [1, g_1, ..]` and its absolute sums. Chunked over the outer axis so
/// the summation order is fixed regardless of thread count.
pub(crate) fn tensor_pass<F>(
    frame: &TensorFrame<'_>,
    trunc: &TruncationSpec,
    wh: &Whitener,
    dim: usize,
    payload: &F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let d = frame.axes.len();
    debug_assert!((2..=3).contains(&d));

    // Pad to three axes; the dummy axis has one node at 0 with weight 1.
    let unit = AxisGrid {
        nodes: vec![0.0],
        weights: vec![1.0],
    };
    let ax0 = &frame.axes[0];
    let ax1 = &frame.axes[1];
    let ax2 = if d == 3 { &frame.axes[2] } else { &unit };

    let ident = DMatrix::identity(3, 3);
    let mut m = [[0.0f64; 3]; 3];
    let mut q = [[0.0f64; 3]; 3];
    {
        let map = frame.map.unwrap_or(&ident);
        let qf = frame.quad_form.unwrap_or(&ident);
        for i in 0..d {
            for j in 0..d {
                m[i][j] = map[(i, j)];
                q[i][j] = qf[(i, j)];
            }
        }
        for k in d..3 {
            m[k][k] = 1.0;
            q[k][k] = 1.0;
        }
    }
    let mut c = [0.0f64; 3];
    c[..d].copy_from_slice(&frame.center);

    // q_nu = Q * center, nqn = center^T Q center.
    let mut q_nu = [0.0f64; 3];
    let mut nqn = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            q_nu[i] += q[i][j] * c[j];
        }
        nqn += q_nu[i] * c[i];
    }
    let log_nc = frame.log_nc;

    // Identity quadratic form: the Gaussian factors per axis, so the two
    // exponentials per node become table lookups.
    let factored = frame.quad_form.is_none();
    let axes3 = [ax0, ax1, ax2];
    let mut expp: Vec<Vec<f64>> = Vec::new();
    let mut expm: Vec<Vec<f64>> = Vec::new();
    if factored {
        for (i, ax) in axes3.iter().enumerate() {
            expp.push(
                ax.nodes
                    .iter()
                    .map(|&y| (-0.5 * (y - c[i]) * (y - c[i])).exp())
                    .collect(),
            );
            expm.push(
                ax.nodes
                    .iter()
                    .map(|&y| (-0.5 * (y + c[i]) * (y + c[i])).exp())
                    .collect(),
            );
        }
    }
    let nc = log_nc.exp();

    let n0 = ax0.nodes.len();
    let block = 4usize;
    let n_blocks = n0.div_ceil(block);

    let partials: Result<Vec<(Vec<f64>, Vec<f64>)>> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            let mut acc = vec![0.0; dim];
            let mut absacc = vec![0.0; dim];
            let mut buf = vec![0.0; dim];
            let i0_hi = ((blk + 1) * block).min(n0);
            for i0 in blk * block..i0_hi {
                let y0 = ax0.nodes[i0];
                let w0 = ax0.weights[i0];
                // Level-0 partials of y^T Q y, y^T Q nu and x = M y.
                let yqy0 = q[0][0] * y0 * y0;
                let yqn0 = q_nu[0] * y0;
                let x0 = [m[0][0] * y0, m[1][0] * y0, m[2][0] * y0];
                for (i1, (&y1, &w1raw)) in ax1.nodes.iter().zip(&ax1.weights).enumerate() {
                    let w01 = w0 * w1raw;
                    let yqy01 = yqy0 + q[1][1] * y1 * y1 + 2.0 * q[0][1] * y0 * y1;
                    let yqn01 = yqn0 + q_nu[1] * y1;
                    let x01 = [
                        x0[0] + m[0][1] * y1,
                        x0[1] + m[1][1] * y1,
                        x0[2] + m[2][1] * y1,
                    ];
                    // Cross coefficient of y2 in y^T Q y.
                    let cross2 = 2.0 * (q[0][2] * y0 + q[1][2] * y1);
                    let (pp01, mm01) = if factored {
                        (expp[0][i0] * expp[1][i1], expm[0][i0] * expm[1][i1])
                    } else {
                        (0.0, 0.0)
                    };
                    for (i2, (&y2, &w2raw)) in ax2.nodes.iter().zip(&ax2.weights).enumerate() {
                        let wq = w01 * w2raw;
                        let gw = if factored {
                            0.5 * nc * (pp01 * expp[2][i2] + mm01 * expm[2][i2])
                        } else {
                            let yqy = yqy01 + q[2][2] * y2 * y2 + cross2 * y2;
                            let u = yqn01 + q_nu[2] * y2;
                            let qp = yqy - 2.0 * u + nqn;
                            let qm = yqy + 2.0 * u + nqn;
                            0.5 * ((log_nc - 0.5 * qp).exp() + (log_nc - 0.5 * qm).exp())
                        };
                        let x = [
                            x01[0] + m[0][2] * y2,
                            x01[1] + m[1][2] * y2,
                            x01[2] + m[2][2] * y2,
                        ];
                        let s = trunc.value(&x[..d], wh);
                        let w = wq * gw * s;
                        if w != 0.0 {
                            payload(&x[..d], &mut buf[1..]);
                            acc[0] += w;
                            absacc[0] += w.abs();
                            for k in 1..dim {
                                let v = w * buf[k];
                                acc[k] += v;
                                absacc[k] += v.abs();
                            }
                        }
                    }
                }
            }
            for k in 0..dim {
                if !acc[k].is_finite() {
                    return Err(Error::NonFiniteIntegrand {
                        point: vec![ax0.nodes[blk * block]],
                    });
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
