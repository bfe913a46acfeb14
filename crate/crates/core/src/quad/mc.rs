//! Importance-sampled Monte Carlo with the untruncated mixture as proposal.
//!
//! Since the proposal is `f_nu` itself, the importance weight reduces to the
//! truncation value `S(x)` and the expectation is the self-normalized ratio
//! `sum S g / sum S`. Standard errors come from the delta method.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{MixtureParams, TruncationSpec, Whitener};
use crate::{Error, Result};

pub(crate) struct McResult {
    pub alpha: f64,
    pub alpha_err: f64,
    /// Normalized expectations.
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

pub(crate) fn mc_expect<F>(
    params: &MixtureParams,
    trunc: &TruncationSpec,
    wh: &Whitener,
    n_samples: usize,
    seed: u64,
    dim_out: usize,
    payload: &F,
) -> Result<McResult>
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    let d = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples.max(2);

    let mut sum_s = 0.0;
    let mut sum_s_sq = 0.0;
    let mut sum_sg = vec![0.0; dim_out];
    let mut buf = vec![0.0; dim_out];
    let mut xs: Vec<f64> = Vec::with_capacity(n * d);
    let mut ss: Vec<f64> = Vec::with_capacity(n);
    let mut gs: Vec<f64> = Vec::with_capacity(n * dim_out);

    let mut x = vec![0.0; d];
    for _ in 0..n {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let xi = DVector::from_fn(d, |_, _| gauss(&mut rng));
        let noise = &wh.w_inv * xi;
        for i in 0..d {
            x[i] = sign * params.mu()[i] + noise[i];
        }
        let s = trunc.value(&x, wh);
        if !s.is_finite() {
            return Err(Error::NonFiniteIntegrand { point: x.clone() });
        }
        sum_s += s;
        sum_s_sq += s * s;
        if s != 0.0 {
            payload(&x, &mut buf);
            for k in 0..dim_out {
                if !buf[k].is_finite() {
                    return Err(Error::NonFiniteIntegrand { point: x.clone() });
                }
                sum_sg[k] += s * buf[k];
            }
        } else {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        ss.push(s);
        gs.extend_from_slice(&buf);
        xs.extend_from_slice(&x);
    }

    let nf = n as f64;
    let alpha = sum_s / nf;
    if alpha < super::ALPHA_DEGENERATE {
        return Err(Error::DegenerateTruncation { alpha });
    }
    let var_s = (sum_s_sq / nf - alpha * alpha).max(0.0);
    let alpha_err = (var_s / nf).sqrt();

    // Delta-method standard error of the ratio estimator per component.
    let mut values = vec![0.0; dim_out];
    let mut errors = vec![0.0; dim_out];
    for k in 0..dim_out {
        let r = sum_sg[k] / sum_s;
        let mut var = 0.0;
        for i in 0..n {
            let dev = ss[i] * (gs[i * dim_out + k] - r);
            var += dev * dev;
        }
        var /= nf;
        values[k] = r;
        errors[k] = (var / nf).sqrt() / alpha;
    }

    Ok(McResult {
        alpha,
        alpha_err,
        values,
        errors,
    })
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
