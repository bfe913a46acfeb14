//! Experiment configuration: a TOML file fully determining one experiment.
//!
//! Schema (keys in brackets are per-kind):
//!
//! ```toml
//! [params]
//! mu = [1.0]                # location, length d
//! sigma = [[1.0]]           # SPD covariance, d x d row-major
//!
//! [trunc]
//! kind = "interval"         # constant_one | interval | box | annulus_union
//!                           # | half_space | soft_step | soft_ramp | union
//! intervals = [[0.5, inf]]  # box/interval: per-axis [lo, hi] (inf allowed);
//!                           # annulus_union: [l, r] Mahalanobis radii
//! # normal = [1.0, 0.0]     # [half_space] inward normal
//! # offset = 0.5            # [half_space] n . x >= offset
//! # level = 0.2             # [soft_step] level + (1-level) 1[x_axis > threshold]
//! # threshold = 0.0         # [soft_step]
//! # lo = -0.5               # [soft_ramp] linear 0 -> 1 over [lo, hi]
//! # hi = 1.0                # [soft_ramp]
//! # axis = 0                # [soft_step | soft_ramp] coordinate it acts on
//! # declared_even = false           # advisory symmetry flags
//! # declared_rotation_invariant = false
//! # [[trunc.members]]       # [union]: same keys per member
//!
//! [quad]     # optional, defaults shown in the README
//! [solver]   # optional: inner_tol, outer_tol, max_iters
//! [run]      # lambda0 = [...] or init_seed/init_scale; perturb_zero
//! [scan]     # lo, hi, n
//! [multistart]  # n_starts, box_scale, seed
//! [field]    # x_min, x_max, nx, y_min, y_max, ny
//! [basin]    # n_inits, init_scale, seed
//! [rates]    # lambda0, xi, n_xi, sweep_inner_radius, sweep_widths
//! ```

use std::sync::Arc;

use anyhow::{bail, Context as AnyhowContext, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use truncmix::em::Context;
use truncmix::model::{MixtureParams, TruncationSpec};
use truncmix::quad::QuadConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsConfig {
    pub mu: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruncConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intervals: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_even: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_rotation_invariant: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub members: Option<Vec<TruncConfig>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub inner_tol: f64,
    pub outer_tol: f64,
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            inner_tol: 1e-10,
            outer_tol: 1e-8,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub lambda0: Option<Vec<f64>>,
    pub init_seed: Option<u64>,
    pub init_scale: f64,
    /// `lambda0 = 0` is a valid repelling fixed point; set this to nudge it.
    pub perturb_zero: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda0: None,
            init_seed: None,
            init_scale: 2.0,
            perturb_zero: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            n: 4000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MultistartConfig {
    pub n_starts: usize,
    pub box_scale: f64,
    pub seed: u64,
}

impl Default for MultistartConfig {
    fn default() -> Self {
        Self {
            n_starts: 64,
            box_scale: 3.0,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            x_min: -2.0,
            x_max: 2.0,
            nx: 21,
            y_min: -2.0,
            y_max: 2.0,
            ny: 21,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BasinConfig {
    pub n_inits: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            n_inits: 100,
            init_scale: 2.0,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RatesConfig {
    pub lambda0: Option<Vec<f64>>,
    /// Probe point of the denominator identity (1-D).
    pub xi: Option<f64>,
    pub n_xi: usize,
    /// Optional annulus-width sweep for the local-rate report.
    pub sweep_inner_radius: f64,
    pub sweep_widths: Vec<f64>,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            lambda0: None,
            xi: None,
            n_xi: 21,
            sweep_inner_radius: 1.0,
            sweep_widths: Vec::new(),
        }
    }
}

/// The full experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub params: ParamsConfig,
    pub trunc: TruncConfig,
    #[serde(default = "QuadConfig::default")]
    pub quad: QuadConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub multistart: MultistartConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub basin: BasinConfig,
    #[serde(default)]
    pub rates: RatesConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialization of the resolved config
    /// (after CLI overrides), hex-encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canon);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_params(&self) -> Result<MixtureParams> {
        let d = self.params.mu.len();
        if self.params.sigma.len() != d || self.params.sigma.iter().any(|r| r.len() != d) {
            bail!("params.sigma must be {d} x {d} to match params.mu");
        }
        let mu = DVector::from_vec(self.params.mu.clone());
        let sigma = DMatrix::from_fn(d, d, |i, j| self.params.sigma[i][j]);
        Ok(MixtureParams::new(mu, sigma)?)
    }

    pub fn build_trunc(&self) -> Result<TruncationSpec> {
        build_trunc(&self.trunc, self.params.mu.len())
    }

    pub fn build_context(&self) -> Result<Context> {
        let ctx = Context::new(self.build_params()?, self.build_trunc()?, self.quad.clone())?
            .with_tols(self.solver.inner_tol, self.solver.outer_tol);
        Ok(ctx)
    }
}

fn pairs(intervals: &Option<Vec<Vec<f64>>>, kind: &str) -> Result<Vec<(f64, f64)>> {
    let list = intervals
        .as_ref()
        .with_context(|| format!("trunc.intervals is required for kind = \"{kind}\""))?;
    list.iter()
        .map(|p| {
            if p.len() != 2 {
                bail!("each interval needs exactly [lo, hi], got {p:?}");
            }
            Ok((p[0], p[1]))
        })
        .collect()
}

fn build_trunc(cfg: &TruncConfig, d: usize) -> Result<TruncationSpec> {
    let spec = match cfg.kind.as_str() {
        "constant_one" => TruncationSpec::constant_one(),
        "interval" | "box" => TruncationSpec::box_nd(pairs(&cfg.intervals, &cfg.kind)?)?,
        "annulus_union" => TruncationSpec::annulus_union(pairs(&cfg.intervals, &cfg.kind)?)?,
        "half_space" => {
            let normal = cfg
                .normal
                .as_ref()
                .context("trunc.normal is required for half_space")?;
            let offset = cfg
                .offset
                .context("trunc.offset is required for half_space")?;
            TruncationSpec::half_space(DVector::from_vec(normal.clone()), offset)?
        }
        "soft_step" => {
            let level = cfg.level.context("trunc.level is required for soft_step")?;
            let threshold = cfg
                .threshold
                .context("trunc.threshold is required for soft_step")?;
            let axis = cfg.axis.unwrap_or(0);
            if !(0.0..=1.0).contains(&level) {
                bail!("soft_step level must lie in [0, 1]");
            }
            if axis >= d {
                bail!("soft_step axis {axis} out of range for dimension {d}");
            }
            let mut bps = vec![Vec::new(); d];
            bps[axis].push(threshold);
            TruncationSpec::soft(
                Arc::new(move |x: &[f64]| if x[axis] > threshold { 1.0 } else { level }),
                Some(bps),
            )
        }
        "soft_ramp" => {
            let lo = cfg.lo.context("trunc.lo is required for soft_ramp")?;
            let hi = cfg.hi.context("trunc.hi is required for soft_ramp")?;
            if !(lo < hi) {
                bail!("soft_ramp needs lo < hi");
            }
            let axis = cfg.axis.unwrap_or(0);
            if axis >= d {
                bail!("soft_ramp axis {axis} out of range for dimension {d}");
            }
            let mut bps = vec![Vec::new(); d];
            bps[axis].extend([lo, hi]);
            TruncationSpec::soft(
                Arc::new(move |x: &[f64]| ((x[axis] - lo) / (hi - lo)).clamp(0.0, 1.0)),
                Some(bps),
            )
        }
        "union" => {
            let members = cfg
                .members
                .as_ref()
                .context("trunc.members is required for union")?;
            let built: Result<Vec<_>> = members.iter().map(|m| build_trunc(m, d)).collect();
            TruncationSpec::union(built?)?
        }
        other => bail!(
            "unknown trunc.kind \"{other}\" (expected constant_one, interval, box, \
             annulus_union, half_space, soft_step, soft_ramp or union)"
        ),
    };
    let spec = match (cfg.declared_even, cfg.declared_rotation_invariant) {
        (None, None) => spec,
        (e, r) => {
            let even = e.unwrap_or(spec.declared_even);
            let rot = r.unwrap_or(spec.declared_rotation_invariant);
            spec.with_declared(even, rot)
        }
    };
    Ok(spec)
}
