//! Mixture parameters, truncation specifications, densities and whitening.
//!
//! The observed density is the balanced two-component mixture
//! `f_mu(x) = 0.5 N(x; -mu, Sigma) + 0.5 N(x; mu, Sigma)` with known
//! covariance. A truncation is either an indicator set or a `[0,1]`-valued
//! weight `S(x)` giving the probability that a sample at `x` is observed.
//! Everything downstream works in terms of `f_mu * S` and its normalization.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Relative asymmetry tolerated in a covariance matrix.
const SYMMETRY_TOL: f64 = 1e-12;
/// Per-entry tolerance for the whitener round-trip `w * sigma * w = I`.
const WHITEN_TOL: f64 = 1e-10;

/// True or current mixture parameters: location `mu` and SPD covariance.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl MixtureParams {
    /// Validates symmetry (1e-12 relative), strict positive definiteness and
    /// `d >= 1`.
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: sigma.nrows(),
            });
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in (i + 1)..d {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotPositiveDefinite(format!(
                        "asymmetry at ({i},{j}): {} vs {}",
                        sigma[(i, j)],
                        sigma[(j, i)]
                    )));
                }
            }
        }
        let eig = sigma.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest eigenvalue {min_eig:.3e}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// Convenience constructor for the single-dimensional case.
    pub fn univariate(mu: f64, sigma_sq: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mu),
            DMatrix::from_element(1, 1, sigma_sq),
        )
    }

    /// Same covariance, different location.
    pub fn with_mu(&self, mu: DVector<f64>) -> Result<Self> {
        Self::new(mu, self.sigma.clone())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
}

/// Whitening transform: `w = Sigma^{-1/2}` and its inverse `Sigma^{1/2}`,
/// both taken as the unique SPD square roots.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub w: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
}

impl Whitener {
    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// Identity whitener (covariance already the identity).
    pub fn identity(d: usize) -> Self {
        Self {
            w: DMatrix::identity(d, d),
            w_inv: DMatrix::identity(d, d),
        }
    }

    /// Whitened coordinates `z = Sigma^{-1/2} x`.
    pub fn to_whitened(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.w * x
    }

    /// Original coordinates `x = Sigma^{1/2} z`.
    pub fn to_original(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.w_inv * z
    }

    /// Euclidean norm after whitening (`Sigma^{-1}`-norm of `x`).
    pub fn whitened_norm(&self, x: &DVector<f64>) -> f64 {
        self.to_whitened(x).norm()
    }
}

/// Computes the whitener via the symmetric eigendecomposition square root.
///
/// The SPD root (rather than Cholesky) keeps the whitened problem
/// rotation-compatible: `w` is itself symmetric positive definite.
pub fn whiten(params: &MixtureParams) -> Result<Whitener> {
    let eig = params.sigma.clone().symmetric_eigen();
    let d = params.dim();
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {:.3e}",
            eig.eigenvalues.min()
        )));
    }
    let mut w = DMatrix::zeros(d, d);
    let mut w_inv = DMatrix::zeros(d, d);
    for k in 0..d {
        let v = eig.eigenvectors.column(k);
        let s = eig.eigenvalues[k].sqrt();
        // rank-one accumulation of V diag(s^{+|-1}) V^T
        for i in 0..d {
            for j in 0..d {
                w[(i, j)] += v[i] * v[j] / s;
                w_inv[(i, j)] += v[i] * v[j] * s;
            }
        }
    }
    let resid = (&w * &params.sigma * &w - DMatrix::identity(d, d)).amax();
    if resid > WHITEN_TOL {
        return Err(Error::NotPositiveDefinite(format!(
            "whitening round-trip residual {resid:.3e}"
        )));
    }
    Ok(Whitener { w, w_inv })
}

/// Soft truncation evaluator: a reentrant map `x -> [0,1]`.
pub type SoftFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// The shape of a truncation set or function.
#[derive(Clone)]
pub enum TruncationKind {
    /// No truncation, `S == 1`.
    ConstantOne,
    /// Product of per-axis closed intervals; unbounded edges are `+-inf`.
    Box { intervals: Vec<(f64, f64)> },
    /// Union of annuli `l_i <= ||x||_{Sigma^{-1}} <= r_i` (Mahalanobis radii,
    /// i.e. Euclidean radii after whitening).
    MahalanobisAnnulusUnion { intervals: Vec<(f64, f64)> },
    /// Half-space `normal . x >= offset`.
    HalfSpace { normal: DVector<f64>, offset: f64 },
    /// Pointwise maximum of the member truncations.
    Union(Vec<TruncationSpec>),
    /// Arbitrary `[0,1]`-valued evaluator with optional per-axis breakpoint
    /// lists marking its discontinuities or kinks.
    SoftEvaluator {
        eval: SoftFn,
        breakpoints: Option<Vec<Vec<f64>>>,
    },
}

impl fmt::Debug for TruncationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ConstantOne => write!(f, "ConstantOne"),
            Self::Box { intervals } => write!(f, "Box({intervals:?})"),
            Self::MahalanobisAnnulusUnion { intervals } => {
                write!(f, "MahalanobisAnnulusUnion({intervals:?})")
            }
            Self::HalfSpace { normal, offset } => {
                write!(f, "HalfSpace({:?} >= {offset})", normal.as_slice())
            }
            Self::Union(members) => write!(f, "Union({members:?})"),
            Self::SoftEvaluator { breakpoints, .. } => {
                write!(f, "SoftEvaluator(breakpoints: {breakpoints:?})")
            }
        }
    }
}

/// A truncation set or function with symmetry metadata.
///
/// The declared flags are advisory; [`validate_symmetry`] can falsify them.
#[derive(Debug, Clone)]
pub struct TruncationSpec {
    pub kind: TruncationKind,
    pub declared_even: bool,
    pub declared_rotation_invariant: bool,
}

impl TruncationSpec {
    pub fn constant_one() -> Self {
        Self {
            kind: TruncationKind::ConstantOne,
            declared_even: true,
            declared_rotation_invariant: true,
        }
    }

    /// Axis-aligned box. Evenness is auto-derived from interval symmetry.
    pub fn box_nd(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for &(l, r) in &intervals {
            if !(l < r) {
                return Err(Error::InvalidParameter(format!(
                    "box interval [{l}, {r}] is empty"
                )));
            }
        }
        let even = intervals.iter().all(|&(l, r)| l == -r);
        Ok(Self {
            kind: TruncationKind::Box { intervals },
            declared_even: even,
            declared_rotation_invariant: false,
        })
    }

    /// 1-D interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::box_nd(vec![(lo, hi)])
    }

    /// Union of Mahalanobis annuli; requires `0 <= l_i < r_i <= inf`.
    pub fn annulus_union(intervals: Vec<(f64, f64)>) -> Result<Self> {
        for &(l, r) in &intervals {
            if !(0.0 <= l && l < r) {
                return Err(Error::InvalidParameter(format!(
                    "annulus radii ({l}, {r}) must satisfy 0 <= l < r"
                )));
            }
        }
        Ok(Self {
            kind: TruncationKind::MahalanobisAnnulusUnion { intervals },
            declared_even: true,
            declared_rotation_invariant: true,
        })
    }

    pub fn half_space(normal: DVector<f64>, offset: f64) -> Result<Self> {
        if normal.norm() == 0.0 {
            return Err(Error::InvalidParameter("half-space normal is zero".into()));
        }
        Ok(Self {
            kind: TruncationKind::HalfSpace { normal, offset },
            declared_even: false,
            declared_rotation_invariant: false,
        })
    }

    /// Pointwise maximum of the members.
    pub fn union(members: Vec<TruncationSpec>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("union of zero members".into()));
        }
        let even = members.iter().all(|m| m.declared_even);
        let rot = members.iter().all(|m| m.declared_rotation_invariant);
        Ok(Self {
            kind: TruncationKind::Union(members),
            declared_even: even,
            declared_rotation_invariant: rot,
        })
    }

    /// Soft truncation from an arbitrary evaluator. Breakpoints, when the
    /// evaluator has kinks or jumps, must be supplied per axis or adaptive
    /// panel alignment loses orders of accuracy.
    pub fn soft(eval: SoftFn, breakpoints: Option<Vec<Vec<f64>>>) -> Self {
        Self {
            kind: TruncationKind::SoftEvaluator { eval, breakpoints },
            declared_even: false,
            declared_rotation_invariant: false,
        }
    }

    /// Overrides the advisory symmetry flags.
    pub fn with_declared(mut self, even: bool, rotation_invariant: bool) -> Self {
        self.declared_even = even;
        self.declared_rotation_invariant = rotation_invariant;
        self
    }

    /// Evaluates `S(x)`. Annulus radii are measured in the `Sigma`-norm, so
    /// the whitener of the ambient covariance is required.
    pub fn value(&self, x: &[f64], wh: &Whitener) -> f64 {
        match &self.kind {
            TruncationKind::ConstantOne => 1.0,
            TruncationKind::Box { intervals } => {
                for (xi, &(l, r)) in x.iter().zip(intervals) {
                    if *xi < l || *xi > r {
                        return 0.0;
                    }
                }
                1.0
            }
            TruncationKind::MahalanobisAnnulusUnion { intervals } => {
                let mut s = 0.0;
                for i in 0..x.len() {
                    let mut zi = 0.0;
                    for j in 0..x.len() {
                        zi += wh.w[(i, j)] * x[j];
                    }
                    s += zi * zi;
                }
                let rho = s.sqrt();
                if intervals.iter().any(|&(l, r)| rho >= l && rho <= r) {
                    1.0
                } else {
                    0.0
                }
            }
            TruncationKind::HalfSpace { normal, offset } => {
                let dot: f64 = normal.iter().zip(x).map(|(n, xi)| n * xi).sum();
                if dot >= *offset {
                    1.0
                } else {
                    0.0
                }
            }
            TruncationKind::Union(members) => {
                members.iter().map(|m| m.value(x, wh)).fold(0.0, f64::max)
            }
            TruncationKind::SoftEvaluator { eval, .. } => eval(x),
        }
    }

    /// Per-axis breakpoints in original coordinates, when the truncation is
    /// axis-decomposable at the given dimension. `None` means the truncation
    /// has discontinuities that do not align with coordinate axes (e.g.
    /// annuli in d >= 2).
    pub fn axis_breakpoints(&self, d: usize, wh: &Whitener) -> Option<Vec<Vec<f64>>> {
        let mut axes = vec![Vec::new(); d];
        match &self.kind {
            TruncationKind::ConstantOne => Some(axes),
            TruncationKind::Box { intervals } => {
                for (ax, &(l, r)) in axes.iter_mut().zip(intervals) {
                    if l.is_finite() {
                        ax.push(l);
                    }
                    if r.is_finite() {
                        ax.push(r);
                    }
                }
                Some(axes)
            }
            TruncationKind::MahalanobisAnnulusUnion { intervals } => {
                if d != 1 {
                    return None;
                }
                let sigma_sq = wh.w_inv[(0, 0)];
                for &(l, r) in intervals {
                    for v in [l, r] {
                        if v.is_finite() {
                            axes[0].push(v * sigma_sq);
                            axes[0].push(-v * sigma_sq);
                        }
                    }
                }
                Some(axes)
            }
            TruncationKind::HalfSpace { normal, offset } => {
                // Axis-aligned normals decompose; oblique ones do not.
                let nonzero: Vec<usize> = (0..normal.len()).filter(|&i| normal[i] != 0.0).collect();
                if nonzero.len() == 1 {
                    axes[nonzero[0]].push(offset / normal[nonzero[0]]);
                    Some(axes)
                } else if d == 1 {
                    axes[0].push(offset / normal[0]);
                    Some(axes)
                } else {
                    None
                }
            }
            TruncationKind::Union(members) => {
                for m in members {
                    let sub = m.axis_breakpoints(d, wh)?;
                    for (ax, s) in axes.iter_mut().zip(sub) {
                        ax.extend(s);
                    }
                }
                Some(axes)
            }
            TruncationKind::SoftEvaluator { breakpoints, .. } => match breakpoints {
                Some(bp) if bp.len() == d => Some(bp.clone()),
                Some(_) => None,
                None => Some(axes),
            },
        }
    }

    /// Sorted radial breakpoints in whitened coordinates, when the truncation
    /// is a radial function there (annulus unions and the trivial case).
    pub fn radial_breakpoints(&self) -> Option<Vec<f64>> {
        match &self.kind {
            TruncationKind::ConstantOne => Some(Vec::new()),
            TruncationKind::MahalanobisAnnulusUnion { intervals } => {
                let mut bp = Vec::new();
                for &(l, r) in intervals {
                    if l > 0.0 {
                        bp.push(l);
                    }
                    if r.is_finite() {
                        bp.push(r);
                    }
                }
                bp.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Some(bp)
            }
            TruncationKind::Union(members) => {
                let mut bp = Vec::new();
                for m in members {
                    bp.extend(m.radial_breakpoints()?);
                }
                bp.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Some(bp)
            }
            _ => None,
        }
    }

    /// Radial profile `S(rho)` for radial truncations (whitened radius).
    pub(crate) fn radial_value(&self, rho: f64) -> f64 {
        match &self.kind {
            TruncationKind::ConstantOne => 1.0,
            TruncationKind::MahalanobisAnnulusUnion { intervals } => {
                if intervals.iter().any(|&(l, r)| rho >= l && rho <= r) {
                    1.0
                } else {
                    0.0
                }
            }
            TruncationKind::Union(members) => members
                .iter()
                .map(|m| m.radial_value(rho))
                .fold(0.0, f64::max),
            _ => 0.0,
        }
    }

    /// The general (oblique) half-space parameters, if that is the kind.
    pub(crate) fn as_half_space(&self) -> Option<(&DVector<f64>, f64)> {
        match &self.kind {
            TruncationKind::HalfSpace { normal, offset } => Some((normal, *offset)),
            _ => None,
        }
    }
}

/// Log of the unnormalized Gaussian `N(x; m, Sigma)` given `Sigma^{-1}` and
/// the log normalizing constant.
fn log_gauss(x: &DVector<f64>, m: &DVector<f64>, sigma_inv: &DMatrix<f64>, log_norm: f64) -> f64 {
    let diff = x - m;
    let q = (sigma_inv * &diff).dot(&diff);
    -0.5 * q - log_norm
}

/// Balanced two-component mixture density
/// `0.5 N(x; -mu, Sigma) + 0.5 N(x; mu, Sigma)`.
pub fn mixture_density(params: &MixtureParams, x: &DVector<f64>) -> Result<f64> {
    let d = params.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    let sigma_inv = params
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("sigma in mixture_density".into()))?
        .inverse();
    let det = params.sigma.determinant();
    let log_norm = 0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln();
    let lp = log_gauss(x, params.mu(), &sigma_inv, log_norm);
    let lm = log_gauss(x, &(-params.mu()), &sigma_inv, log_norm);
    Ok(0.5 * (lp.exp() + lm.exp()))
}

/// Truncated mixture density `f_mu(x) S(x) / alpha` where `alpha` is the
/// precomputed survival mass of `(params, trunc)`.
pub fn truncated_density(
    params: &MixtureParams,
    trunc: &TruncationSpec,
    x: &DVector<f64>,
    alpha: f64,
) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::DegenerateTruncation { alpha });
    }
    let wh = whiten(params)?;
    let s = trunc.value(x.as_slice(), &wh);
    if s == 0.0 {
        return Ok(0.0);
    }
    Ok(mixture_density(params, x)? * s / alpha)
}

/// Outcome of probing a truncation for rotation invariance and evenness.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SymmetryReport {
    pub n_probes: usize,
    pub max_rotation_deviation: f64,
    pub max_reflection_deviation: f64,
    /// Any probed value fell outside `[0, 1]`.
    pub range_violation: bool,
    pub contradicts_declared_rotation: bool,
    pub contradicts_declared_even: bool,
}

/// Probes `S` at random points with random orthogonal maps and reflections,
/// reporting the largest deviations `|S(Qx) - S(x)|` and `|S(-x) - S(x)|`.
///
/// Probing happens in the coordinates `S` is defined on (identity whitener);
/// for Mahalanobis annuli this means radii are read as Euclidean.
pub fn validate_symmetry(
    trunc: &TruncationSpec,
    d: usize,
    n_probes: usize,
    rng_seed: u64,
) -> SymmetryReport {
    let wh = Whitener::identity(d);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut max_rot: f64 = 0.0;
    let mut max_refl: f64 = 0.0;
    let mut range_violation = false;

    for _ in 0..n_probes.max(1) {
        let scale: f64 = rng.gen_range(0.25..4.0);
        let x = DVector::from_fn(d, |_, _| scale * gauss_sample(&mut rng));
        let q = random_orthogonal(d, &mut rng);
        let qx = &q * &x;
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();

        let sx = trunc.value(x.as_slice(), &wh);
        let sqx = trunc.value(qx.as_slice(), &wh);
        let snx = trunc.value(&neg, &wh);
        for v in [sx, sqx, snx] {
            if !(0.0..=1.0).contains(&v) {
                range_violation = true;
            }
        }
        max_rot = max_rot.max((sqx - sx).abs());
        max_refl = max_refl.max((snx - sx).abs());
    }

    SymmetryReport {
        n_probes,
        max_rotation_deviation: max_rot,
        max_reflection_deviation: max_refl,
        range_violation,
        contradicts_declared_rotation: trunc.declared_rotation_invariant && max_rot > 1e-9,
        contradicts_declared_even: trunc.declared_even && max_refl > 1e-9,
    }
}

fn gauss_sample<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; good enough for probe points.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Haar-ish random orthogonal matrix via QR of a Gaussian matrix with the
/// sign of the R diagonal fixed.
fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    if d == 1 {
        let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        return DMatrix::from_element(1, 1, s);
    }
    let g = DMatrix::from_fn(d, d, |_, _| gauss_sample(rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}
