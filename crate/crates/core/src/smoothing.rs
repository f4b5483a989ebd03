//! Label smoothing with a uniform or an instance-specific prior, and the
//! soft-label cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::PROB_FLOOR;

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Tolerance on the total mass of a soft label.
const SIMPLEX_TOL: f64 = 1e-6;
/// Tolerance on the total mass of a model distribution used as a prior.
const PRIOR_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothingMode {
    None,
    Uniform,
    /// Prior is the model's own prediction on the instance.
    Instance,
}

impl std::str::FromStr for SmoothingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SmoothingMode::None),
            "uniform_ls" | "ls" => Ok(SmoothingMode::Uniform),
            "ils" => Ok(SmoothingMode::Instance),
            other => Err(Error::Config(format!("unknown smoothing {other:?} (none|uniform_ls|ils)"))),
        }
    }
}

impl std::fmt::Display for SmoothingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SmoothingMode::None => "none",
            SmoothingMode::Uniform => "uniform_ls",
            SmoothingMode::Instance => "ils",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    pub mode: SmoothingMode,
    pub alpha: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::Instance,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl SmoothingConfig {
    pub fn new(mode: SmoothingMode, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { mode, alpha })
    }

    pub fn none() -> Self {
        Self {
            mode: SmoothingMode::None,
            alpha: 0.0,
        }
    }

    /// Smoothed target for one example. `reference` is the model's detached
    /// prediction on the original example; only `Instance` mode reads it.
    pub fn apply(&self, one_hot: &[f64], reference: Option<&[f64]>) -> Result<SoftLabel> {
        match self.mode {
            SmoothingMode::None => SoftLabel::new(one_hot.to_vec()),
            SmoothingMode::Uniform => smooth_uniform(one_hot, self.alpha),
            SmoothingMode::Instance => {
                let r = reference.ok_or_else(|| {
                    Error::Config("instance-specific smoothing needs a reference distribution".into())
                })?;
                smooth_instance(one_hot, r, self.alpha)
            }
        }
    }
}

/// A probability vector used as a training target.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs, SIMPLEX_TOL, "soft label")?;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_simplex(p: &[f64], tol: f64, what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Numeric(format!("{what}: empty distribution")));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Numeric(format!("{what}: entries must be finite and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::Numeric(format!("{what}: sums to {s}, not 1")));
    }
    Ok(())
}

fn check_one_hot(y: &[f64]) -> Result<()> {
    let ones = y.iter().filter(|v| **v == 1.0).count();
    let zeros = y.iter().filter(|v| **v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(Error::Numeric("label is not one-hot".into()));
    }
    Ok(())
}

fn blend(one_hot: &[f64], prior: &[f64], alpha: f64) -> Result<SoftLabel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if one_hot.len() != prior.len() {
        return Err(Error::shape("smoothing", format!("{} classes vs prior of {}", one_hot.len(), prior.len())));
    }
    let out = one_hot
        .iter()
        .zip(prior)
        .map(|(y, q)| (1.0 - alpha) * y + alpha * q)
        .collect();
    SoftLabel::new(out)
}

/// `(1−α)·y + α/C`.
pub fn smooth_uniform(one_hot: &[f64], alpha: f64) -> Result<SoftLabel> {
    check_one_hot(one_hot)?;
    let c = one_hot.len();
    if c < 2 {
        return Err(Error::Config("label smoothing needs at least two classes".into()));
    }
    blend(one_hot, &vec![1.0 / c as f64; c], alpha)
}

/// `(1−α)·y + α·r` with `r` the model's distribution for this instance.
/// `r` may be off the simplex by single-precision rounding; it is
/// renormalized before blending.
pub fn smooth_instance(one_hot: &[f64], reference: &[f64], alpha: f64) -> Result<SoftLabel> {
    check_one_hot(one_hot)?;
    check_simplex(reference, PRIOR_TOL, "reference distribution")?;
    let s: f64 = reference.iter().sum();
    let r: Vec<f64> = reference.iter().map(|v| v / s).collect();
    blend(one_hot, &r, alpha)
}

/// `−(1/m) Σᵢ ỹᵢ · ln pᵢ` with probabilities floored at 1e-12.
pub fn soft_cross_entropy(targets: &[SoftLabel], probs: &[Vec<f64>]) -> Result<f64> {
    if targets.len() != probs.len() {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("{} targets vs {} predictions", targets.len(), probs.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::shape("soft_cross_entropy", "empty batch"));
    }
    let mut total = 0.0;
    for (y, p) in targets.iter().zip(probs) {
        total += cross_entropy(y.probs(), p)?;
    }
    Ok(total / targets.len() as f64)
}

/// `H(y, p) = −Σ y·ln max(p, 1e-12)`.
pub fn cross_entropy(y: &[f64], p: &[f64]) -> Result<f64> {
    if y.len() != p.len() {
        return Err(Error::shape("cross_entropy", format!("{} vs {}", y.len(), p.len())));
    }
    Ok(-y.iter().zip(p).map(|(a, b)| a * b.max(PROB_FLOOR).ln()).sum::<f64>())
}

/// `H(q) = −Σ q·ln q` with `0·ln 0 = 0`.
pub fn entropy(q: &[f64]) -> f64 {
    -q.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// `KL(q‖p) = Σ q·(ln q − ln max(p, 1e-12))`.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", q.len(), p.len())));
    }
    Ok(q
        .iter()
        .zip(p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max(PROB_FLOOR).ln()))
        .sum())
}

/// Both sides of the smoothed-loss decomposition
/// `CE((1−α)y + αq, p) = (1−α)·H(y,p) + α·KL(q‖p) + α·H(q)`.
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

pub fn ls_decomposition_check(one_hot: &[f64], prior: &[f64], alpha: f64, probs: &[f64]) -> Result<Decomposition> {
    let smoothed = blend(one_hot, prior, alpha)?;
    let lhs = cross_entropy(smoothed.probs(), probs)?;
    let rhs = (1.0 - alpha) * cross_entropy(one_hot, probs)? + alpha * (kl_divergence(prior, probs)? + entropy(prior));
    Ok(Decomposition {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}
