//! Batch-level abundance-dependent missingness: mechanism functions,
//! available-case estimation of their coefficients, and the conditional
//! moments of a batch given that it is missing.
//!
//! Both mechanism forms depend on the batch only through the batch-mean
//! abundance `s = 1ᵀy/p`. Under the model `s` is Gaussian with mean
//! `m_s = 1ᵀXα/p` and variance `v_s = 1ᵀΣ1/p²`, and `y` given `s` is
//! Gaussian, so every conditional moment of `y` given `M = 1` follows from
//! the tilted moments of the scalar `s`:
//!
//! ```text
//! E(y | M=1)   = Xα + c (E(s|M=1) − m_s)
//! Var(y | M=1) = Σ − c cᵀ v_s + c cᵀ Var(s|M=1),      c = Σ1 / (p v_s)
//! ```
//!
//! The exponential form tilts `s` by `exp(−γ s)`, which shifts its mean by
//! `−γ v_s` and leaves the variance unchanged. The logit form is integrated
//! numerically (see [`crate::quadrature`]).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quadrature::{self, inv_logit};
use crate::types::{BatchDesign, FeatureBatchData, MechanismForm, MissingMechanism, ModelParameters};

/// Missing probability of a batch with mean abundance `s`.
///
/// Exponential probabilities above one are clamped; see [`miss_prob_clamped`].
pub fn miss_prob(mech: &MissingMechanism, s: f64, batch_covariates: Option<&DVector<f64>>) -> f64 {
    miss_prob_clamped(mech, s, batch_covariates).0
}

/// Like [`miss_prob`], also reporting whether the exponential form was clamped at one.
pub fn miss_prob_clamped(
    mech: &MissingMechanism,
    s: f64,
    batch_covariates: Option<&DVector<f64>>,
) -> (f64, bool) {
    let (p, clamped) = match mech.form() {
        MechanismForm::Exponential => {
            let eta = -mech.gamma0() - mech.gamma() * s;
            if eta > 0.0 {
                (1.0, true)
            } else {
                (eta.exp(), false)
            }
        }
        MechanismForm::Logit => {
            let offset = match (mech.covariates(), batch_covariates) {
                (Some(c), Some(ci)) => c.coefficients.dot(ci),
                _ => 0.0,
            };
            (inv_logit(mech.gamma0() + mech.gamma() * s + offset), false)
        }
    };
    (p.max(f64::MIN_POSITIVE), clamped)
}

/// Mean and variance of the batch-mean abundance `s` under the model.
pub fn batch_mean_moments(params: &ModelParameters, design: &BatchDesign) -> (f64, f64) {
    let p = design.size() as f64;
    let m = params.fixed_mean(design).sum() / p;
    let v = params.marginal_covariance(design).sum() / (p * p);
    (m, v)
}

/// Distribution of `s` conditional on the batch being missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarTilt {
    /// log Pr(M = 1)
    pub log_prob: f64,
    /// E(s | M = 1)
    pub mean: f64,
    /// Var(s | M = 1)
    pub var: f64,
    /// The exponential marginal probability exceeded one and was clamped.
    pub clamped: bool,
}

/// Tilts `s ~ N(m_s, v_s)` by the mechanism. `offset` is γ₂ᵀC_i (logit only).
pub fn tilt_batch_mean(mech: &MissingMechanism, m_s: f64, v_s: f64, offset: f64) -> Result<ScalarTilt> {
    match mech.form() {
        MechanismForm::Exponential => {
            let g = mech.gamma();
            let log_prob = -mech.gamma0() - g * m_s + 0.5 * g * g * v_s;
            Ok(ScalarTilt {
                log_prob: log_prob.min(0.0),
                mean: m_s - g * v_s,
                var: v_s,
                clamped: log_prob > 0.0,
            })
        }
        MechanismForm::Logit => {
            let eta0 = mech.gamma0() + mech.gamma() * m_s + offset;
            if v_s <= 0.0 || mech.gamma() == 0.0 {
                return Ok(ScalarTilt {
                    log_prob: quadrature::log_inv_logit(eta0),
                    mean: m_s,
                    var: v_s.max(0.0),
                    clamped: false,
                });
            }
            let sd = v_s.sqrt();
            let t = quadrature::logistic_tilt(eta0, mech.gamma() * sd, quadrature::DEFAULT_TOL)?;
            Ok(ScalarTilt {
                log_prob: t.log_mass,
                mean: m_s + sd * t.mean,
                var: v_s * t.var,
                clamped: false,
            })
        }
    }
}

/// E(y_i | M_i = 1) and Var(y_i | M_i = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn lift_scalar_tilt(params: &ModelParameters, design: &BatchDesign, tilt: &ScalarTilt) -> TiltedMoments {
    let p = design.size() as f64;
    let sigma = params.marginal_covariance(design);
    let (m_s, v_s) = batch_mean_moments(params, design);
    let mut mean = params.fixed_mean(design);
    if v_s <= 0.0 {
        return TiltedMoments { mean, cov: sigma };
    }
    let c = sigma.column_sum() / (p * v_s);
    mean += &c * (tilt.mean - m_s);
    let cov = &sigma + &c * c.transpose() * (tilt.var - v_s);
    TiltedMoments { mean, cov }
}

/// Conditional moments of a missing batch under the exponential mechanism:
/// mean `Xα − (γ/p) Σ1`, covariance `Σ`.
pub fn tilted_moments_exponential(
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
) -> Result<TiltedMoments> {
    if mech.form() != MechanismForm::Exponential {
        return Err(Error::InvalidMechanism("expected the exponential form".into()));
    }
    params.check_design(design)?;
    let p = design.size() as f64;
    let sigma = params.marginal_covariance(design);
    let mean = params.fixed_mean(design) - sigma.column_sum() * (mech.gamma() / p);
    Ok(TiltedMoments { mean, cov: sigma })
}

/// Conditional moments of a missing batch under the logit mechanism, by
/// one-dimensional quadrature over the batch mean. `batch` selects the batch
/// covariates when the mechanism has them.
pub fn tilted_moments_logit(
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
    batch: Option<usize>,
) -> Result<TiltedMoments> {
    if mech.form() != MechanismForm::Logit {
        return Err(Error::InvalidMechanism("expected the logit form".into()));
    }
    params.check_design(design)?;
    let offset = match batch {
        Some(b) => mech.covariate_offset(b)?,
        None => 0.0,
    };
    let (m_s, v_s) = batch_mean_moments(params, design);
    let tilt = tilt_batch_mean(mech, m_s, v_s, offset)?;
    Ok(lift_scalar_tilt(params, design, &tilt))
}

/// Dispatches on the mechanism form.
pub fn tilted_moments(
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
    batch: usize,
) -> Result<TiltedMoments> {
    match mech.form() {
        MechanismForm::Exponential => tilted_moments_exponential(params, design, mech),
        MechanismForm::Logit => tilted_moments_logit(params, design, mech, Some(batch)),
    }
}

/// Pr(M_i = 1) marginally over y_i.
///
/// Exponential: `exp(−γ₀ − γ m_s + γ² v_s / 2)` clamped at one; logit:
/// quadrature of the logistic weight against the density of `s`.
pub fn marginal_missing_prob(
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
    batch: Option<usize>,
) -> Result<f64> {
    params.check_design(design)?;
    let offset = match (mech.form(), batch) {
        (MechanismForm::Logit, Some(b)) => mech.covariate_offset(b)?,
        _ => 0.0,
    };
    let (m_s, v_s) = batch_mean_moments(params, design);
    Ok(tilt_batch_mean(mech, m_s, v_s, offset)?.log_prob.exp())
}

/// Per-feature summary used to estimate Γ from available cases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismFitInput {
    /// Available-case mean abundance t_j.
    pub t: f64,
    /// Missing-batch fraction π_j = 1 − Q_obs/Q.
    pub pi: f64,
}

impl MechanismFitInput {
    pub fn new(t: f64, pi: f64) -> Self {
        Self { t, pi }
    }

    /// Mean of all observed values and the fraction of missing batches.
    pub fn from_feature(data: &FeatureBatchData) -> Self {
        let q = data.n_batches();
        let q_obs = data.n_observed_batches();
        let (sum, n) = data
            .batches()
            .iter()
            .flatten()
            .flatten()
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        let t = if n == 0 { f64::NAN } else { sum / n as f64 };
        let pi = if q == 0 { f64::NAN } else { 1.0 - q_obs as f64 / q as f64 };
        Self { t, pi }
    }

    /// Usable in the log-linear fit: 0 < π < 1 and t finite.
    pub fn is_usable(&self) -> bool {
        self.t.is_finite() && self.pi > 0.0 && self.pi < 1.0
    }
}

/// Estimated (γ₀, γ) with the number of features used and excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimate {
    pub form: MechanismForm,
    pub gamma0: f64,
    pub gamma: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

impl GammaEstimate {
    /// Mechanism with the estimated coefficients. The intercept sign is not
    /// checked for the exponential form; a negative slope is rejected.
    pub fn mechanism(&self) -> Result<MissingMechanism> {
        match self.form {
            MechanismForm::Exponential => {
                MissingMechanism::exponential_unchecked_intercept(self.gamma0, self.gamma)
            }
            MechanismForm::Logit => MissingMechanism::logit(self.gamma0, self.gamma),
        }
    }

    /// Fitted missing probability at mean abundance `t`.
    pub fn fitted(&self, t: f64) -> f64 {
        match self.form {
            MechanismForm::Exponential => (-self.gamma0 - self.gamma * t).exp().min(1.0),
            MechanismForm::Logit => inv_logit(self.gamma0 + self.gamma * t),
        }
    }
}

/// Least squares of `response` on `(1, t)`; returns (intercept, slope).
fn simple_regression(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let r_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - t_mean) * (p.1 - r_mean)).sum();
    let scale = points.iter().map(|p| p.0 * p.0).sum::<f64>();
    if !(sxx > 1e-14 * scale) {
        return Err(Error::MechanismEstimation(
            "all mean abundances are identical (singular design)".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok((r_mean - slope * t_mean, slope))
}

fn usable_points(inputs: &[MechanismFitInput], transform: impl Fn(f64) -> f64) -> Result<(Vec<(f64, f64)>, usize)> {
    let points: Vec<(f64, f64)> = inputs
        .iter()
        .filter(|i| i.is_usable())
        .map(|i| (i.t, transform(i.pi)))
        .collect();
    let excluded = inputs.len() - points.len();
    if points.len() < 2 {
        return Err(Error::MechanismEstimation(format!(
            "{} usable features (need at least 2; {excluded} excluded with missing fraction 0 or 1)",
            points.len()
        )));
    }
    Ok((points, excluded))
}

/// Available-case estimate of the exponential mechanism: minimizes
/// `Σ_j (log π_j + γ₀ + γ t_j)²` over features with 0 < π_j < 1.
pub fn estimate_gamma(inputs: &[MechanismFitInput]) -> Result<GammaEstimate> {
    let (points, n_excluded) = usable_points(inputs, |pi| -pi.ln())?;
    let (gamma0, gamma) = simple_regression(&points)?;
    Ok(GammaEstimate {
        form: MechanismForm::Exponential,
        gamma0,
        gamma,
        n_used: points.len(),
        n_excluded,
    })
}

/// Available-case estimate of the logit mechanism: least squares of
/// `logit(π_j)` on `(1, t_j)`.
pub fn estimate_gamma_logit(inputs: &[MechanismFitInput]) -> Result<GammaEstimate> {
    let (points, n_excluded) = usable_points(inputs, |pi| (pi / (1.0 - pi)).ln())?;
    let (gamma0, gamma) = simple_regression(&points)?;
    Ok(GammaEstimate {
        form: MechanismForm::Logit,
        gamma0,
        gamma,
        n_used: points.len(),
        n_excluded,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    /// Index into the input list.
    pub feature: usize,
    pub t: f64,
    pub pi: f64,
    /// Fitted missing probability; `None` when no fit is available.
    pub fitted: Option<f64>,
}

/// Median available-case mean of the features sharing one missing fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMedian {
    pub pi: f64,
    pub median_t: f64,
    pub n_features: usize,
}

/// Plot-ready table of missing fraction against mean abundance with the
/// fitted mechanism curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub rows: Vec<DiagnosticRow>,
    pub bins: Vec<BinnedMedian>,
    pub fit: Option<GammaEstimate>,
    /// Log-linear fit through the binned medians.
    pub bin_fit: Option<GammaEstimate>,
}

/// Builds the diagnostic table. Pass `None` for `fit` when estimation failed.
pub fn badmm_diagnostic(inputs: &[MechanismFitInput], fit: Option<&GammaEstimate>) -> Diagnostic {
    let rows = inputs
        .iter()
        .enumerate()
        .map(|(feature, i)| DiagnosticRow {
            feature,
            t: i.t,
            pi: i.pi,
            fitted: fit.filter(|_| i.t.is_finite()).map(|f| f.fitted(i.t)),
        })
        .collect();

    // Missing fractions are ratios of small integers; key them at 1e-9.
    let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for i in inputs.iter().filter(|i| i.is_usable()) {
        groups
            .entry((i.pi * 1e9).round() as i64)
            .or_default()
            .push(i.t);
    }
    let bins: Vec<BinnedMedian> = groups
        .into_iter()
        .map(|(key, mut ts)| {
            ts.sort_by(f64::total_cmp);
            let n = ts.len();
            let median_t = if n % 2 == 1 {
                ts[n / 2]
            } else {
                0.5 * (ts[n / 2 - 1] + ts[n / 2])
            };
            BinnedMedian {
                pi: key as f64 * 1e-9,
                median_t,
                n_features: n,
            }
        })
        .collect();
    let bin_inputs: Vec<MechanismFitInput> = bins
        .iter()
        .map(|b| MechanismFitInput::new(b.median_t, b.pi))
        .collect();
    let bin_fit = match fit.map(|f| f.form) {
        Some(MechanismForm::Logit) => estimate_gamma_logit(&bin_inputs).ok(),
        _ => estimate_gamma(&bin_inputs).ok(),
    };
    Diagnostic {
        rows,
        bins,
        fit: fit.copied(),
        bin_fit,
    }
}
