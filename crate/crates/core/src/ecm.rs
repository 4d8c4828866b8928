//! ECM estimation of the mixed-effects model under batch-level
//! abundance-dependent missingness.
//!
//! The single-batch operations here ([`e_step_observed`], [`e_step_missing`],
//! [`cm_step`]) work on explicit matrices and mirror the textbook formulas.
//! [`fit`] runs the same iteration through the flattened engine in
//! `crate::engine`; the two paths are checked against each other in tests.

use nalgebra::{DMatrix, DVector};

use crate::engine::{Engine, Theta};
use crate::error::{Error, Result};
use crate::linalg::{self, spd_inverse, symmetrize};
use crate::mechanism::{self, miss_prob_clamped, MechanismFitInput};
use crate::types::{
    validate_dataset, BatchDesign, EStepMoments, FeatureBatchData, MechanismForm,
    MissingMechanism, ModelParameters,
};

/// Starting values for the iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitPolicy {
    /// Available-case OLS for α, pooled residual variances, moment estimate of D.
    #[default]
    AvailableCase,
    /// Start from the given parameters (warm start).
    Given(ModelParameters),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Convergence when every parameter changes by less than `tol · max(|θ|, 1)`.
    pub tol: f64,
    /// Record the observed-data log-likelihood at every iteration.
    pub monitor_likelihood: bool,
    pub init: InitPolicy,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            monitor_likelihood: true,
            init: InitPolicy::AvailableCase,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameters("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameters("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParameters,
    /// (Σ_{i∈O} XᵢᵀWᵢXᵢ)⁻¹ at the estimates.
    pub alpha_cov: DMatrix<f64>,
    pub n_iter: usize,
    pub converged: bool,
    /// Log-likelihood at the start of each iteration and at the returned
    /// estimates. Terms that do not depend on Ω (log Pr(M_i = 0 | y_i) of the
    /// observed batches) are omitted; see [`observed_data_loglik`].
    pub loglik_trace: Vec<f64>,
    /// Missing batches whose exponential marginal probability was clamped at one.
    pub clamp_warnings: usize,
}

impl FitResult {
    pub fn loglik(&self) -> Option<f64> {
        self.loglik_trace.last().copied()
    }

    pub fn standard_errors(&self) -> DVector<f64> {
        self.alpha_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Design and response of an observed batch with sporadically missing rows removed.
pub fn observed_batch(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    batch: usize,
) -> Result<(BatchDesign, DVector<f64>)> {
    let (rows, values) = data.observed_rows(batch);
    if rows.is_empty() {
        return Err(Error::InvalidData(format!("batch {batch} is missing")));
    }
    let design = if rows.len() == designs[batch].size() {
        designs[batch].clone()
    } else {
        designs[batch].select_rows(&rows)?
    };
    Ok((design, DVector::from_vec(values)))
}

/// E-step for an observed batch (rows already restricted to observed samples).
pub fn e_step_observed(
    params: &ModelParameters,
    design: &BatchDesign,
    y: &DVector<f64>,
) -> Result<EStepMoments> {
    params.check_design(design)?;
    if y.len() != design.size() {
        return Err(Error::InvalidData("response length differs from design rows".into()));
    }
    let w = params.precision(design)?;
    let z = design.z();
    let dzw = &params.d * z.transpose() * &w;
    let b = &dzw * (y - params.fixed_mean(design));
    let mut delta = &params.d - &dzw * z * &params.d;
    symmetrize(&mut delta);
    let mut v = z * &delta * z.transpose();
    symmetrize(&mut v);
    Ok(EStepMoments {
        b,
        delta,
        v,
        y: y.clone(),
    })
}

/// E-step for a missing batch: conditional moments given `M_i = 1`.
pub fn e_step_missing(
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
    batch: usize,
) -> Result<EStepMoments> {
    params.check_design(design)?;
    let tilted = mechanism::tilted_moments(params, design, mech, batch)?;
    let w = params.precision(design)?;
    let z = design.z();
    let r = params.residual_covariance(design);
    let dzw = &params.d * z.transpose() * &w;
    let b = &dzw * (&tilted.mean - params.fixed_mean(design));
    let (delta, v) = match mech.form() {
        MechanismForm::Exponential => (params.d.clone(), r),
        MechanismForm::Logit => {
            let wsw = &w * &tilted.cov * &w;
            let mut delta = &params.d - &dzw * z * &params.d
                + &params.d * z.transpose() * &wsw * z * &params.d;
            let zdz = z * &params.d * z.transpose();
            let mut v = &zdz - &zdz * &w * &zdz + &r * &wsw * &r;
            symmetrize(&mut delta);
            symmetrize(&mut v);
            (delta, v)
        }
    };
    Ok(EStepMoments {
        b,
        delta,
        v,
        y: tilted.mean,
    })
}

/// CM step: D, then α given the current R, then σ₀² and σ² given the new α.
///
/// `designs[i]` must match `moments[i]` row for row (observed batches with
/// sporadic rows removed). σ₀² averages over batches that contribute a
/// reference row; σ² over all non-reference rows.
pub fn cm_step(
    moments: &[EStepMoments],
    designs: &[BatchDesign],
    params: &ModelParameters,
) -> Result<ModelParameters> {
    if moments.len() != designs.len() || moments.is_empty() {
        return Err(Error::InvalidData("moments and designs differ in length".into()));
    }
    let q = moments.len() as f64;
    let h = params.n_random();
    let k = params.n_fixed();

    let mut d = DMatrix::zeros(h, h);
    for m in moments {
        d += &m.b * m.b.transpose() + &m.delta;
    }
    d /= q;
    symmetrize(&mut d);

    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (m, design) in moments.iter().zip(designs) {
        let r_inv = params.residual_covariance(design).map(|v| if v > 0.0 { 1.0 / v } else { 0.0 });
        let x = design.x();
        lhs += x.transpose() * &r_inv * x;
        rhs += x.transpose() * &r_inv * (&m.y - design.z() * &m.b);
    }
    let mut a: Vec<f64> = (0..k * k).map(|i| lhs[(i / k, i % k)]).collect();
    linalg::cholesky_in_place(&mut a, k).map_err(|column| Error::RankDeficient { column })?;
    let mut alpha: Vec<f64> = rhs.iter().copied().collect();
    linalg::cholesky_solve_in_place(&a, k, &mut alpha);
    let alpha = DVector::from_vec(alpha);

    let (mut ref_sum, mut n_ref, mut tgt_sum, mut n_tgt) = (0.0, 0usize, 0.0, 0usize);
    for (m, design) in moments.iter().zip(designs) {
        let e = &m.y - design.x() * &alpha - design.z() * &m.b;
        for j in 0..design.size() {
            let c = e[j] * e[j] + m.v[(j, j)];
            if design.reference() == Some(j) {
                ref_sum += c;
                n_ref += 1;
            } else {
                tgt_sum += c;
                n_tgt += 1;
            }
        }
    }
    Ok(ModelParameters {
        alpha,
        sigma0_sq: if n_ref > 0 { ref_sum / n_ref as f64 } else { params.sigma0_sq },
        sigma_sq: if n_tgt > 0 { tgt_sum / n_tgt as f64 } else { params.sigma_sq },
        d,
    })
}

/// One full ECM iteration through the single-batch operations.
pub fn ecm_step(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    mech: &MissingMechanism,
    params: &ModelParameters,
) -> Result<ModelParameters> {
    let mut moments = Vec::with_capacity(designs.len());
    let mut used = Vec::with_capacity(designs.len());
    for i in 0..data.n_batches() {
        if data.is_batch_missing(i) {
            moments.push(e_step_missing(params, &designs[i], mech, i)?);
            used.push(designs[i].clone());
        } else {
            let (design, y) = observed_batch(data, designs, i)?;
            moments.push(e_step_observed(params, &design, &y)?);
            used.push(design);
        }
    }
    cm_step(&moments, &used, params)
}

fn log_gaussian_density(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?;
    let r = y - mean;
    let sol = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&sol)))
}

/// Σ_{i∈O} log φ(y_i; X_iα, Σ_i) over observed rows only: the observed-data
/// log-likelihood with the mechanism terms left out.
pub fn gaussian_loglik(
    params: &ModelParameters,
    designs: &[BatchDesign],
    data: &FeatureBatchData,
) -> Result<f64> {
    let mut total = 0.0;
    for i in data.observed_batches() {
        let (design, y) = observed_batch(data, designs, i)?;
        params.check_design(&design)?;
        total += log_gaussian_density(
            &y,
            &params.fixed_mean(&design),
            &params.marginal_covariance(&design),
        )?;
    }
    Ok(total)
}

/// Observed-data log-likelihood including the missing-data mechanism:
/// `Σ_{i∈O} [log φ(y_i) + log(1 − Pr(M_i=1|y_i))] + Σ_{i∉O} log Pr(M_i=1)`.
///
/// For an observed batch the mechanism is evaluated at the mean of its
/// observed samples. An observed batch with missing probability one makes the
/// likelihood zero and is reported as an inconsistent mechanism.
pub fn observed_data_loglik(
    params: &ModelParameters,
    designs: &[BatchDesign],
    data: &FeatureBatchData,
    mech: &MissingMechanism,
) -> Result<f64> {
    let mut total = gaussian_loglik(params, designs, data)?;
    for i in 0..data.n_batches() {
        if data.is_batch_missing(i) {
            total += mechanism::marginal_missing_prob(params, &designs[i], mech, Some(i))?.ln();
        } else {
            let (_, values) = data.observed_rows(i);
            let s = values.iter().sum::<f64>() / values.len() as f64;
            let covariates = mech.covariates().and_then(|c| c.per_batch.get(i));
            let (p, _) = miss_prob_clamped(mech, s, covariates);
            if p >= 1.0 {
                return Err(Error::InconsistentMechanism { batch: i });
            }
            total += (-p).ln_1p();
        }
    }
    Ok(total)
}

/// Growth of σ₀² + σ² + tr D over its starting value treated as divergence.
const DIVERGENCE_FACTOR: f64 = 1e8;

fn check_cm_invariants(t: &Theta, h: usize) -> Result<()> {
    if !(t.sigma0_sq >= 0.0 && t.sigma_sq >= 0.0) {
        return Err(Error::InvalidParameters(format!(
            "negative variance after CM step ({}, {})",
            t.sigma0_sq, t.sigma_sq
        )));
    }
    for a in 0..h {
        if !(t.d[a * h + a] >= 0.0) {
            return Err(Error::InvalidParameters("D has a negative diagonal".into()));
        }
        for c in 0..a {
            let off = t.d[a * h + c];
            if off * off > t.d[a * h + a] * t.d[c * h + c] * (1.0 + 1e-10) + 1e-300 {
                return Err(Error::InvalidParameters("D is not positive semidefinite".into()));
            }
        }
    }
    if t.alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameters("non-finite alpha".into()));
    }
    Ok(())
}

/// Fits one feature by ECM with the mechanism held fixed.
pub fn fit(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    mech: &MissingMechanism,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    validate_dataset(data, designs).into_result()?;
    let mut engine = Engine::new(data, designs, mech)?;
    let h = engine.h();
    let k = engine.k();
    let mut theta = match &config.init {
        InitPolicy::AvailableCase => engine.initial_theta()?,
        InitPolicy::Given(p) => {
            p.validate()?;
            if p.n_fixed() != k || p.n_random() != h {
                return Err(Error::InvalidParameters(
                    "initial parameters do not match the design dimensions".into(),
                ));
            }
            Theta::from_params(p)
        }
    };
    let wrap = |iteration: usize| move |e: Error| Error::FitFailed {
        iteration,
        source: Box::new(e),
    };

    let start_variance = theta.total_variance().max(1.0);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < config.max_iter {
        let ll = engine.e_step(&theta).map_err(wrap(n_iter))?;
        if config.monitor_likelihood {
            trace.push(ll);
        }
        let next = engine.cm_step(&theta).map_err(wrap(n_iter))?;
        let total_variance = next.total_variance();
        if !(total_variance <= DIVERGENCE_FACTOR * start_variance) {
            return Err(wrap(n_iter)(Error::Diverged { total_variance }));
        }
        check_cm_invariants(&next, h).map_err(wrap(n_iter))?;
        n_iter += 1;
        let change = theta.max_relative_change(&next);
        theta = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    let ll = engine.e_step(&theta).map_err(wrap(n_iter))?;
    if config.monitor_likelihood {
        trace.push(ll);
    }
    let info = DMatrix::from_row_slice(k, k, &engine.observed_information(&theta));
    let mut alpha_cov = spd_inverse(&info, "observed information of alpha").map_err(wrap(n_iter))?;
    symmetrize(&mut alpha_cov);
    Ok(FitResult {
        params: theta.to_params(h),
        alpha_cov,
        n_iter,
        converged,
        loglik_trace: trace,
        clamp_warnings: engine.clamped,
    })
}

/// Σ_{i∈O} XᵢᵀWᵢXᵢ evaluated directly, for checking `alpha_cov`.
pub fn observed_information(
    params: &ModelParameters,
    designs: &[BatchDesign],
    data: &FeatureBatchData,
) -> Result<DMatrix<f64>> {
    let k = params.n_fixed();
    let mut info = DMatrix::zeros(k, k);
    for i in data.observed_batches() {
        let (design, _) = observed_batch(data, designs, i)?;
        let w = params.precision(&design)?;
        info += design.x().transpose() * w * design.x();
    }
    Ok(info)
}

#[derive(Debug, Clone)]
pub struct ProfilePoint {
    pub mechanism: MissingMechanism,
    /// Maximized observed-data log-likelihood, or the failure.
    pub outcome: std::result::Result<(f64, FitResult), String>,
}

impl ProfilePoint {
    pub fn loglik(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|(ll, _)| *ll)
    }
}

#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub points: Vec<ProfilePoint>,
    /// Index of the grid point with the largest log-likelihood.
    pub best: Option<usize>,
}

impl ProfileResult {
    fn from_points(points: Vec<ProfilePoint>) -> Self {
        let best = points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.loglik().filter(|v| v.is_finite()).map(|v| (i, v)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        Self { points, best }
    }

    pub fn best_point(&self) -> Option<&ProfilePoint> {
        self.best.map(|i| &self.points[i])
    }
}

/// Fits at every Γ of the grid and records the maximized observed-data
/// log-likelihood. Failed points are kept with their error.
pub fn profile_gamma(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    grid: &[MissingMechanism],
    config: &FitConfig,
) -> Result<ProfileResult> {
    if grid.is_empty() {
        return Err(Error::InvalidMechanism("empty profile grid".into()));
    }
    let points = grid
        .iter()
        .map(|mech| {
            let outcome = fit(data, designs, mech, config).and_then(|f| {
                let ll = observed_data_loglik(&f.params, designs, data, mech)?;
                Ok((ll, f))
            });
            ProfilePoint {
                mechanism: mech.clone(),
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    Ok(ProfileResult::from_points(points))
}

/// Maximizes the exponential-mechanism likelihood over γ₀ at fixed γ, for
/// one or more features sharing the mechanism.
///
/// Only the mechanism terms depend on γ₀:
/// `Σ_{i∈O} log(1 − x a_i) + Q_mis log x + const` with `x = e^{−γ₀}` and
/// `a_i = e^{−γ s_i}`; the stationary point solves
/// `Σ_{i∈O} x a_i / (1 − x a_i) = Q_mis` on `0 < x < 1 / max a_i`.
pub fn optimal_exponential_intercept(features: &[&FeatureBatchData], gamma: f64) -> Result<f64> {
    let mut a = Vec::new();
    let mut q_mis = 0.0;
    for data in features {
        q_mis += (data.n_batches() - data.n_observed_batches()) as f64;
        for i in data.observed_batches() {
            let (_, v) = data.observed_rows(i);
            a.push((-gamma * v.iter().sum::<f64>() / v.len() as f64).exp());
        }
    }
    if a.is_empty() {
        return Err(Error::InvalidData("no observed batches".into()));
    }
    if q_mis == 0.0 {
        return Err(Error::MechanismEstimation(
            "no missing batches: the intercept is unbounded".into(),
        ));
    }
    let a_max = a.iter().copied().fold(0.0, f64::max);
    let score = |x: f64| a.iter().map(|&ai| x * ai / (1.0 - x * ai)).sum::<f64>() - q_mis;
    let (mut lo, mut hi) = (0.0, 1.0 / a_max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(-(0.5 * (lo + hi)).ln())
}

/// Profiles the exponential slope γ over `gammas`, maximizing over γ₀ at each
/// point. Ω̂ does not depend on γ₀, so one fit per slope suffices.
pub fn profile_exponential_slope(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    gammas: &[f64],
    config: &FitConfig,
) -> Result<ProfileResult> {
    if gammas.is_empty() {
        return Err(Error::InvalidMechanism("empty profile grid".into()));
    }
    let mut points = Vec::with_capacity(gammas.len());
    for &g in gammas {
        let point = optimal_exponential_intercept(&[data], g)
            .and_then(|g0| MissingMechanism::exponential_unchecked_intercept(g0, g))
            .and_then(|mech| {
                let f = fit(data, designs, &mech, config)?;
                let ll = observed_data_loglik(&f.params, designs, data, &mech)?;
                Ok((mech, ll, f))
            });
        points.push(match point {
            Ok((mechanism, ll, f)) => ProfilePoint {
                mechanism,
                outcome: Ok((ll, f)),
            },
            Err(e) => ProfilePoint {
                mechanism: MissingMechanism::exponential_unchecked_intercept(0.0, g.max(0.0))?,
                outcome: Err(e.to_string()),
            },
        });
    }
    Ok(ProfileResult::from_points(points))
}

/// Available-case summary of one feature for mechanism estimation.
pub fn mechanism_input(data: &FeatureBatchData) -> MechanismFitInput {
    MechanismFitInput::from_feature(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intercept_design(p: usize) -> BatchDesign {
        BatchDesign::random_intercept(DMatrix::from_element(p, 1, 1.0), Some(0)).unwrap()
    }

    fn paper_params() -> ModelParameters {
        ModelParameters::random_intercept(&[10.0], 2.0, 4.0, 3.0).unwrap()
    }

    #[test]
    fn observed_e_step_zero_residual() {
        let params = paper_params();
        let design = intercept_design(4);
        let m = e_step_observed(&params, &design, &DVector::from_element(4, 10.0)).unwrap();
        assert!(m.b.amax() < 1e-14);
        assert_eq!(m.y, DVector::from_element(4, 10.0));
    }

    #[test]
    fn observed_e_step_without_random_effect() {
        let params = ModelParameters::random_intercept(&[10.0], 2.0, 4.0, 0.0).unwrap();
        let m = e_step_observed(&params, &intercept_design(4), &DVector::from_element(4, 12.0)).unwrap();
        assert_eq!(m.b[0], 0.0);
        assert_eq!(m.delta[(0, 0)], 0.0);
    }

    #[test]
    fn observed_e_step_woodbury_values() {
        // 1ᵀR⁻¹1 = 1/2 + 3/4 = 1.25; Δ = D/(1 + D·1.25) = 3/4.75
        let params = paper_params();
        let m = e_step_observed(&params, &intercept_design(4), &DVector::from_element(4, 11.0)).unwrap();
        assert_relative_eq!(m.delta[(0, 0)], 3.0 / 4.75, epsilon = 1e-14);
        // b = D 1ᵀW 1 for unit residuals; 1ᵀW1 = 1.25 / 4.75
        let w = params.precision(&intercept_design(4)).unwrap();
        assert_relative_eq!(m.b[0], 3.0 * w.sum(), epsilon = 1e-14);
        assert_relative_eq!(m.b[0], 3.0 * 1.25 / 4.75, epsilon = 1e-14);
        assert_relative_eq!(m.v[(2, 1)], m.delta[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn missing_e_step_zero_tilt() {
        let params = paper_params();
        let design = intercept_design(4);
        for mech in [
            MissingMechanism::exponential(0.0, 0.0).unwrap(),
            MissingMechanism::logit(0.4, 0.0).unwrap(),
        ] {
            let m = e_step_missing(&params, &design, &mech, 0).unwrap();
            assert!((&m.y - DVector::from_element(4, 10.0)).amax() < 1e-12);
            assert!(m.b.amax() < 1e-12);
            assert!((&m.delta - &params.d).amax() < 1e-12);
            assert!((&m.v - params.residual_covariance(&design)).amax() < 1e-12);
        }
    }

    #[test]
    fn missing_e_step_paper_setting() {
        let params = paper_params();
        let mech = MissingMechanism::exponential(0.0, 0.1).unwrap();
        let m = e_step_missing(&params, &intercept_design(4), &mech, 0).unwrap();
        for (a, b) in m.y.iter().zip([9.65, 9.60, 9.60, 9.60]) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        // b = −(γ/p) D Zᵀ1 = −0.3
        assert_relative_eq!(m.b[0], -0.3, epsilon = 1e-12);
    }

    #[test]
    fn cm_step_direct_values() {
        // D = ((1 + 0.5) + (1 + 0.5)) / 2
        let design = BatchDesign::random_intercept(DMatrix::identity(1, 1), None).unwrap();
        let moments: Vec<EStepMoments> = [1.0, -1.0]
            .iter()
            .map(|&b| EStepMoments {
                b: DVector::from_element(1, b),
                delta: DMatrix::from_element(1, 1, 0.5),
                v: DMatrix::zeros(1, 1),
                y: DVector::from_element(1, 2.0 + b),
            })
            .collect();
        let params = ModelParameters::random_intercept(&[0.0], 1.0, 1.0, 1.0).unwrap();
        let next = cm_step(&moments, &[design.clone(), design], &params).unwrap();
        assert_relative_eq!(next.d[(0, 0)], 1.5);
        assert_relative_eq!(next.alpha[0], 2.0);
    }

    #[test]
    fn cm_step_identity_design_recovers_response() {
        let design = BatchDesign::new(DMatrix::identity(3, 3), DMatrix::from_element(3, 1, 1.0), None).unwrap();
        let y = DVector::from_vec(vec![1.5, -2.0, 7.0]);
        let moments = vec![EStepMoments {
            b: DVector::zeros(1),
            delta: DMatrix::zeros(1, 1),
            v: DMatrix::zeros(3, 3),
            y: y.clone(),
        }];
        let params = ModelParameters::random_intercept(&[0.0, 0.0, 0.0], 1.0, 1.0, 1.0).unwrap();
        let next = cm_step(&moments, &[design], &params).unwrap();
        assert!((next.alpha - y).amax() < 1e-14);
    }

    #[test]
    fn cm_step_variance_updates() {
        // two batches with opposite constant responses, so α = 0
        let design = intercept_design(4);
        let params = ModelParameters::random_intercept(&[0.0], 1.0, 1.0, 1.0).unwrap();
        let mk = |y: f64| EStepMoments {
            b: DVector::zeros(1),
            delta: DMatrix::zeros(1, 1),
            v: DMatrix::zeros(4, 4),
            y: DVector::from_element(4, y),
        };
        let (m1, m2) = (mk(1.0), mk(-1.0));
        let next = cm_step(&[m1, m2], &[design.clone(), design], &params).unwrap();
        assert!(next.alpha[0].abs() < 1e-15);
        assert_relative_eq!(next.sigma0_sq, 1.0);
        assert_relative_eq!(next.sigma_sq, 6.0 / (8.0 - 2.0));
    }

    #[test]
    fn inconsistent_mechanism_is_reported() {
        let params = paper_params();
        let designs = vec![intercept_design(4), intercept_design(4)];
        let data = FeatureBatchData::from_complete(&[vec![10.0; 4], vec![9.0; 4]], &[false, true]).unwrap();
        let mech = MissingMechanism::exponential(0.0, 0.0).unwrap();
        assert!(matches!(
            observed_data_loglik(&params, &designs, &data, &mech),
            Err(Error::InconsistentMechanism { batch: 0 })
        ));
    }

    #[test]
    fn missing_batch_contributes_log_marginal() {
        let params = paper_params();
        let designs = vec![intercept_design(4), intercept_design(4)];
        let data = FeatureBatchData::from_complete(&[vec![10.0; 4], vec![9.0; 4]], &[false, true]).unwrap();
        let mech = MissingMechanism::exponential(0.0, 0.1).unwrap();
        let full = observed_data_loglik(&params, &designs, &data, &mech).unwrap();
        let gauss = gaussian_loglik(&params, &designs, &data).unwrap();
        let obs_term = (-(-1.0f64).exp()).ln_1p();
        assert_relative_eq!(full - gauss - obs_term, (0.37507f64).ln(), epsilon = 2e-5);
    }

    #[test]
    fn intercept_profile_matches_constant_missingness() {
        // γ = 0: e^{−γ₀} is the missing fraction
        let values = vec![vec![1.0; 2]; 5];
        let data = FeatureBatchData::from_complete(&values, &[true, false, false, true, false]).unwrap();
        let g0 = optimal_exponential_intercept(&[&data], 0.0).unwrap();
        assert_relative_eq!((-g0).exp(), 0.4, epsilon = 1e-12);
    }
}
