//! Domain data model: batch designs, per-feature batch data, model parameters,
//! missing-data mechanisms and E-step moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Design of one batch: fixed-effect matrix `x` (p×k), random-effect matrix
/// `z` (p×h) and the optional row holding the reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDesign {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    reference: Option<usize>,
}

impl BatchDesign {
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, reference: Option<usize>) -> Result<Self> {
        let p = x.nrows();
        if p == 0 {
            return Err(Error::InvalidDesign("batch has no rows".into()));
        }
        if z.nrows() != p {
            return Err(Error::InvalidDesign(format!(
                "x has {p} rows but z has {}",
                z.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidDesign("x and z need at least one column".into()));
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite design entry".into()));
        }
        if let Some(r) = reference {
            if r >= p {
                return Err(Error::InvalidDesign(format!(
                    "reference row {r} out of range for batch of size {p}"
                )));
            }
        }
        Ok(Self { x, z, reference })
    }

    /// Random-intercept design (`z` is a column of ones).
    pub fn random_intercept(x: DMatrix<f64>, reference: Option<usize>) -> Result<Self> {
        let z = DMatrix::from_element(x.nrows(), 1, 1.0);
        Self::new(x, z, reference)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn reference(&self) -> Option<usize> {
        self.reference
    }

    /// Batch size p_i.
    pub fn size(&self) -> usize {
        self.x.nrows()
    }

    /// Number of fixed effects k.
    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Number of random effects h.
    pub fn n_random(&self) -> usize {
        self.z.ncols()
    }

    /// Design restricted to `rows` (in the given order). The reference marker
    /// follows its row, or disappears if the row is dropped.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidDesign("row selection is empty".into()));
        }
        let x = self.x.select_rows(rows);
        let z = self.z.select_rows(rows);
        let reference = self
            .reference
            .and_then(|r| rows.iter().position(|&row| row == r));
        Self::new(x, z, reference)
    }
}

/// One feature's abundances organized by batch.
///
/// Values are log-intensities; a missing sample is stored as `None`. A batch
/// whose samples are all missing is batch-missing (`M_i = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatchData {
    batches: Vec<Vec<Option<f64>>>,
}

impl FeatureBatchData {
    pub fn new(batches: Vec<Vec<Option<f64>>>) -> Result<Self> {
        for (i, b) in batches.iter().enumerate() {
            if b.is_empty() {
                return Err(Error::InvalidData(format!("batch {i} has no samples")));
            }
            if b.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "batch {i} has a non-finite observed value"
                )));
            }
        }
        Ok(Self { batches })
    }

    /// Builds data from complete per-batch vectors and batch-missing flags.
    pub fn from_complete(values: &[Vec<f64>], batch_missing: &[bool]) -> Result<Self> {
        if values.len() != batch_missing.len() {
            return Err(Error::InvalidData(
                "values and batch_missing differ in length".into(),
            ));
        }
        let batches = values
            .iter()
            .zip(batch_missing)
            .map(|(v, &m)| v.iter().map(|&x| (!m).then_some(x)).collect())
            .collect();
        Self::new(batches)
    }

    /// Number of batches Q.
    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch(&self, i: usize) -> &[Option<f64>] {
        &self.batches[i]
    }

    pub fn batches(&self) -> &[Vec<Option<f64>>] {
        &self.batches
    }

    /// Batch-missing flag M_i.
    pub fn is_batch_missing(&self, i: usize) -> bool {
        self.batches[i].iter().all(Option::is_none)
    }

    pub fn batch_missing(&self) -> Vec<bool> {
        (0..self.n_batches()).map(|i| self.is_batch_missing(i)).collect()
    }

    /// Indices of observed batches (the set O).
    pub fn observed_batches(&self) -> Vec<usize> {
        (0..self.n_batches())
            .filter(|&i| !self.is_batch_missing(i))
            .collect()
    }

    /// Q_obs.
    pub fn n_observed_batches(&self) -> usize {
        (0..self.n_batches())
            .filter(|&i| !self.is_batch_missing(i))
            .count()
    }

    /// Observed row indices and values of batch `i`.
    pub fn observed_rows(&self, i: usize) -> (Vec<usize>, Vec<f64>) {
        self.batches[i]
            .iter()
            .enumerate()
            .filter_map(|(r, v)| v.map(|v| (r, v)))
            .unzip()
    }

    /// Whether any observed batch has sporadically missing samples.
    pub fn has_sporadic_missing(&self) -> bool {
        (0..self.n_batches()).any(|i| {
            !self.is_batch_missing(i) && self.batches[i].iter().any(Option::is_none)
        })
    }

    /// Reorders whole batches: batch `i` of the result is batch `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            batches: perm.iter().map(|&j| self.batches[j].clone()).collect(),
        }
    }
}

/// Ω = {α, σ₀², σ², D}.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub alpha: DVector<f64>,
    pub sigma0_sq: f64,
    pub sigma_sq: f64,
    pub d: DMatrix<f64>,
}

impl ModelParameters {
    pub fn new(alpha: DVector<f64>, sigma0_sq: f64, sigma_sq: f64, d: DMatrix<f64>) -> Result<Self> {
        let p = Self {
            alpha,
            sigma0_sq,
            sigma_sq,
            d,
        };
        p.validate()?;
        Ok(p)
    }

    /// Scalar random-intercept variance convenience constructor (h = 1).
    pub fn random_intercept(alpha: &[f64], sigma0_sq: f64, sigma_sq: f64, d: f64) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(alpha),
            sigma0_sq,
            sigma_sq,
            DMatrix::from_element(1, 1, d),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0_sq >= 0.0 && self.sigma0_sq.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "sigma0_sq = {} must be finite and non-negative",
                self.sigma0_sq
            )));
        }
        if !(self.sigma_sq >= 0.0 && self.sigma_sq.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "sigma_sq = {} must be finite and non-negative",
                self.sigma_sq
            )));
        }
        if self.alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite alpha".into()));
        }
        if self.d.nrows() != self.d.ncols() || self.d.nrows() == 0 {
            return Err(Error::InvalidParameters("D must be square and non-empty".into()));
        }
        if (&self.d - self.d.transpose()).amax() > 1e-10 * self.d.amax().max(1.0) {
            return Err(Error::InvalidParameters("D is not symmetric".into()));
        }
        if !linalg::is_psd(&self.d, 1e-12) {
            return Err(Error::InvalidParameters("D is not positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn n_fixed(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_random(&self) -> usize {
        self.d.nrows()
    }

    /// Residual variance of row `row` of a batch with the given reference row.
    pub fn row_variance(&self, reference: Option<usize>, row: usize) -> f64 {
        if reference == Some(row) {
            self.sigma0_sq
        } else {
            self.sigma_sq
        }
    }

    /// R_i: σ₀² at the reference row, σ² elsewhere.
    pub fn residual_covariance(&self, design: &BatchDesign) -> DMatrix<f64> {
        let p = design.size();
        DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                self.row_variance(design.reference(), i)
            } else {
                0.0
            }
        })
    }

    /// Σ_i = Z_i D Z_iᵀ + R_i.
    pub fn marginal_covariance(&self, design: &BatchDesign) -> DMatrix<f64> {
        let z = design.z();
        let mut s = z * &self.d * z.transpose() + self.residual_covariance(design);
        linalg::symmetrize(&mut s);
        s
    }

    /// W_i = Σ_i⁻¹.
    pub fn precision(&self, design: &BatchDesign) -> Result<DMatrix<f64>> {
        linalg::spd_inverse(&self.marginal_covariance(design), "marginal covariance")
    }

    /// X_i α.
    pub fn fixed_mean(&self, design: &BatchDesign) -> DVector<f64> {
        design.x() * &self.alpha
    }

    pub(crate) fn check_design(&self, design: &BatchDesign) -> Result<()> {
        if design.n_fixed() != self.n_fixed() || design.n_random() != self.n_random() {
            return Err(Error::InvalidDesign(format!(
                "design has k={}, h={} but parameters have k={}, h={}",
                design.n_fixed(),
                design.n_random(),
                self.n_fixed(),
                self.n_random()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismForm {
    /// Pr(M=1|y) = exp(−γ₀ − γ·s)
    Exponential,
    /// logit Pr(M=1|y) = γ₀ + γ·s + γ₂ᵀC
    Logit,
}

/// Γ = {γ₀, γ} with its functional form, plus optional batch covariates
/// (logit form only).
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMechanism {
    form: MechanismForm,
    gamma0: f64,
    gamma: f64,
    covariates: Option<BatchCovariates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchCovariates {
    pub coefficients: DVector<f64>,
    pub per_batch: Vec<DVector<f64>>,
}

impl MissingMechanism {
    pub fn exponential(gamma0: f64, gamma: f64) -> Result<Self> {
        if !(gamma0.is_finite() && gamma.is_finite()) {
            return Err(Error::InvalidMechanism("non-finite coefficient".into()));
        }
        if gamma0 < 0.0 || gamma < 0.0 {
            return Err(Error::InvalidMechanism(format!(
                "exponential form needs gamma0 >= 0 and gamma >= 0 (got {gamma0}, {gamma})"
            )));
        }
        Ok(Self {
            form: MechanismForm::Exponential,
            gamma0,
            gamma,
            covariates: None,
        })
    }

    /// Exponential form without the sign restriction on γ₀.
    ///
    /// γ₀ does not enter the E- or CM-steps, and available-case estimates of it
    /// are often slightly negative; this constructor accepts them.
    pub fn exponential_unchecked_intercept(gamma0: f64, gamma: f64) -> Result<Self> {
        let mut m = Self::exponential(0.0, gamma)?;
        if !gamma0.is_finite() {
            return Err(Error::InvalidMechanism("non-finite gamma0".into()));
        }
        m.gamma0 = gamma0;
        Ok(m)
    }

    pub fn logit(gamma0: f64, gamma: f64) -> Result<Self> {
        if !(gamma0.is_finite() && gamma.is_finite()) {
            return Err(Error::InvalidMechanism("non-finite coefficient".into()));
        }
        Ok(Self {
            form: MechanismForm::Logit,
            gamma0,
            gamma,
            covariates: None,
        })
    }

    /// Attaches batch covariates C_i with coefficients γ₂ (logit form only).
    pub fn with_batch_covariates(
        mut self,
        coefficients: DVector<f64>,
        per_batch: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if self.form != MechanismForm::Logit {
            return Err(Error::InvalidMechanism(
                "batch covariates are only supported by the logit form".into(),
            ));
        }
        if per_batch.iter().any(|c| c.len() != coefficients.len()) {
            return Err(Error::InvalidMechanism(
                "batch covariate length does not match gamma2".into(),
            ));
        }
        self.covariates = Some(BatchCovariates {
            coefficients,
            per_batch,
        });
        Ok(self)
    }

    /// No mechanism effect: missingness is constant in the abundance (MAR).
    pub fn ignorable() -> Self {
        Self {
            form: MechanismForm::Exponential,
            gamma0: 0.0,
            gamma: 0.0,
            covariates: None,
        }
    }

    pub fn form(&self) -> MechanismForm {
        self.form
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn covariates(&self) -> Option<&BatchCovariates> {
        self.covariates.as_ref()
    }

    /// γ₂ᵀC_i for batch `batch`, zero without covariates.
    pub fn covariate_offset(&self, batch: usize) -> Result<f64> {
        match &self.covariates {
            None => Ok(0.0),
            Some(c) => c
                .per_batch
                .get(batch)
                .map(|ci| c.coefficients.dot(ci))
                .ok_or_else(|| {
                    Error::InvalidMechanism(format!("no batch covariates for batch {batch}"))
                }),
        }
    }

    /// Same form and covariates with different (γ₀, γ).
    pub fn with_coefficients(&self, gamma0: f64, gamma: f64) -> Result<Self> {
        let mut m = match self.form {
            MechanismForm::Exponential => Self::exponential_unchecked_intercept(gamma0, gamma)?,
            MechanismForm::Logit => Self::logit(gamma0, gamma)?,
        };
        m.covariates = self.covariates.clone();
        Ok(m)
    }
}

/// Conditional moments of one batch consumed by the CM step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepMoments {
    /// E(b_i | ·)
    pub b: DVector<f64>,
    /// Var(b_i | ·)
    pub delta: DMatrix<f64>,
    /// Var(e_i | ·)
    pub v: DMatrix<f64>,
    /// Working response E(y_i | ·); equals the observed y_i for observed batches.
    pub y: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Fatal,
    Warning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub severity: Severity,
    pub batch: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_batches: usize,
    pub n_observed_batches: usize,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_accepted(&self) -> bool {
        self.findings.iter().all(|f| f.severity != Severity::Fatal)
    }

    pub fn fatal(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Fatal)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.is_accepted() {
            Ok(self)
        } else {
            Err(Error::DatasetRejected(
                self.fatal().map(|f| f.message.clone()).collect(),
            ))
        }
    }
}

/// Checks a feature against its batch designs.
pub fn validate_dataset(data: &FeatureBatchData, designs: &[BatchDesign]) -> ValidationReport {
    let mut findings = Vec::new();
    let mut fatal = |batch: Option<usize>, message: String| {
        findings.push(Finding {
            severity: Severity::Fatal,
            batch,
            message,
        })
    };
    if data.n_batches() != designs.len() {
        fatal(
            None,
            format!(
                "data has {} batches but {} designs were given",
                data.n_batches(),
                designs.len()
            ),
        );
    }
    if let Some(first) = designs.first() {
        for (i, d) in designs.iter().enumerate() {
            if d.n_fixed() != first.n_fixed() || d.n_random() != first.n_random() {
                fatal(
                    Some(i),
                    format!("batch {i}: design dimensions differ from batch 0"),
                );
            }
        }
    }
    for (i, d) in designs.iter().enumerate().take(data.n_batches()) {
        let p = data.batch(i).len();
        if d.size() != p {
            fatal(
                Some(i),
                format!(
                    "batch {i}: design has {} rows but the batch has {p} samples",
                    d.size()
                ),
            );
        }
    }
    let q_obs = data.n_observed_batches();
    if q_obs == 0 {
        fatal(None, "no observed batches".into());
    }
    for i in data.observed_batches() {
        if i >= designs.len() {
            break;
        }
        if let Some(r) = designs[i].reference() {
            if data.batch(i).get(r).is_some_and(Option::is_none) {
                findings.push(Finding {
                    severity: Severity::Warning,
                    batch: Some(i),
                    message: format!("batch {i}: reference channel is sporadically missing"),
                });
            }
        }
    }
    let with_ref = designs.iter().filter(|d| d.reference().is_some()).count();
    if with_ref != 0 && with_ref != designs.len() {
        findings.push(Finding {
            severity: Severity::Warning,
            batch: None,
            message: format!(
                "{} of {} batches have no reference channel",
                designs.len() - with_ref,
                designs.len()
            ),
        });
    }
    ValidationReport {
        n_batches: data.n_batches(),
        n_observed_batches: q_obs,
        findings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intercept_design(p: usize, reference: Option<usize>) -> BatchDesign {
        BatchDesign::random_intercept(DMatrix::from_element(p, 1, 1.0), reference).unwrap()
    }

    #[test]
    fn residual_covariance_reference_first() {
        let params = ModelParameters::random_intercept(&[10.0], 2.0, 4.0, 3.0).unwrap();
        let r = params.residual_covariance(&intercept_design(4, Some(0)));
        assert_eq!(r, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, 4.0, 4.0])));
    }

    #[test]
    fn residual_covariance_without_reference() {
        let params = ModelParameters::random_intercept(&[0.0], 7.0, 1.0, 0.0).unwrap();
        let r = params.residual_covariance(&intercept_design(3, None));
        assert_eq!(r, DMatrix::identity(3, 3));
    }

    #[test]
    fn residual_covariance_equal_variances() {
        let params = ModelParameters::random_intercept(&[0.0], 2.5, 2.5, 0.0).unwrap();
        let r = params.residual_covariance(&intercept_design(4, Some(2)));
        assert_eq!(r, DMatrix::identity(4, 4) * 2.5);
    }

    #[test]
    fn reference_can_sit_anywhere() {
        let params = ModelParameters::random_intercept(&[0.0], 2.0, 4.0, 0.0).unwrap();
        let r = params.residual_covariance(&intercept_design(4, Some(3)));
        assert_eq!(r[(3, 3)], 2.0);
        assert_eq!(r[(0, 0)], 4.0);
    }

    #[test]
    fn marginal_covariance_is_pd() {
        let params = ModelParameters::random_intercept(&[10.0], 2.0, 4.0, 3.0).unwrap();
        let s = params.marginal_covariance(&intercept_design(4, Some(0)));
        assert!(s.clone().cholesky().is_some());
        assert_relative_eq!(s[(0, 0)], 5.0);
        assert_relative_eq!(s[(1, 2)], 3.0);
    }

    #[test]
    fn design_rejects_bad_reference() {
        assert!(BatchDesign::random_intercept(DMatrix::from_element(3, 1, 1.0), Some(3)).is_err());
    }

    #[test]
    fn select_rows_remaps_reference() {
        let d = intercept_design(4, Some(2));
        assert_eq!(d.select_rows(&[0, 2, 3]).unwrap().reference(), Some(1));
        assert_eq!(d.select_rows(&[0, 1]).unwrap().reference(), None);
    }

    #[test]
    fn rejects_non_psd_d() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelParameters::new(DVector::zeros(1), 1.0, 1.0, d).is_err());
    }

    #[test]
    fn exponential_sign_constraint() {
        assert!(MissingMechanism::exponential(0.0, -0.1).is_err());
        assert!(MissingMechanism::logit(0.0, -0.1).is_ok());
        assert!(MissingMechanism::exponential(0.0, 0.1)
            .unwrap()
            .with_batch_covariates(DVector::zeros(1), vec![])
            .is_err());
    }

    #[test]
    fn validation_accepts_consistent_dataset() {
        let designs: Vec<_> = (0..36).map(|_| intercept_design(4, Some(0))).collect();
        let values: Vec<Vec<f64>> = (0..36).map(|_| vec![1.0; 4]).collect();
        let missing: Vec<bool> = (0..36).map(|i| i >= 22).collect();
        let data = FeatureBatchData::from_complete(&values, &missing).unwrap();
        let report = validate_dataset(&data, &designs);
        assert!(report.is_accepted());
        assert_eq!(report.n_observed_batches, 22);
        assert_eq!(report, validate_dataset(&data, &designs));
    }

    #[test]
    fn validation_rejects_all_missing() {
        let designs: Vec<_> = (0..3).map(|_| intercept_design(4, Some(0))).collect();
        let data =
            FeatureBatchData::from_complete(&vec![vec![1.0; 4]; 3], &[true, true, true]).unwrap();
        let report = validate_dataset(&data, &designs);
        assert!(!report.is_accepted());
        assert!(report.fatal().any(|f| f.message.contains("no observed batches")));
    }

    #[test]
    fn validation_rejects_dimension_mismatch() {
        let designs = vec![intercept_design(3, Some(0)), intercept_design(4, Some(0))];
        let data =
            FeatureBatchData::from_complete(&[vec![1.0; 4], vec![1.0; 4]], &[false, false]).unwrap();
        let report = validate_dataset(&data, &designs);
        assert!(!report.is_accepted());
        assert_eq!(report.fatal().next().unwrap().batch, Some(0));
        assert!(report.into_result().is_err());
    }

    #[test]
    fn batch_missing_flags() {
        let data = FeatureBatchData::new(vec![
            vec![None, None, None, None],
            vec![Some(1.0), None, Some(2.0), Some(3.0)],
        ])
        .unwrap();
        assert_eq!(data.batch_missing(), vec![true, false]);
        assert_eq!(data.observed_rows(1), (vec![0, 2, 3], vec![1.0, 2.0, 3.0]));
        assert!(data.has_sporadic_missing());
    }
}
