//! Wald tests on fixed effects with batch-permutation p-values, and the
//! relative-abundance regression baseline.
//!
//! Permutations shuffle whole response batches (values and missing flags)
//! against the fixed batch designs. Only batches of the same shape (size and
//! reference position) are exchanged. Permutation `b` draws from a ChaCha8
//! stream `b + 1` seeded with the test seed, so the mixed-model test and the
//! baseline see the same permutations at the same seed.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ecm::{fit, FitConfig, FitResult, InitPolicy};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::types::{BatchDesign, FeatureBatchData, MissingMechanism};

/// Share of failed permutation refits above which a test is flagged.
pub const MAX_FAILURE_RATE: f64 = 0.05;

pub const DEFAULT_PERMUTATIONS: usize = 999;

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTest {
    pub index: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub wald_z: f64,
    pub p_perm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub coefficients: Vec<CoefficientTest>,
    /// Joint Wald statistic `α̂_Tᵀ Cov_T⁻¹ α̂_T` over the tested set.
    pub joint_wald: f64,
    pub p_joint: f64,
    /// Permutations requested.
    pub permutations: usize,
    /// Permutations whose refit failed; they are excluded from the p-values.
    pub failed: usize,
    pub seed: u64,
}

impl TestResult {
    pub fn reliable(&self) -> bool {
        self.failed as f64 <= MAX_FAILURE_RATE * self.permutations as f64
    }

    pub fn effective_permutations(&self) -> usize {
        self.permutations - self.failed
    }
}

/// `z_i = α̂_i / sqrt(alpha_cov[i,i])` for each tested index.
pub fn wald_statistics(fit: &FitResult, tested: &[usize]) -> Result<Vec<f64>> {
    tested
        .iter()
        .map(|&i| {
            let est = *fit.params.alpha.get(i).ok_or_else(|| {
                Error::InvalidTest(format!("coefficient {i} out of range"))
            })?;
            z_score(est, fit.alpha_cov[(i, i)], i)
        })
        .collect()
}

fn z_score(estimate: f64, variance: f64, index: usize) -> Result<f64> {
    if variance > 0.0 {
        Ok(estimate / variance.sqrt())
    } else if estimate == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::ZeroVariance(index))
    }
}

fn check_tested(tested: &[usize], k: usize) -> Result<()> {
    if tested.is_empty() {
        return Err(Error::InvalidTest("no coefficients to test".into()));
    }
    for (n, &i) in tested.iter().enumerate() {
        if i >= k {
            return Err(Error::InvalidTest(format!("coefficient {i} out of range (k = {k})")));
        }
        if tested[..n].contains(&i) {
            return Err(Error::InvalidTest(format!("coefficient {i} listed twice")));
        }
    }
    Ok(())
}

/// Joint Wald statistic over `tested`. A zero estimate with zero variance
/// contributes nothing.
pub fn joint_wald(alpha: &DVector<f64>, cov: &DMatrix<f64>, tested: &[usize]) -> Result<f64> {
    let keep: Vec<usize> = tested
        .iter()
        .copied()
        .filter(|&i| cov[(i, i)] > 0.0 || alpha[i] != 0.0)
        .collect();
    if keep.is_empty() {
        return Ok(0.0);
    }
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| cov[(keep[a], keep[b])]);
    let est = DVector::from_iterator(keep.len(), keep.iter().map(|&i| alpha[i]));
    let inv = spd_inverse(&sub, "covariance of the tested coefficients")?;
    Ok(est.dot(&(inv * &est)))
}

struct Statistics {
    estimates: Vec<f64>,
    std_errors: Vec<f64>,
    z: Vec<f64>,
    joint: f64,
}

fn statistics(alpha: &DVector<f64>, cov: &DMatrix<f64>, tested: &[usize]) -> Result<Statistics> {
    let z = tested
        .iter()
        .map(|&i| z_score(alpha[i], cov[(i, i)], i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Statistics {
        estimates: tested.iter().map(|&i| alpha[i]).collect(),
        std_errors: tested.iter().map(|&i| cov[(i, i)].max(0.0).sqrt()).collect(),
        z,
        joint: joint_wald(alpha, cov, tested)?,
    })
}

/// Groups of batch indices that may be exchanged: same size and reference row.
pub fn exchangeable_classes(designs: &[BatchDesign]) -> Vec<Vec<usize>> {
    let mut classes: Vec<((usize, Option<usize>), Vec<usize>)> = Vec::new();
    for (i, d) in designs.iter().enumerate() {
        let key = (d.size(), d.reference());
        match classes.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(i),
            None => classes.push((key, vec![i])),
        }
    }
    classes.into_iter().map(|(_, m)| m).collect()
}

/// The batch permutation used for permutation number `b` (0-based):
/// `perm[i]` is the batch whose responses are placed at batch `i`.
pub fn batch_permutation(classes: &[Vec<usize>], q: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64 + 1);
    let mut perm: Vec<usize> = (0..q).collect();
    for class in classes {
        let mut shuffled = class.clone();
        shuffled.shuffle(&mut rng);
        for (&slot, &src) in class.iter().zip(&shuffled) {
            perm[slot] = src;
        }
    }
    perm
}

struct Tally {
    coef: Vec<usize>,
    joint: usize,
    failed: usize,
}

fn tally(
    observed: &Statistics,
    permutations: usize,
    mut stat: impl FnMut(usize) -> Result<Statistics>,
) -> Tally {
    let mut t = Tally {
        coef: vec![0; observed.z.len()],
        joint: 0,
        failed: 0,
    };
    for b in 0..permutations {
        match stat(b) {
            Ok(s) => {
                for (c, (zs, zo)) in t.coef.iter_mut().zip(s.z.iter().zip(&observed.z)) {
                    if zs.abs() >= zo.abs() {
                        *c += 1;
                    }
                }
                if s.joint >= observed.joint {
                    t.joint += 1;
                }
            }
            Err(_) => t.failed += 1,
        }
    }
    t
}

fn assemble(tested: &[usize], observed: Statistics, t: Tally, permutations: usize, seed: u64) -> TestResult {
    let denom = (permutations - t.failed) as f64 + 1.0;
    let coefficients = tested
        .iter()
        .enumerate()
        .map(|(n, &index)| CoefficientTest {
            index,
            estimate: observed.estimates[n],
            std_error: observed.std_errors[n],
            wald_z: observed.z[n],
            p_perm: (1 + t.coef[n]) as f64 / denom,
        })
        .collect();
    TestResult {
        coefficients,
        joint_wald: observed.joint,
        p_joint: (1 + t.joint) as f64 / denom,
        permutations,
        failed: t.failed,
        seed,
    }
}

fn check_permutation_args(data: &FeatureBatchData, permutations: usize) -> Result<()> {
    if permutations == 0 {
        return Err(Error::InvalidTest("at least one permutation is required".into()));
    }
    if data.n_batches() < 2 {
        return Err(Error::InvalidTest("permutation needs at least two batches".into()));
    }
    Ok(())
}

/// Fits the model and calibrates the Wald statistics of `tested` by batch
/// permutation. Each permutation refits from the observed estimates.
#[allow(clippy::too_many_arguments)]
pub fn permutation_test(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    mech: &MissingMechanism,
    config: &FitConfig,
    tested: &[usize],
    permutations: usize,
    seed: u64,
) -> Result<(FitResult, TestResult)> {
    check_permutation_args(data, permutations)?;
    let observed_fit = fit(data, designs, mech, config)?;
    check_tested(tested, observed_fit.params.n_fixed())?;
    let observed = statistics(&observed_fit.params.alpha, &observed_fit.alpha_cov, tested)?;
    let refit_config = FitConfig {
        monitor_likelihood: false,
        init: InitPolicy::Given(observed_fit.params.clone()),
        ..config.clone()
    };
    let classes = exchangeable_classes(designs);
    let t = tally(&observed, permutations, |b| {
        let perm = batch_permutation(&classes, data.n_batches(), seed, b);
        let f = fit(&data.permuted(&perm), designs, mech, &refit_config)?;
        statistics(&f.params.alpha, &f.alpha_cov, tested)
    });
    Ok((observed_fit, assemble(tested, observed, t, permutations, seed)))
}

/// Least-squares fit of relative abundances `y_j − y_ref` within observed
/// batches on the design differences `x_j − x_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeAbundanceFit {
    /// Coefficients indexed like the columns of X; columns whose differences
    /// vanish on every retained sample are not estimable and hold NaN.
    pub coefficients: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_samples: usize,
    pub n_batches: usize,
}

/// Relative-abundance regression. The intercept column of X differences out;
/// a reference-indicator column becomes the constant term.
pub fn relative_abundance_fit(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
) -> Result<RelativeAbundanceFit> {
    let k = designs.first().map(BatchDesign::n_fixed).unwrap_or(0);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut response = Vec::new();
    let mut n_batches = 0;
    for (i, design) in designs.iter().enumerate() {
        let Some(r) = design.reference() else { continue };
        let values = data.batch(i);
        let Some(y_ref) = values.get(r).copied().flatten() else { continue };
        let mut used = false;
        for (j, v) in values.iter().enumerate() {
            if j == r {
                continue;
            }
            if let Some(y) = v {
                rows.push((0..k).map(|c| design.x()[(j, c)] - design.x()[(r, c)]).collect());
                response.push(y - y_ref);
                used = true;
            }
        }
        n_batches += used as usize;
    }
    if n_batches == 0 {
        return Err(Error::InvalidData(
            "no batch with an observed reference and target sample".into(),
        ));
    }
    let n = response.len();
    let cols: Vec<usize> = (0..k).filter(|&c| rows.iter().any(|r| r[c] != 0.0)).collect();
    let m = cols.len();
    if m == 0 || n <= m {
        return Err(Error::InvalidData(format!(
            "relative-abundance regression has {n} samples for {m} coefficients"
        )));
    }
    let x = DMatrix::from_fn(n, m, |a, b| rows[a][cols[b]]);
    let y = DVector::from_vec(response);
    let beta = crate::linalg::ols(&x, &y)?;
    let resid = &y - &x * &beta;
    let s2 = resid.norm_squared() / (n - m) as f64;
    let xtx_inv = spd_inverse(&(x.transpose() * &x), "relative-abundance design")?;
    let mut coefficients = DVector::from_element(k, f64::NAN);
    let mut cov = DMatrix::from_element(k, k, f64::NAN);
    for (a, &ca) in cols.iter().enumerate() {
        coefficients[ca] = beta[a];
        for (b, &cb) in cols.iter().enumerate() {
            cov[(ca, cb)] = s2 * xtx_inv[(a, b)];
        }
    }
    Ok(RelativeAbundanceFit {
        coefficients,
        cov,
        n_samples: n,
        n_batches,
    })
}

fn baseline_statistics(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    tested: &[usize],
) -> Result<Statistics> {
    let f = relative_abundance_fit(data, designs)?;
    if let Some(&i) = tested.iter().find(|&&i| f.coefficients[i].is_nan()) {
        return Err(Error::InvalidTest(format!(
            "coefficient {i} is not estimable from relative abundances"
        )));
    }
    statistics(&f.coefficients, &f.cov, tested)
}

/// Relative-abundance baseline calibrated by the same batch permutations as
/// [`permutation_test`].
pub fn relative_abundance_baseline(
    data: &FeatureBatchData,
    designs: &[BatchDesign],
    tested: &[usize],
    permutations: usize,
    seed: u64,
) -> Result<TestResult> {
    check_permutation_args(data, permutations)?;
    if designs.len() != data.n_batches() {
        return Err(Error::InvalidData("designs and batches differ in number".into()));
    }
    check_tested(tested, designs[0].n_fixed())?;
    let observed = baseline_statistics(data, designs, tested)?;
    let classes = exchangeable_classes(designs);
    let t = tally(&observed, permutations, |b| {
        let perm = batch_permutation(&classes, data.n_batches(), seed, b);
        baseline_statistics(&data.permuted(&perm), designs, tested)
    });
    Ok(assemble(tested, observed, t, permutations, seed))
}
