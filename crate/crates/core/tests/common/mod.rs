#![allow(dead_code)]

use mixemm::ecm::observed_batch;
use mixemm::{BatchDesign, FeatureBatchData, MechanismForm, MissingMechanism, ModelParameters};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub data: FeatureBatchData,
    pub designs: Vec<BatchDesign>,
    pub mech: MissingMechanism,
    pub truth: ModelParameters,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Column `(1, reference, x)` with the reference at a random row and a
/// continuous covariate; with `slopes` the covariate also gets a random slope.
pub fn random_designs<R: Rng>(rng: &mut R, q: usize, slopes: bool) -> Vec<BatchDesign> {
    (0..q)
        .map(|_| {
            let p = rng.random_range(3..=6);
            let r = rng.random_range(0..p);
            let mut x = DMatrix::zeros(p, 3);
            for j in 0..p {
                x[(j, 0)] = 1.0;
                x[(j, 1)] = (j == r) as u8 as f64;
                x[(j, 2)] = rng.sample::<f64, _>(StandardNormal);
            }
            let z = if slopes {
                x.select_columns(&[0, 2])
            } else {
                DMatrix::from_element(p, 1, 1.0)
            };
            BatchDesign::new(x, z, Some(r)).unwrap()
        })
        .collect()
}

pub fn random_params<R: Rng>(rng: &mut R, h: usize) -> ModelParameters {
    let alpha = DVector::from_vec(vec![10.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    let mut d: DMatrix<f64> = DMatrix::zeros(h, h);
    for a in 0..h {
        d[(a, a)] = rng.random_range(0.5..3.0);
    }
    if h == 2 {
        let c = rng.random_range(-0.5f64..0.5) * (d[(0, 0)] * d[(1, 1)]).sqrt();
        d[(0, 1)] = c;
        d[(1, 0)] = c;
    }
    ModelParameters::new(alpha, rng.random_range(0.5..3.0), rng.random_range(0.5..4.0), d).unwrap()
}

pub fn miss_probability(mech: &MissingMechanism, s: f64) -> f64 {
    let eta = mech.gamma0() + mech.gamma() * s;
    match mech.form() {
        MechanismForm::Exponential => (-eta).exp().min(1.0),
        MechanismForm::Logit => 1.0 / (1.0 + (-eta).exp()),
    }
}

/// One draw of a batch from N(Xα, ZDZᵀ + R).
pub fn draw_batch<R: Rng>(rng: &mut R, params: &ModelParameters, design: &BatchDesign) -> DVector<f64> {
    let l = params.marginal_covariance(design).cholesky().unwrap().unpack();
    let e = DVector::from_fn(design.size(), |_, _| rng.sample::<f64, _>(StandardNormal));
    params.fixed_mean(design) + l * e
}

pub fn draw_data<R: Rng>(
    rng: &mut R,
    params: &ModelParameters,
    designs: &[BatchDesign],
    mech: Option<&MissingMechanism>,
    sporadic: f64,
) -> FeatureBatchData {
    let batches = designs
        .iter()
        .map(|d| {
            let y = draw_batch(rng, params, d);
            if mech.is_some_and(|m| rng.random::<f64>() < miss_probability(m, y.mean())) {
                vec![None; y.len()]
            } else {
                y.iter().map(|&v| (rng.random::<f64>() >= sporadic).then_some(v)).collect()
            }
        })
        .collect();
    FeatureBatchData::new(batches).unwrap()
}

/// A random dataset with at least four observed batches. Random slopes in
/// every third instance; exponential or logit mechanism by `form`.
pub fn random_instance(seed: u64, form: MechanismForm) -> Instance {
    let mut rng = rng(seed);
    let slopes = seed % 3 == 2;
    loop {
        let q = rng.random_range(8..=25);
        let designs = random_designs(&mut rng, q, slopes);
        let truth = random_params(&mut rng, if slopes { 2 } else { 1 });
        let mech = match form {
            MechanismForm::Exponential => MissingMechanism::exponential(0.0, rng.random_range(0.02..0.2)).unwrap(),
            MechanismForm::Logit => {
                let g = rng.random_range(-0.8..-0.1);
                MissingMechanism::logit(rng.random_range(-1.0..1.0) - 10.0 * g, g).unwrap()
            }
        };
        let data = draw_data(&mut rng, &truth, &designs, Some(&mech), 0.05);
        if data.n_observed_batches() >= 4 {
            return Instance {
                data,
                designs,
                mech,
                truth,
            };
        }
    }
}

/// GLS estimate of α at known covariances, by explicit matrix inversion.
pub fn gls_oracle(params: &ModelParameters, designs: &[BatchDesign], data: &FeatureBatchData) -> DVector<f64> {
    let k = params.alpha.len();
    let mut lhs = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for i in data.observed_batches() {
        let (design, y) = observed_batch(data, designs, i).unwrap();
        let w = params.marginal_covariance(&design).try_inverse().unwrap();
        let x = design.x();
        lhs += x.transpose() * &w * x;
        rhs += x.transpose() * &w * y;
    }
    lhs.try_inverse().unwrap() * rhs
}

/// Moments of accepted draws from the missing-batch conditional
/// distribution, with Monte-Carlo standard errors of the mean and of the
/// diagonal of the covariance.
pub struct RejectionMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_se: DVector<f64>,
    pub var_se: DVector<f64>,
    /// Mean, variance and their standard errors for the batch mean s.
    pub s: [f64; 4],
    pub accepted: usize,
}

pub fn rejection_moments<R: Rng>(
    rng: &mut R,
    params: &ModelParameters,
    design: &BatchDesign,
    mech: &MissingMechanism,
    n_accept: usize,
) -> RejectionMoments {
    let p = design.size();
    let l = params.marginal_covariance(design).cholesky().unwrap().unpack();
    let mu = params.fixed_mean(design);
    let mut draws: Vec<DVector<f64>> = Vec::with_capacity(n_accept);
    while draws.len() < n_accept {
        let e = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &mu + &l * e;
        if rng.random::<f64>() < miss_probability(mech, y.mean()) {
            draws.push(y);
        }
    }
    let n = n_accept as f64;
    let mean = draws.iter().fold(DVector::zeros(p), |a, y| a + y) / n;
    let mut cov = DMatrix::zeros(p, p);
    for y in &draws {
        let r = y - &mean;
        cov += &r * r.transpose();
    }
    cov /= n - 1.0;
    let mut m4 = DVector::zeros(p);
    for y in &draws {
        for j in 0..p {
            m4[j] += (y[j] - mean[j]).powi(4);
        }
    }
    m4 /= n;
    let mean_se = DVector::from_fn(p, |j, _| (cov[(j, j)] / n).sqrt());
    let var_se = DVector::from_fn(p, |j, _| ((m4[j] - cov[(j, j)].powi(2)) / n).sqrt());
    let s_mean = mean.mean();
    let (mut s_var, mut s_m4) = (0.0, 0.0);
    for y in &draws {
        let r = y.mean() - s_mean;
        s_var += r * r;
        s_m4 += r.powi(4);
    }
    s_var /= n - 1.0;
    s_m4 /= n;
    RejectionMoments {
        mean,
        cov,
        mean_se,
        var_se,
        s: [s_mean, s_var, (s_var / n).sqrt(), ((s_m4 - s_var * s_var) / n).sqrt()],
        accepted: n_accept,
    }
}

/// Largest |analytic − MC| / MC SE over the mean and the variances.
pub fn max_mc_z(mean: &DVector<f64>, cov: &DMatrix<f64>, mc: &RejectionMoments) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..mean.len() {
        worst = worst.max((mean[j] - mc.mean[j]).abs() / mc.mean_se[j]);
        worst = worst.max((cov[(j, j)] - mc.cov[(j, j)]).abs() / mc.var_se[j]);
    }
    worst
}

/// Deviation of the analytic mean and variance of the batch mean from the
/// Monte-Carlo estimate, in standard errors.
pub fn batch_mean_mc_z(mean: &DVector<f64>, cov: &DMatrix<f64>, mc: &RejectionMoments) -> f64 {
    let p = mean.len() as f64;
    let [m, v, m_se, v_se] = mc.s;
    ((mean.mean() - m).abs() / m_se).max((cov.sum() / (p * p) - v).abs() / v_se)
}
