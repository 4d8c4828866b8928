mod common;

use approx::assert_relative_eq;
use common::*;
use mixemm::ecm::{ecm_step, gaussian_loglik, observed_data_loglik, observed_information};
use mixemm::mechanism::tilted_moments;
use mixemm::quadrature::{logistic_tilt_at_level, relative_change};
use mixemm::{
    fit, BatchDesign, FeatureBatchData, FitConfig, InitPolicy, MechanismForm, MissingMechanism,
    ModelParameters,
};
use nalgebra::{DMatrix, DVector};

fn tight() -> FitConfig {
    FitConfig {
        max_iter: 20_000,
        tol: 1e-12,
        ..FitConfig::default()
    }
}

fn assert_params_close(a: &ModelParameters, b: &ModelParameters, tol: f64) {
    let scale = |x: f64| x.abs().max(1.0);
    for (x, y) in a.alpha.iter().zip(b.alpha.iter()) {
        assert!((x - y).abs() <= tol * scale(*x), "alpha {x} vs {y}");
    }
    assert!((a.sigma0_sq - b.sigma0_sq).abs() <= tol * scale(a.sigma0_sq), "{} vs {}", a.sigma0_sq, b.sigma0_sq);
    assert!((a.sigma_sq - b.sigma_sq).abs() <= tol * scale(a.sigma_sq), "{} vs {}", a.sigma_sq, b.sigma_sq);
    for (x, y) in a.d.iter().zip(b.d.iter()) {
        assert!((x - y).abs() <= tol * scale(*x), "D {x} vs {y}");
    }
}

#[test]
fn one_engine_iteration_equals_reference_step() {
    for seed in 0..12 {
        let form = if seed % 2 == 0 { MechanismForm::Exponential } else { MechanismForm::Logit };
        let inst = random_instance(seed, form);
        for mech in [inst.mech.clone(), MissingMechanism::ignorable()] {
            let start = inst.truth.clone();
            let reference = ecm_step(&inst.data, &inst.designs, &mech, &start).unwrap();
            let config = FitConfig {
                max_iter: 1,
                init: InitPolicy::Given(start),
                ..FitConfig::default()
            };
            let engine = fit(&inst.data, &inst.designs, &mech, &config).unwrap();
            assert_params_close(&engine.params, &reference, 1e-9);
        }
    }
}

fn complete_data(seed: u64) -> (FeatureBatchData, Vec<BatchDesign>) {
    let mut r = rng(seed);
    let designs = random_designs(&mut r, 30, false);
    let truth = random_params(&mut r, 1);
    let data = draw_data(&mut r, &truth, &designs, None, 0.0);
    (data, designs)
}

#[test]
fn complete_data_fit_is_the_gls_solution_at_the_ml_variances() {
    for seed in 0..6 {
        let (data, designs) = complete_data(100 + seed);
        let f = fit(&data, &designs, &MissingMechanism::ignorable(), &tight()).unwrap();
        assert!(f.converged, "seed {seed}: {} iterations", f.n_iter);
        assert!(f.params.sigma0_sq > 0.05 && f.params.d[(0, 0)] > 0.05, "boundary fit");
        let alpha = gls_oracle(&f.params, &designs, &data);
        for (a, b) in f.params.alpha.iter().zip(alpha.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // the variance components are a stationary point of the Gaussian likelihood
        let ll = gaussian_loglik(&f.params, &designs, &data).unwrap();
        let h = 1e-5;
        let bump = |which: usize, delta: f64| {
            let mut p = f.params.clone();
            match which {
                0 => p.sigma0_sq += delta,
                1 => p.sigma_sq += delta,
                _ => p.d[(0, 0)] += delta,
            }
            gaussian_loglik(&p, &designs, &data).unwrap()
        };
        for which in 0..3 {
            let grad = (bump(which, h) - bump(which, -h)) / (2.0 * h);
            assert!(grad.abs() < 1e-4, "gradient {grad} in component {which}");
            assert!(bump(which, 1e-3) <= ll && bump(which, -1e-3) <= ll);
        }
    }
}

#[test]
fn ignorable_mechanism_equals_gamma_zero() {
    let inst = random_instance(7, MechanismForm::Exponential);
    let a = fit(&inst.data, &inst.designs, &MissingMechanism::ignorable(), &tight()).unwrap();
    let b = fit(&inst.data, &inst.designs, &MissingMechanism::exponential(0.3, 0.0).unwrap(), &tight()).unwrap();
    assert_params_close(&a.params, &b.params, 1e-12);
}

#[test]
fn exponential_intercept_does_not_change_the_estimates() {
    for seed in 0..9 {
        let inst = random_instance(200 + seed, MechanismForm::Exponential);
        let g = inst.mech.gamma();
        let base = fit(&inst.data, &inst.designs, &inst.mech, &tight()).unwrap();
        for g0 in [-0.7, 0.4, 2.0] {
            let mech = MissingMechanism::exponential_unchecked_intercept(g0, g).unwrap();
            let other = fit(&inst.data, &inst.designs, &mech, &tight()).unwrap();
            assert_eq!(other.n_iter, base.n_iter);
            assert_params_close(&other.params, &base.params, 1e-10);
        }
    }
}

#[test]
fn alpha_covariance_inverts_the_observed_information() {
    for seed in 0..6 {
        let inst = random_instance(300 + seed, MechanismForm::Logit);
        let f = fit(&inst.data, &inst.designs, &inst.mech, &FitConfig::default()).unwrap();
        let info = observed_information(&f.params, &inst.designs, &inst.data).unwrap();
        let product = &f.alpha_cov * info;
        let k = product.nrows();
        assert!((product - DMatrix::identity(k, k)).amax() < 1e-8);
        assert_relative_eq!(f.alpha_cov.clone(), f.alpha_cov.transpose(), epsilon = 1e-14);
    }
}

#[test]
fn sporadic_missing_row_equals_dropping_the_row() {
    let inst = random_instance(400, MechanismForm::Exponential);
    let mut batches: Vec<Vec<Option<f64>>> = inst.data.batches().to_vec();
    let target = inst.data.observed_batches()[0];
    batches[target][1] = None;
    let with_gap = FeatureBatchData::new(batches.clone()).unwrap();

    let mut designs = inst.designs.clone();
    let keep: Vec<usize> = (0..designs[target].size()).filter(|&j| j != 1).collect();
    designs[target] = designs[target].select_rows(&keep).unwrap();
    batches[target].remove(1);
    let dropped = FeatureBatchData::new(batches).unwrap();

    let a = fit(&with_gap, &inst.designs, &inst.mech, &tight()).unwrap();
    let b = fit(&dropped, &designs, &inst.mech, &tight()).unwrap();
    assert_params_close(&a.params, &b.params, 1e-10);
    let la = observed_data_loglik(&a.params, &inst.designs, &with_gap, &inst.mech).unwrap();
    let lb = observed_data_loglik(&b.params, &designs, &dropped, &inst.mech).unwrap();
    assert_relative_eq!(la, lb, max_relative = 1e-12);
}

#[test]
fn tilted_moments_match_rejection_sampling() {
    let mut r = rng(500);
    for (k, form) in [MechanismForm::Exponential, MechanismForm::Logit, MechanismForm::Logit].into_iter().enumerate() {
        let inst = random_instance(500 + k as u64, form);
        let design = &inst.designs[0];
        let m = tilted_moments(&inst.truth, design, &inst.mech, 0).unwrap();
        let mc = rejection_moments(&mut r, &inst.truth, design, &inst.mech, 20_000);
        let z = max_mc_z(&m.mean, &m.cov, &mc);
        assert!(z < 4.0, "{form:?}: {z} Monte-Carlo standard errors");
    }
}

#[test]
fn logistic_quadrature_converges_under_node_doubling() {
    for eta0 in [-6.0, -1.0, 0.0, 2.5, 8.0] {
        for eta1 in [-4.0, -0.5, 0.3, 3.0] {
            let coarse = logistic_tilt_at_level(eta0, eta1, 5);
            let fine = logistic_tilt_at_level(eta0, eta1, 6);
            assert!(relative_change(&coarse, &fine) < 1e-8, "{eta0}, {eta1}");
        }
    }
}

#[test]
fn likelihood_never_decreases() {
    for seed in 0..12 {
        let form = if seed % 2 == 0 { MechanismForm::Exponential } else { MechanismForm::Logit };
        let inst = random_instance(600 + seed, form);
        let f = fit(&inst.data, &inst.designs, &inst.mech, &FitConfig::default()).unwrap();
        assert_eq!(f.clamp_warnings, 0);
        for w in f.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} then {}", w[0], w[1]);
        }
    }
}

#[test]
fn trace_ends_at_the_observed_data_likelihood() {
    let inst = random_instance(700, MechanismForm::Logit);
    let f = fit(&inst.data, &inst.designs, &inst.mech, &FitConfig::default()).unwrap();
    let ll = observed_data_loglik(&f.params, &inst.designs, &inst.data, &inst.mech).unwrap();
    let last = *f.loglik_trace.last().unwrap();
    // the trace omits the parameter-free mechanism term of observed batches
    let mut offset = 0.0;
    for i in inst.data.observed_batches() {
        let (_, v) = inst.data.observed_rows(i);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        offset += (-miss_probability(&inst.mech, s)).ln_1p();
    }
    assert_relative_eq!(last + offset, ll, max_relative = 1e-10);
    assert_eq!(f.loglik(), Some(last));
}

#[test]
fn truth_recovered_on_a_large_complete_study() {
    let mut r = rng(800);
    let designs = random_designs(&mut r, 400, false);
    let truth = ModelParameters::new(DVector::from_vec(vec![10.0, -1.0, 1.0]), 2.0, 4.0, DMatrix::from_element(1, 1, 3.0)).unwrap();
    let data = draw_data(&mut r, &truth, &designs, None, 0.0);
    let f = fit(&data, &designs, &MissingMechanism::ignorable(), &FitConfig::default()).unwrap();
    let se = f.standard_errors();
    for k in 0..3 {
        assert!((f.params.alpha[k] - truth.alpha[k]).abs() < 4.0 * se[k]);
    }
    assert!((f.params.sigma_sq - 4.0).abs() < 0.5);
    assert!((f.params.d[(0, 0)] - 3.0).abs() < 0.8);
}
