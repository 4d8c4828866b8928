//! Estimates the mechanism from a simulated 1000-feature study, prints the
//! binned diagnostic, and profiles the slope on one feature.

use mixemm::ecm::profile_exponential_slope;
use mixemm::mechanism::{badmm_diagnostic, estimate_gamma, estimate_gamma_logit, MechanismFitInput};
use mixemm::simulation::{simulate_study, Scenario};
use mixemm::FitConfig;

fn main() -> mixemm::Result<()> {
    let sc = Scenario::mechanism_estimation(40);
    let study = simulate_study(&sc, 1000, 2.0, 0)?;
    let inputs: Vec<_> = study.features.iter().map(MechanismFitInput::from_feature).collect();
    let exp = estimate_gamma(&inputs)?;
    let logit = estimate_gamma_logit(&inputs)?;
    println!("truth: γ₀ = {}, γ = {}", sc.gamma0, sc.gamma);
    println!(
        "exponential: γ₀ = {:.4}, γ = {:.4} ({} used, {} excluded)",
        exp.gamma0, exp.gamma, exp.n_used, exp.n_excluded
    );
    println!("logit:       γ₀ = {:.4}, γ = {:.4}", logit.gamma0, logit.gamma);

    let diag = badmm_diagnostic(&inputs, Some(&exp));
    println!("\nmissing fraction  median t  features");
    for b in &diag.bins {
        println!("{:>16.3} {:>9.3} {:>9}", b.pi, b.median_t, b.n_features);
    }

    let grid: Vec<f64> = (0..=8).map(|k| 0.05 * k as f64).collect();
    let feature = study
        .features
        .iter()
        .find(|f| f.n_observed_batches() < f.n_batches())
        .expect("some feature has a missing batch");
    let profile = profile_exponential_slope(feature, &study.designs, &grid, &FitConfig::default())?;
    println!("\nprofile of one feature:");
    for p in &profile.points {
        println!(
            "  γ = {:.2}, γ₀ = {:>8.4}, loglik = {}",
            p.mechanism.gamma(),
            p.mechanism.gamma0(),
            match &p.outcome { Ok((l, _)) => format!("{l:.4}"), Err(e) => format!("failed: {e}") }
        );
    }
    Ok(())
}
