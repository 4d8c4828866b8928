//! Fits one simulated feature under the exponential mechanism and under MAR.

use mixemm::simulation::{generate_replicate, Scenario};
use mixemm::{fit, FitConfig, MissingMechanism};

fn main() -> mixemm::Result<()> {
    let sc = Scenario::estimation(40);
    let rep = generate_replicate(&sc, 7)?;
    println!(
        "Q = {}, observed batches = {}, truth α = {:?}",
        sc.q,
        rep.data.n_observed_batches(),
        sc.alpha()
    );
    for (name, mech) in [("exponential", rep.mechanism.clone()), ("MAR", MissingMechanism::ignorable())] {
        let f = fit(&rep.data, &rep.designs, &mech, &FitConfig::default())?;
        let se = f.standard_errors();
        println!("\n{name}: {} iterations, converged = {}", f.n_iter, f.converged);
        for (k, label) in ["intercept", "reference", "group"].iter().enumerate() {
            println!("  {label:<10} {:>9.4} (se {:.4})", f.params.alpha[k], se[k]);
        }
        println!(
            "  σ₀² = {:.4}, σ² = {:.4}, D = {:.4}, log-likelihood = {:.4}",
            f.params.sigma0_sq,
            f.params.sigma_sq,
            f.params.d[(0, 0)],
            f.loglik().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
