//! Conditional moments of a fully missing batch under both mechanism forms.

use mixemm::mechanism::{marginal_missing_prob, tilted_moments};
use mixemm::types::{BatchDesign, MissingMechanism, ModelParameters};
use nalgebra::{DMatrix, DVector};

fn row(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:>8.4}")).collect::<Vec<_>>().join(" ")
}

fn main() -> mixemm::Result<()> {
    let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    let design = BatchDesign::random_intercept(x, Some(0))?;
    let params = ModelParameters::random_intercept(&[10.0, -1.0, 1.0], 2.0, 4.0, 3.0)?;
    println!("unconditional mean  {}", row(&params.fixed_mean(&design)));
    println!("unconditional var   {}", row(&params.marginal_covariance(&design).diagonal()));
    for mech in [MissingMechanism::exponential(0.0, 0.1)?, MissingMechanism::logit(0.5, -0.3)?] {
        let m = tilted_moments(&params, &design, &mech, 0)?;
        println!("\n{:?}: γ₀ = {}, γ = {}", mech.form(), mech.gamma0(), mech.gamma());
        println!("  Pr(batch missing) {:.6}", marginal_missing_prob(&params, &design, &mech, None)?);
        println!("  conditional mean  {}", row(&m.mean));
        println!("  conditional var   {}", row(&m.cov.diagonal()));
        println!("  conditional cov(1, 2) = {:.4}", m.cov[(0, 1)]);
    }
    Ok(())
}
