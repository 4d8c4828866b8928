//! Relative mean squared errors of the non-ignorable analyses against MAR.
//! Usage: table2 [replicates] [Q] (defaults 200, 40).

use mixemm::simulation::{run_table2, Scenario, Table2Methods};
use mixemm::FitConfig;

fn main() -> mixemm::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let reps = args.next().unwrap_or(200);
    let q = args.next().unwrap_or(40);
    let sc = Scenario {
        n_replicates: reps,
        ..Scenario::estimation(q)
    };
    let config = FitConfig {
        monitor_likelihood: false,
        ..FitConfig::default()
    };
    let table = run_table2(&sc, Table2Methods::default(), &config)?;
    println!("{}", table.summary());
    Ok(())
}
