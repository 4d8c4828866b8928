//! Rejection rates of the three methods under the null and at a = 0.7.
//! Usage: table1 [replicates] [permutations] (defaults 100, 199).

use mixemm::simulation::{run_table1, Scenario};
use mixemm::FitConfig;

fn main() -> mixemm::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let reps = args.next().unwrap_or(100);
    let perms = args.next().unwrap_or(199);
    let scenarios: Vec<Scenario> = [
        Scenario::large_variance(40, 0.0),
        Scenario::small_variance(40, 0.0),
        Scenario::large_variance(40, 0.7),
        Scenario::small_variance(40, 0.7),
    ]
    .into_iter()
    .map(|sc| Scenario {
        n_replicates: reps,
        permutations: perms,
        ..sc
    })
    .collect();
    let config = FitConfig {
        monitor_likelihood: false,
        ..FitConfig::default()
    };
    let table = run_table1(&scenarios, &config)?;
    println!("{}", table.summary());
    Ok(())
}
