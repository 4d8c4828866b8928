//! Distribution of the available-case mechanism estimates over repeated
//! 1000-feature studies. Usage: table3 [repetitions] (default 20).

use mixemm::simulation::{run_table3, Scenario};

fn main() -> mixemm::Result<()> {
    let reps = std::env::args().nth(1).map_or(20, |a| a.parse().expect("integer argument"));
    let sc = Scenario {
        n_replicates: reps,
        ..Scenario::mechanism_estimation(40)
    };
    println!("{}", run_table3(&sc, 1000)?.summary());
    Ok(())
}
