//! Writes a simulated study as input files, analyses it in memory, and
//! prints the equivalent command line. Usage: study_files [dir].

use std::path::PathBuf;

use mixemm::io::{analyze_study, study_from_simulation, write_results, write_study_files, GammaSource, StudyConfig};
use mixemm::simulation::{simulate_study, Scenario};

fn main() -> mixemm::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mixemm-study"), PathBuf::from);
    let sc = Scenario::large_variance(12, 0.7);
    let study = study_from_simulation(&simulate_study(&sc, 50, 2.0, 0)?);
    let files = write_study_files(&study, &dir)?;
    let config = StudyConfig {
        gamma: GammaSource::Fixed { gamma0: 0.0, gamma: 0.1 },
        permutations: 99,
        seed: 5,
        ..StudyConfig::default()
    };
    let results = analyze_study(&study, &config)?;
    let out = dir.join("in-memory");
    write_results(&results, &out)?;
    println!(
        "{} features analysed, {} filtered, {} failed; results in {}",
        results.features.len(),
        results.filtered.len(),
        results.n_failed(),
        out.display()
    );
    println!(
        "same run from the command line:\n  mixemm --abundance {} --batch-map {} --covariates {} \
         --gamma0 0 --gamma 0.1 --permutations 99 --seed 5 --out {}",
        files.abundance.display(),
        files.batch_map.display(),
        files.covariates.display(),
        dir.join("cli").display()
    );
    Ok(())
}
