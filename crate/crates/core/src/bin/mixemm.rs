use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, ValueEnum};
use mixemm::io::{run_study, GammaSource, StudyConfig, StudyInput};
use mixemm::{FitConfig, MechanismForm};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mechanism {
    Exp,
    Logit,
}

/// Per-feature mixed-effects fits with batch-level abundance-dependent
/// missingness.
#[derive(Debug, Parser)]
#[command(name = "mixemm", version)]
#[command(group(ArgGroup::new("source").required(true).args(["gamma", "estimate_gamma", "profile_gamma"])))]
struct Cli {
    /// Abundance matrix (features × samples, tab-separated).
    #[arg(long)]
    abundance: PathBuf,
    /// Batch map: sample_id, batch_id, channel, is_reference.
    #[arg(long)]
    batch_map: PathBuf,
    /// Sample covariates keyed by sample_id; their coefficients are tested.
    #[arg(long)]
    covariates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exp")]
    mechanism: Mechanism,
    /// Mechanism intercept, used with --gamma.
    #[arg(long, requires = "gamma", allow_negative_numbers = true, default_value_t = 0.0)]
    gamma0: f64,
    /// Fixed mechanism slope.
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Estimate the mechanism from available-case summaries of all features.
    #[arg(long)]
    estimate_gamma: bool,
    /// Profile the slope over the grid "from:to:step".
    #[arg(long, allow_negative_numbers = true)]
    profile_gamma: Option<String>,
    /// Permutations per feature; 0 skips the permutation test
    #[arg(long, default_value_t = 999)]
    permutations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Keep features whose reference channel is observed in at least this
    /// fraction of batches.
    #[arg(long, default_value_t = 0.7)]
    min_ref_obs_frac: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let gamma = match (&cli.profile_gamma, cli.gamma, cli.estimate_gamma) {
        (Some(spec), _, _) => match GammaSource::parse_profile(spec) {
            Ok(g) => g,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        (None, Some(gamma), _) => GammaSource::Fixed {
            gamma0: cli.gamma0,
            gamma,
        },
        _ => GammaSource::Estimated,
    };
    let input = StudyInput {
        abundance: cli.abundance,
        batch_map: cli.batch_map,
        covariates: cli.covariates,
        out: cli.out,
        config: StudyConfig {
            mechanism: match cli.mechanism {
                Mechanism::Exp => MechanismForm::Exponential,
                Mechanism::Logit => MechanismForm::Logit,
            },
            gamma,
            fit: FitConfig {
                max_iter: cli.max_iter,
                tol: cli.tol,
                monitor_likelihood: false,
                ..FitConfig::default()
            },
            permutations: cli.permutations,
            seed: cli.seed,
            threads: cli.threads,
            min_ref_obs_frac: cli.min_ref_obs_frac,
        },
    };
    match run_study(&input) {
        Ok(r) => {
            eprintln!(
                "analysed {} features ({} filtered, {} failed); results in {}",
                r.features.len(),
                r.filtered.len(),
                r.n_failed(),
                input.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
