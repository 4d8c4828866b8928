use std::fs;
use std::path::Path;
use std::process::Command;

use mixemm::io::{
    analyze_study, ingest, results_tsv, study_from_simulation, write_results, write_study_files, GammaSource,
    StudyConfig, StudyData,
};
use mixemm::simulation::{simulate_study, Scenario};
use mixemm::{fit, MissingMechanism};

fn study(n: usize) -> StudyData {
    let sc = Scenario::large_variance(12, 0.7);
    study_from_simulation(&simulate_study(&sc, n, 1.0, 3).unwrap())
}

fn config() -> StudyConfig {
    StudyConfig {
        gamma: GammaSource::Estimated,
        permutations: 49,
        seed: 17,
        min_ref_obs_frac: 0.5,
        ..StudyConfig::default()
    }
}

fn run_cli(dir: &Path, out: &str, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mixemm"))
        .args(["--abundance", dir.join("abundance.tsv").to_str().unwrap()])
        .args(["--batch-map", dir.join("batch_map.tsv").to_str().unwrap()])
        .args(["--covariates", dir.join("covariates.tsv").to_str().unwrap()])
        .args(["--out", dir.join(out).to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read_to_string(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn cli_reproduces_the_in_memory_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let study = study(30);
    write_study_files(&study, dir.path()).unwrap();
    let results = analyze_study(&study, &config()).unwrap();
    write_results(&results, &dir.path().join("memory")).unwrap();
    assert!(results.features.len() >= 20);

    let args = ["--estimate-gamma", "--permutations", "49", "--seed", "17", "--min-ref-obs-frac", "0.5"];
    let out = run_cli(dir.path(), "cli", &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_dir_sorted(&dir.path().join("cli")), read_dir_sorted(&dir.path().join("memory")));

    let again = run_cli(dir.path(), "cli2", &args);
    assert!(again.status.success());
    assert_eq!(read_dir_sorted(&dir.path().join("cli")), read_dir_sorted(&dir.path().join("cli2")));
}

#[test]
fn results_do_not_depend_on_feature_order_or_thread_count() {
    let forward = study(16);
    let mut reversed = forward.clone();
    reversed.feature_ids.reverse();
    reversed.features.reverse();
    let a = analyze_study(&forward, &config()).unwrap();
    let b = analyze_study(&reversed, &StudyConfig { threads: 3, ..config() }).unwrap();
    assert_eq!(a.mechanism, b.mechanism);
    let rows = |tsv: String| {
        let mut lines: Vec<String> = tsv.lines().skip(1).map(str::to_string).collect();
        lines.sort();
        lines
    };
    assert_eq!(rows(results_tsv(&a)), rows(results_tsv(&b)));
}

#[test]
fn complete_data_at_gamma_zero_are_standard_mixed_model_fits() {
    let sc = Scenario {
        gamma0: 50.0,
        sporadic_rate: 0.0,
        ..Scenario::large_variance(10, 0.5)
    };
    let study = study_from_simulation(&simulate_study(&sc, 6, 1.0, 0).unwrap());
    assert!(study.features.iter().all(|f| f.n_observed_batches() == 10));
    let config = StudyConfig {
        gamma: GammaSource::Fixed { gamma0: 0.0, gamma: 0.0 },
        permutations: 0,
        ..StudyConfig::default()
    };
    let results = analyze_study(&study, &config).unwrap();
    for (f, data) in results.features.iter().zip(&study.features) {
        let direct = fit(data, &study.designs, &MissingMechanism::ignorable(), &config.fit).unwrap();
        assert_eq!(f.result.as_ref().unwrap().fit.params, direct.params);
    }
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let study = study(3);
    write_study_files(&study, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("abundance.tsv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut cells: Vec<&str> = lines[2].split('\t').collect();
    cells[3] = "oops";
    lines[2] = cells.join("\t");
    fs::write(dir.path().join("abundance.tsv"), lines.join("\n")).unwrap();

    let out = run_cli(dir.path(), "o", &["--gamma", "0.1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(":3:4:"), "{err}");

    let out = run_cli(dir.path(), "o", &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_cli(dir.path(), "o", &["--estimate-gamma", "--profile-gamma", "0:0.2:0.1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run_cli(dir.path(), "o", &["--gamma", "0.1", "--threads", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profiled_run_writes_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    write_study_files(&study(20), dir.path()).unwrap();
    let out = run_cli(dir.path(), "p", &["--profile-gamma", "0:0.2:0.1", "--permutations", "0", "--min-ref-obs-frac", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let profile = fs::read_to_string(dir.path().join("p/profile.tsv")).unwrap();
    assert_eq!(profile.lines().count(), 4);
    let back = ingest(
        &dir.path().join("abundance.tsv"),
        &dir.path().join("batch_map.tsv"),
        Some(&dir.path().join("covariates.tsv")),
    )
    .unwrap();
    assert_eq!(back.features.len(), 20);
    let results = fs::read_to_string(dir.path().join("p/results.tsv")).unwrap();
    assert!(results.lines().next().unwrap().contains("z_group\tp_group"));
    assert!(results.lines().nth(1).unwrap().contains("\tNA\t"));
}
