//! Study files, whole-dataset analysis and result tables.
//!
//! Input files are tab-separated with a header row:
//!
//! * abundance: first column feature id, then one column per sample id;
//!   `NA`, `NaN` or an empty cell is a missing value;
//! * batch map: `sample_id`, `batch_id`, `channel`, `is_reference`;
//! * covariates (optional): `sample_id` followed by numeric columns.
//!
//! Batches appear in order of first mention in the batch map and rows within
//! a batch are ordered by channel. The fixed-effect design is an intercept, a
//! reference-channel indicator (when any batch has a reference) and the
//! covariate columns; the covariate coefficients are the tested ones.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::ecm::{fit, observed_data_loglik, optimal_exponential_intercept, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::inference::{permutation_test, wald_statistics, TestResult};
use crate::mechanism::{
    badmm_diagnostic, estimate_gamma, estimate_gamma_logit, Diagnostic, GammaEstimate,
    MechanismFitInput,
};
use crate::simulation::SimulatedStudy;
use crate::types::{BatchDesign, FeatureBatchData, MechanismForm, MissingMechanism};

/// Where the mechanism coefficients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaSource {
    Fixed { gamma0: f64, gamma: f64 },
    /// Available-case estimate pooled over the retained features.
    Estimated,
    /// Grid over the slope γ; γ₀ is maximized (exponential form) or set to
    /// its available-case value at that slope (logit form).
    Profiled { from: f64, to: f64, step: f64 },
}

impl GammaSource {
    /// Parses a `from:to:step` profile grid.
    pub fn parse_profile(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        let bad = || Error::Input(format!("profile grid must be from:to:step, got {spec:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let source = GammaSource::Profiled {
            from: v[0],
            to: v[1],
            step: v[2],
        };
        source.grid()?;
        Ok(source)
    }

    /// Slopes of a profile grid.
    pub fn grid(&self) -> Result<Vec<f64>> {
        let GammaSource::Profiled { from, to, step } = *self else {
            return Ok(Vec::new());
        };
        if !(from.is_finite() && to.is_finite() && step > 0.0 && to >= from) {
            return Err(Error::Input(format!(
                "profile grid needs from <= to and step > 0 (got {from}:{to}:{step})"
            )));
        }
        let n = ((to - from) / step + 1e-9).floor() as usize + 1;
        if n > 10_000 {
            return Err(Error::Input(format!("profile grid has {n} points (limit 10000)")));
        }
        Ok((0..n).map(|i| from + i as f64 * step).collect())
    }

    fn label(&self) -> &'static str {
        match self {
            GammaSource::Fixed { .. } => "fixed",
            GammaSource::Estimated => "estimated",
            GammaSource::Profiled { .. } => "profiled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub mechanism: MechanismForm,
    pub gamma: GammaSource,
    pub fit: FitConfig,
    /// Permutations per feature; 0 skips the permutation test.
    pub permutations: usize,
    pub seed: u64,
    pub threads: usize,
    /// A feature is kept when its reference channel is observed in at least
    /// `round(frac × batches with a reference)` batches.
    pub min_ref_obs_frac: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            mechanism: MechanismForm::Exponential,
            gamma: GammaSource::Estimated,
            fit: FitConfig {
                monitor_likelihood: false,
                ..FitConfig::default()
            },
            permutations: 999,
            seed: 1,
            threads: 1,
            min_ref_obs_frac: 0.7,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Input("thread count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_ref_obs_frac) {
            return Err(Error::Input("min_ref_obs_frac must be in [0, 1]".into()));
        }
        if let GammaSource::Fixed { gamma0, gamma } = self.gamma {
            fixed_mechanism(self.mechanism, gamma0, gamma)?;
        }
        self.gamma.grid()?;
        self.fit.validate().map_err(|e| Error::Input(e.to_string()))
    }
}

fn fixed_mechanism(form: MechanismForm, gamma0: f64, gamma: f64) -> Result<MissingMechanism> {
    match form {
        MechanismForm::Exponential => MissingMechanism::exponential_unchecked_intercept(gamma0, gamma),
        MechanismForm::Logit => MissingMechanism::logit(gamma0, gamma),
    }
    .map_err(|e| Error::Input(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyInput {
    pub abundance: PathBuf,
    pub batch_map: PathBuf,
    pub covariates: Option<PathBuf>,
    pub out: PathBuf,
    pub config: StudyConfig,
}

/// Features on a shared batch structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub feature_ids: Vec<String>,
    pub features: Vec<FeatureBatchData>,
    pub designs: Vec<BatchDesign>,
    pub batch_ids: Vec<String>,
    /// Sample ids of every batch in row order.
    pub samples: Vec<Vec<String>>,
    /// Channel labels of every batch in row order.
    pub channels: Vec<Vec<String>>,
    pub coefficient_names: Vec<String>,
    /// Indices of the tested coefficients.
    pub tested: Vec<usize>,
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    /// (line number, fields)
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.into(),
        line: 1,
        column: 1,
        message: "empty file".into(),
    })?;
    let header: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (n, line) in lines {
        let fields: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                path: path.into(),
                line: n,
                column: fields.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        rows.push((n, fields));
    }
    Ok(Table {
        path: path.into(),
        header,
        rows,
    })
}

impl Table {
    fn err(&self, line: usize, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            column,
            message: message.into(),
        }
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.err(1, 1, format!("missing column {name:?}")))
    }
}

fn is_missing_cell(s: &str) -> bool {
    s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan")
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "t" | "y" => Some(true),
        "0" | "false" | "no" | "f" | "n" => Some(false),
        _ => None,
    }
}

struct MapRow {
    sample: String,
    channel: String,
    reference: bool,
    line: usize,
}

/// Builds the batch structure and designs from the batch map and covariates.
fn read_batches(
    batch_map: &Path,
    covariates: Option<&Path>,
) -> Result<(Vec<String>, Vec<Vec<MapRow>>, Vec<BatchDesign>, Vec<String>, Vec<usize>)> {
    let map = read_table(batch_map)?;
    let (c_sample, c_batch, c_channel, c_ref) = (
        map.column("sample_id")?,
        map.column("batch_id")?,
        map.column("channel")?,
        map.column("is_reference")?,
    );
    let mut batch_ids: Vec<String> = Vec::new();
    let mut batches: Vec<Vec<MapRow>> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, f) in &map.rows {
        let sample = f[c_sample].clone();
        if sample.is_empty() {
            return Err(map.err(*line, c_sample + 1, "empty sample id"));
        }
        if seen.insert(sample.clone(), *line).is_some() {
            return Err(map.err(*line, c_sample + 1, format!("duplicate sample id {sample:?}")));
        }
        let reference = parse_bool(&f[c_ref]).ok_or_else(|| {
            map.err(*line, c_ref + 1, format!("is_reference must be true/false, got {:?}", f[c_ref]))
        })?;
        let b = match batch_ids.iter().position(|id| *id == f[c_batch]) {
            Some(b) => b,
            None => {
                batch_ids.push(f[c_batch].clone());
                batches.push(Vec::new());
                batch_ids.len() - 1
            }
        };
        if batches[b].iter().any(|r| r.channel == f[c_channel]) {
            return Err(map.err(
                *line,
                c_channel + 1,
                format!("channel {:?} appears twice in batch {:?}", f[c_channel], f[c_batch]),
            ));
        }
        if reference && batches[b].iter().any(|r| r.reference) {
            return Err(map.err(
                *line,
                c_ref + 1,
                format!("batch {:?} has more than one reference channel", f[c_batch]),
            ));
        }
        batches[b].push(MapRow {
            sample,
            channel: f[c_channel].clone(),
            reference,
            line: *line,
        });
    }
    if batches.is_empty() {
        return Err(map.err(1, 1, "no samples in the batch map"));
    }
    for rows in &mut batches {
        if rows.iter().all(|r| r.channel.parse::<i64>().is_ok()) {
            rows.sort_by_key(|r| r.channel.parse::<i64>().unwrap_or(0));
        } else {
            rows.sort_by(|a, b| a.channel.cmp(&b.channel));
        }
    }

    let (cov_names, cov_values) = match covariates {
        None => (Vec::new(), HashMap::new()),
        Some(path) => {
            let cov = read_table(path)?;
            let c_id = cov.column("sample_id")?;
            let names: Vec<String> = cov
                .header
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != c_id)
                .map(|(_, h)| h.clone())
                .collect();
            let mut values: HashMap<String, Vec<f64>> = HashMap::new();
            for (line, f) in &cov.rows {
                let id = &f[c_id];
                if !seen.contains_key(id) {
                    return Err(cov.err(*line, c_id + 1, format!("unknown sample id {id:?}")));
                }
                let mut v = Vec::with_capacity(names.len());
                for (col, cell) in f.iter().enumerate() {
                    if col == c_id {
                        continue;
                    }
                    let x: f64 = cell
                        .parse()
                        .ok()
                        .filter(|x: &f64| x.is_finite())
                        .ok_or_else(|| cov.err(*line, col + 1, format!("non-numeric covariate {cell:?}")))?;
                    v.push(x);
                }
                if values.insert(id.clone(), v).is_some() {
                    return Err(cov.err(*line, c_id + 1, format!("duplicate sample id {id:?}")));
                }
            }
            (names, values)
        }
    };

    let any_reference = batches.iter().flatten().any(|r| r.reference);
    let mut names = vec!["intercept".to_string()];
    if any_reference {
        names.push("reference".into());
    }
    let first_cov = names.len();
    names.extend(cov_names.iter().cloned());
    let tested: Vec<usize> = (first_cov..names.len()).collect();
    let k = names.len();

    let mut designs = Vec::with_capacity(batches.len());
    for (b, rows) in batches.iter().enumerate() {
        let mut x = DMatrix::zeros(rows.len(), k);
        for (j, r) in rows.iter().enumerate() {
            x[(j, 0)] = 1.0;
            if any_reference && r.reference {
                x[(j, 1)] = 1.0;
            }
            if !cov_names.is_empty() {
                let v = cov_values.get(&r.sample).ok_or_else(|| Error::Parse {
                    path: covariates.expect("covariates present").into(),
                    line: 0,
                    column: 0,
                    message: format!("no covariates for sample {:?} (batch map line {})", r.sample, r.line),
                })?;
                for (c, value) in v.iter().enumerate() {
                    x[(j, first_cov + c)] = *value;
                }
            }
        }
        let reference = rows.iter().position(|r| r.reference);
        let design = BatchDesign::random_intercept(x, reference)
            .map_err(|e| Error::InvalidDesign(format!("batch {:?}: {e}", batch_ids[b])))?;
        designs.push(design);
    }
    Ok((batch_ids, batches, designs, names, tested))
}

/// Reads the three study files.
pub fn ingest(abundance: &Path, batch_map: &Path, covariates: Option<&Path>) -> Result<StudyData> {
    let (batch_ids, batches, designs, coefficient_names, tested) = read_batches(batch_map, covariates)?;
    let table = read_table(abundance)?;
    let mut position: HashMap<&str, (usize, usize)> = HashMap::new();
    for (b, rows) in batches.iter().enumerate() {
        for (j, r) in rows.iter().enumerate() {
            position.insert(r.sample.as_str(), (b, j));
        }
    }
    let mut columns: Vec<(usize, usize)> = Vec::with_capacity(table.header.len() - 1);
    let mut covered = vec![false; position.len()];
    let flat_index = |b: usize, j: usize| batches[..b].iter().map(Vec::len).sum::<usize>() + j;
    for (col, name) in table.header.iter().enumerate().skip(1) {
        let &(b, j) = position
            .get(name.as_str())
            .ok_or_else(|| table.err(1, col + 1, format!("sample {name:?} is not in the batch map")))?;
        let idx = flat_index(b, j);
        if covered[idx] {
            return Err(table.err(1, col + 1, format!("sample {name:?} appears twice")));
        }
        covered[idx] = true;
        columns.push((b, j));
    }
    if let Some(r) = batches.iter().flatten().zip(&covered).find(|(_, c)| !**c).map(|(r, _)| r) {
        return Err(Error::Input(format!(
            "sample {:?} of the batch map has no abundance column",
            r.sample
        )));
    }
    let mut feature_ids = Vec::with_capacity(table.rows.len());
    let mut features = Vec::with_capacity(table.rows.len());
    let mut ids_seen: HashMap<String, usize> = HashMap::new();
    for (line, f) in &table.rows {
        let id = f[0].clone();
        if id.is_empty() {
            return Err(table.err(*line, 1, "empty feature id"));
        }
        if let Some(prev) = ids_seen.insert(id.clone(), *line) {
            return Err(table.err(*line, 1, format!("feature {id:?} already defined on line {prev}")));
        }
        let mut values: Vec<Vec<Option<f64>>> = batches.iter().map(|r| vec![None; r.len()]).collect();
        for (c, cell) in f.iter().enumerate().skip(1) {
            if is_missing_cell(cell) {
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| table.err(*line, c + 1, format!("non-numeric abundance {cell:?}")))?;
            let (b, j) = columns[c - 1];
            values[b][j] = Some(v);
        }
        feature_ids.push(id);
        features.push(FeatureBatchData::new(values)?);
    }
    Ok(StudyData {
        feature_ids,
        features,
        designs,
        batch_ids,
        samples: batches.iter().map(|r| r.iter().map(|m| m.sample.clone()).collect()).collect(),
        channels: batches.iter().map(|r| r.iter().map(|m| m.channel.clone()).collect()).collect(),
        coefficient_names,
        tested,
    })
}

/// Number of batches whose reference channel is observed, and the number
/// of batches with a reference channel.
pub fn reference_observations(data: &FeatureBatchData, designs: &[BatchDesign]) -> (usize, usize) {
    let mut observed = 0;
    let mut total = 0;
    for (i, d) in designs.iter().enumerate() {
        if let Some(r) = d.reference() {
            total += 1;
            observed += data.batch(i)[r].is_some() as usize;
        }
    }
    (observed, total)
}

/// Whether a feature passes the reference-observation filter.
pub fn passes_reference_filter(data: &FeatureBatchData, designs: &[BatchDesign], frac: f64) -> bool {
    let (observed, total) = reference_observations(data, designs);
    total == 0 || observed as f64 >= (frac * total as f64).round()
}

/// Feature seed for the permutation test, independent of feature order.
pub fn feature_seed(master: u64, feature_id: &str) -> u64 {
    // FNV-1a of the id, mixed with the master seed by a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in feature_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAnalysis {
    pub fit: FitResult,
    /// Wald z of the tested coefficients.
    pub wald_z: Vec<f64>,
    pub test: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureOutcome {
    pub feature_id: String,
    pub q_obs: usize,
    pub missing_fraction: f64,
    pub result: std::result::Result<FeatureAnalysis, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub gamma0: f64,
    pub gamma: f64,
    /// Summed observed-data log-likelihood; NaN when some feature failed.
    pub loglik: f64,
    pub n_failed: usize,
}

#[derive(Debug, Clone)]
pub struct StudyResults {
    pub mechanism: MissingMechanism,
    pub gamma_source: GammaSource,
    pub gamma_estimate: Option<GammaEstimate>,
    pub profile: Vec<ProfileRow>,
    pub coefficient_names: Vec<String>,
    pub tested: Vec<usize>,
    pub n_input: usize,
    /// Features removed by the reference filter: (id, observed, batches with reference).
    pub filtered: Vec<(String, usize, usize)>,
    pub features: Vec<FeatureOutcome>,
    pub diagnostic: Diagnostic,
    pub permutations: usize,
    pub seed: u64,
}

impl StudyResults {
    pub fn n_failed(&self) -> usize {
        self.features.iter().filter(|f| f.result.is_err()).count()
    }

    /// 0.05 divided by the number of analysed features.
    pub fn bonferroni_threshold(&self) -> f64 {
        0.05 / self.features.len().max(1) as f64
    }
}

fn sorted_inputs(features: &[&FeatureBatchData]) -> Vec<MechanismFitInput> {
    let mut inputs: Vec<MechanismFitInput> =
        features.iter().map(|f| MechanismFitInput::from_feature(f)).collect();
    inputs.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.pi.total_cmp(&b.pi)));
    inputs
}

fn profile_study(
    features: &[&FeatureBatchData],
    designs: &[BatchDesign],
    form: MechanismForm,
    grid: &[f64],
    fit_config: &FitConfig,
) -> Result<(MissingMechanism, Vec<ProfileRow>)> {
    let inputs = sorted_inputs(features);
    let usable: Vec<&MechanismFitInput> = inputs.iter().filter(|i| i.is_usable()).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let gamma0 = match form {
            MechanismForm::Exponential => optimal_exponential_intercept(features, gamma)?,
            MechanismForm::Logit => {
                if usable.is_empty() {
                    return Err(Error::MechanismEstimation(
                        "no feature with a missing fraction strictly between 0 and 1".into(),
                    ));
                }
                usable
                    .iter()
                    .map(|i| (i.pi / (1.0 - i.pi)).ln() - gamma * i.t)
                    .sum::<f64>()
                    / usable.len() as f64
            }
        };
        let mech = fixed_mechanism(form, gamma0, gamma)?;
        let lls: Vec<Option<f64>> = features
            .par_iter()
            .map(|data| {
                let f = fit(data, designs, &mech, fit_config).ok()?;
                observed_data_loglik(&f.params, designs, data, &mech).ok()
            })
            .collect();
        let n_failed = lls.iter().filter(|l| l.is_none()).count();
        let loglik = if n_failed == 0 {
            lls.iter().flatten().sum()
        } else {
            f64::NAN
        };
        rows.push(ProfileRow {
            gamma0,
            gamma,
            loglik,
            n_failed,
        });
    }
    let best = rows
        .iter()
        .filter(|r| r.loglik.is_finite())
        .max_by(|a, b| a.loglik.total_cmp(&b.loglik))
        .ok_or_else(|| Error::MechanismEstimation("every profile grid point failed".into()))?;
    Ok((fixed_mechanism(form, best.gamma0, best.gamma)?, rows))
}

fn analyze_feature(
    id: &str,
    data: &FeatureBatchData,
    study: &StudyData,
    mech: &MissingMechanism,
    config: &StudyConfig,
) -> std::result::Result<FeatureAnalysis, String> {
    let run = || -> Result<FeatureAnalysis> {
        if config.permutations > 0 && !study.tested.is_empty() {
            let (fit, test) = permutation_test(
                data,
                &study.designs,
                mech,
                &config.fit,
                &study.tested,
                config.permutations,
                feature_seed(config.seed, id),
            )?;
            let wald_z = test.coefficients.iter().map(|c| c.wald_z).collect();
            Ok(FeatureAnalysis {
                fit,
                wald_z,
                test: Some(test),
            })
        } else {
            let fit = fit(data, &study.designs, mech, &config.fit)?;
            let wald_z = wald_statistics(&fit, &study.tested)?;
            Ok(FeatureAnalysis {
                fit,
                wald_z,
                test: None,
            })
        }
    };
    run().map_err(|e| e.to_string())
}

/// Filters, determines Γ and fits every retained feature.
pub fn analyze_study(study: &StudyData, config: &StudyConfig) -> Result<StudyResults> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Input(format!("cannot start {} worker threads: {e}", config.threads)))?;
    pool.install(|| analyze_in_pool(study, config))
}

fn analyze_in_pool(study: &StudyData, config: &StudyConfig) -> Result<StudyResults> {
    let mut kept = Vec::new();
    let mut filtered = Vec::new();
    for (i, data) in study.features.iter().enumerate() {
        if passes_reference_filter(data, &study.designs, config.min_ref_obs_frac) {
            kept.push(i);
        } else {
            let (o, t) = reference_observations(data, &study.designs);
            filtered.push((study.feature_ids[i].clone(), o, t));
        }
    }
    let kept_data: Vec<&FeatureBatchData> = kept.iter().map(|&i| &study.features[i]).collect();
    let inputs = sorted_inputs(&kept_data);

    let (mechanism, gamma_estimate, profile) = match &config.gamma {
        GammaSource::Fixed { gamma0, gamma } => {
            (fixed_mechanism(config.mechanism, *gamma0, *gamma)?, None, Vec::new())
        }
        GammaSource::Estimated => {
            let est = match config.mechanism {
                MechanismForm::Exponential => estimate_gamma(&inputs)?,
                MechanismForm::Logit => estimate_gamma_logit(&inputs)?,
            };
            (est.mechanism()?, Some(est), Vec::new())
        }
        GammaSource::Profiled { .. } => {
            let grid = config.gamma.grid()?;
            let (mech, rows) = profile_study(&kept_data, &study.designs, config.mechanism, &grid, &config.fit)?;
            (mech, None, rows)
        }
    };

    let curve = gamma_estimate.unwrap_or(GammaEstimate {
        form: mechanism.form(),
        gamma0: mechanism.gamma0(),
        gamma: mechanism.gamma(),
        n_used: 0,
        n_excluded: 0,
    });
    let diagnostic = badmm_diagnostic(
        &kept_data.iter().map(|f| MechanismFitInput::from_feature(f)).collect::<Vec<_>>(),
        Some(&curve),
    );

    let features: Vec<FeatureOutcome> = kept
        .par_iter()
        .map(|&i| {
            let data = &study.features[i];
            let id = &study.feature_ids[i];
            let q = data.n_batches();
            let q_obs = data.n_observed_batches();
            FeatureOutcome {
                feature_id: id.clone(),
                q_obs,
                missing_fraction: 1.0 - q_obs as f64 / q as f64,
                result: analyze_feature(id, data, study, &mechanism, config),
            }
        })
        .collect();

    Ok(StudyResults {
        mechanism,
        gamma_source: config.gamma.clone(),
        gamma_estimate,
        profile,
        coefficient_names: study.coefficient_names.clone(),
        tested: study.tested.clone(),
        n_input: study.features.len(),
        filtered,
        features,
        diagnostic,
        permutations: config.permutations,
        seed: config.seed,
    })
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}

fn pval(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:e}")
    }
}

/// The per-feature results table.
pub fn results_tsv(r: &StudyResults) -> String {
    let mut s = String::from("feature_id\tq_obs\tmissing_fraction\tconverged\titerations");
    for name in &r.coefficient_names {
        let _ = write!(s, "\talpha_{name}\tse_{name}");
    }
    for &t in &r.tested {
        let name = &r.coefficient_names[t];
        let _ = write!(s, "\tz_{name}\tp_{name}");
    }
    s.push_str("\tsigma0_sq\tsigma_sq\td\tfailed_permutations\n");
    for f in &r.features {
        let Ok(a) = &f.result else { continue };
        let se = a.fit.standard_errors();
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            f.feature_id, f.q_obs, num(f.missing_fraction), a.fit.converged, a.fit.n_iter
        );
        for (c, est) in a.fit.params.alpha.iter().enumerate() {
            let _ = write!(s, "\t{}\t{}", num(*est), num(se[c]));
        }
        for (n, z) in a.wald_z.iter().enumerate() {
            let p = a.test.as_ref().map_or(f64::NAN, |t| t.coefficients[n].p_perm);
            let _ = write!(s, "\t{}\t{}", num(*z), pval(p));
        }
        let p = &a.fit.params;
        let failed = a.test.as_ref().map_or(0, |t| t.failed);
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}",
            num(p.sigma0_sq),
            num(p.sigma_sq),
            num(p.d[(0, 0)]),
            failed
        );
    }
    s
}

pub fn errors_tsv(r: &StudyResults) -> String {
    let mut s = String::from("feature_id\terror\n");
    for f in &r.features {
        if let Err(e) = &f.result {
            let _ = writeln!(s, "{}\t{}", f.feature_id, e.replace(['\t', '\n'], " "));
        }
    }
    s
}

pub fn filtered_tsv(r: &StudyResults) -> String {
    let mut s = String::from("feature_id\treference_observed\tbatches_with_reference\n");
    for (id, o, t) in &r.filtered {
        let _ = writeln!(s, "{id}\t{o}\t{t}");
    }
    s
}

/// Per-feature available-case points, fitted curve, and binned medians.
pub fn diagnostic_tsv(r: &StudyResults) -> (String, String) {
    let mut rows = String::from("feature_id\tt\tpi\tfitted_pi\n");
    for d in &r.diagnostic.rows {
        let _ = writeln!(
            rows,
            "{}\t{}\t{}\t{}",
            r.features[d.feature].feature_id,
            num(d.t),
            num(d.pi),
            d.fitted.map_or("NA".into(), num)
        );
    }
    let mut bins = String::from("pi\tmedian_t\tn_features\n");
    for b in &r.diagnostic.bins {
        let _ = writeln!(bins, "{}\t{}\t{}", num(b.pi), num(b.median_t), b.n_features);
    }
    (rows, bins)
}

pub fn profile_tsv(r: &StudyResults) -> String {
    let mut s = String::from("gamma0\tgamma\tloglik\tn_failed\n");
    for p in &r.profile {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", num(p.gamma0), num(p.gamma), num(p.loglik), p.n_failed);
    }
    s
}

/// Key-value summary of the run.
pub fn summary_tsv(r: &StudyResults) -> String {
    let form = match r.mechanism.form() {
        MechanismForm::Exponential => "exponential",
        MechanismForm::Logit => "logit",
    };
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}\t{v}");
    };
    kv("features_in_input", r.n_input.to_string());
    kv("features_filtered", r.filtered.len().to_string());
    kv("features_analysed", r.features.len().to_string());
    kv("features_failed", r.n_failed().to_string());
    kv(
        "features_not_converged",
        r.features
            .iter()
            .filter(|f| matches!(&f.result, Ok(a) if !a.fit.converged))
            .count()
            .to_string(),
    );
    kv("mechanism", form.into());
    kv("gamma_source", r.gamma_source.label().into());
    kv("gamma0", num(r.mechanism.gamma0()));
    kv("gamma", num(r.mechanism.gamma()));
    kv("permutations", r.permutations.to_string());
    kv("seed", r.seed.to_string());
    let threshold = r.bonferroni_threshold();
    kv("bonferroni_threshold", pval(threshold));
    for (n, &t) in r.tested.iter().enumerate() {
        let count = r
            .features
            .iter()
            .filter_map(|f| f.result.as_ref().ok())
            .filter_map(|a| a.test.as_ref())
            .filter(|test| test.coefficients[n].p_perm < threshold)
            .count();
        kv(&format!("significant_{}", r.coefficient_names[t]), count.to_string());
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `results.tsv`, `errors.tsv`, `filtered.tsv`, `diagnostic.tsv`,
/// `diagnostic_binned.tsv`, `summary.tsv` and, when profiled, `profile.tsv`.
pub fn write_results(r: &StudyResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("results.tsv"), &results_tsv(r))?;
    write_file(&dir.join("errors.tsv"), &errors_tsv(r))?;
    write_file(&dir.join("filtered.tsv"), &filtered_tsv(r))?;
    let (rows, bins) = diagnostic_tsv(r);
    write_file(&dir.join("diagnostic.tsv"), &rows)?;
    write_file(&dir.join("diagnostic_binned.tsv"), &bins)?;
    write_file(&dir.join("summary.tsv"), &summary_tsv(r))?;
    if !r.profile.is_empty() {
        write_file(&dir.join("profile.tsv"), &profile_tsv(r))?;
    }
    Ok(())
}

/// Ingests, analyses and writes the results of a study.
pub fn run_study(input: &StudyInput) -> Result<StudyResults> {
    input.config.validate()?;
    let study = ingest(&input.abundance, &input.batch_map, input.covariates.as_deref())?;
    let results = analyze_study(&study, &input.config)?;
    write_results(&results, &input.out)?;
    Ok(results)
}

/// Paths written by [`write_study_files`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFiles {
    pub abundance: PathBuf,
    pub batch_map: PathBuf,
    pub covariates: PathBuf,
}

/// Writes a study as abundance, batch-map and covariate files. Values are
/// written in shortest round-trip form, so [`ingest`] reads them back exactly.
pub fn write_study_files(study: &StudyData, dir: &Path) -> Result<StudyFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = StudyFiles {
        abundance: dir.join("abundance.tsv"),
        batch_map: dir.join("batch_map.tsv"),
        covariates: dir.join("covariates.tsv"),
    };
    let mut map = String::from("sample_id\tbatch_id\tchannel\tis_reference\n");
    let cov_cols: Vec<usize> = (0..study.coefficient_names.len())
        .filter(|&c| study.coefficient_names[c] != "intercept" && study.coefficient_names[c] != "reference")
        .collect();
    let mut cov = String::from("sample_id");
    for &c in &cov_cols {
        let _ = write!(cov, "\t{}", study.coefficient_names[c]);
    }
    cov.push('\n');
    for (b, samples) in study.samples.iter().enumerate() {
        let design = &study.designs[b];
        for (j, sample) in samples.iter().enumerate() {
            let is_ref = design.reference() == Some(j);
            let _ = writeln!(map, "{sample}\t{}\t{}\t{is_ref}", study.batch_ids[b], study.channels[b][j]);
            cov.push_str(sample);
            for &c in &cov_cols {
                let _ = write!(cov, "\t{}", design.x()[(j, c)]);
            }
            cov.push('\n');
        }
    }
    let mut ab = String::from("feature_id");
    for s in study.samples.iter().flatten() {
        let _ = write!(ab, "\t{s}");
    }
    ab.push('\n');
    for (id, data) in study.feature_ids.iter().zip(&study.features) {
        ab.push_str(id);
        for v in data.batches().iter().flatten() {
            match v {
                Some(v) => {
                    let _ = write!(ab, "\t{v}");
                }
                None => ab.push_str("\tNA"),
            }
        }
        ab.push('\n');
    }
    write_file(&files.abundance, &ab)?;
    write_file(&files.batch_map, &map)?;
    write_file(&files.covariates, &cov)?;
    Ok(files)
}

/// Wraps a simulated study with file-friendly names: features `F0001…`,
/// batches `B01…`, channels `1…p`, samples `B01_1…`, covariate `group`.
pub fn study_from_simulation(sim: &SimulatedStudy) -> StudyData {
    let q = sim.designs.len();
    let width_b = q.to_string().len().max(2);
    let width_f = sim.features.len().to_string().len().max(4);
    let batch_ids: Vec<String> = (0..q).map(|b| format!("B{:0w$}", b + 1, w = width_b)).collect();
    let channels: Vec<Vec<String>> = sim
        .designs
        .iter()
        .map(|d| (1..=d.size()).map(|c| c.to_string()).collect())
        .collect();
    let samples = batch_ids
        .iter()
        .zip(&channels)
        .map(|(b, ch)| ch.iter().map(|c| format!("{b}_{c}")).collect())
        .collect();
    StudyData {
        feature_ids: (0..sim.features.len()).map(|i| format!("F{:0w$}", i + 1, w = width_f)).collect(),
        features: sim.features.clone(),
        designs: sim.designs.clone(),
        batch_ids,
        samples,
        channels,
        coefficient_names: vec!["intercept".into(), "reference".into(), "group".into()],
        tested: vec![2],
    }
}
