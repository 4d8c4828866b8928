//! Simulation scenarios and the three simulation studies: test calibration and
//! power (Table 1), estimation accuracy with and without the mechanism
//! (Table 2) and available-case mechanism estimates (Table 3).
//!
//! Every batch has one reference row with covariates `(1, 1, 0)`; target rows
//! have `(1, 0, g)` where `g` is a group indicator with exactly half of the
//! `Q(p−1)` target samples (rounded down) in group 1, shuffled per replicate.
//! With `α = (μ, −a, a)` the reference channel sits `a` below the group-0
//! targets and group 1 sits `a` above them.
//!
//! A replicate is reproducible from `(seed, replicate)`: it draws from the
//! ChaCha8 stream `replicate` seeded with `seed`.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::ecm::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::inference::{permutation_test, relative_abundance_baseline};
use crate::mechanism::{estimate_gamma, estimate_gamma_logit, miss_prob, MechanismFitInput};
use crate::types::{BatchDesign, FeatureBatchData, MissingMechanism, ModelParameters};

/// Fixed-effect column tested in Table 1: the group effect. The reference
/// effect is shared by every batch and survives batch permutation.
pub const TESTED: [usize; 1] = [2];

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// Number of batches Q.
    pub q: usize,
    /// Samples per batch p (one reference plus p − 1 targets).
    pub p: usize,
    /// Intercept of α (the mean abundance of group-0 targets).
    pub intercept: f64,
    /// Effect size a in α = (intercept, −a, a).
    pub a: f64,
    pub sigma0_sq: f64,
    pub sigma_sq: f64,
    pub d: f64,
    pub gamma0: f64,
    pub gamma: f64,
    pub sporadic_rate: f64,
    pub n_replicates: usize,
    /// Permutations per test.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::large_variance(40, 0.0)
    }
}

impl Scenario {
    /// σ₀² = 2, σ² = 4, D = 3.
    pub fn large_variance(q: usize, a: f64) -> Self {
        Self {
            q,
            p: 4,
            intercept: 10.0,
            a,
            sigma0_sq: 2.0,
            sigma_sq: 4.0,
            d: 3.0,
            gamma0: 0.0,
            gamma: 0.1,
            sporadic_rate: 0.05,
            n_replicates: 1000,
            permutations: 999,
            seed: 20180101,
        }
    }

    /// σ₀² = 1, σ² = 2, D = 1.
    pub fn small_variance(q: usize, a: f64) -> Self {
        Self {
            sigma0_sq: 1.0,
            sigma_sq: 2.0,
            d: 1.0,
            ..Self::large_variance(q, a)
        }
    }

    /// The estimation study: α = (10, −1, 1), large variance.
    pub fn estimation(q: usize) -> Self {
        Self::large_variance(q, 1.0)
    }

    /// The mechanism-estimation study: 100 repetitions of 1000 features.
    pub fn mechanism_estimation(q: usize) -> Self {
        Self {
            n_replicates: 100,
            ..Self::large_variance(q, 1.0)
        }
    }

    pub fn alpha(&self) -> [f64; 3] {
        [self.intercept, -self.a, self.a]
    }

    pub fn params(&self) -> ModelParameters {
        ModelParameters::random_intercept(&self.alpha(), self.sigma0_sq, self.sigma_sq, self.d)
            .expect("validated scenario")
    }

    pub fn mechanism(&self) -> MissingMechanism {
        MissingMechanism::exponential(self.gamma0, self.gamma).expect("validated scenario")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScenario(m.into()));
        if self.q < 2 {
            return bad("q must be at least 2");
        }
        if self.p < 2 {
            return bad("p must be at least 2 (reference plus one target)");
        }
        if !(self.sigma0_sq > 0.0 && self.sigma_sq > 0.0 && self.d > 0.0) {
            return bad("variances must be positive");
        }
        if !(0.0..1.0).contains(&self.sporadic_rate) {
            return bad("sporadic_rate must be in [0, 1)");
        }
        if !(self.intercept.is_finite() && self.a.is_finite()) {
            return bad("fixed effects must be finite");
        }
        if MissingMechanism::exponential(self.gamma0, self.gamma).is_err() {
            return bad("gamma0 and gamma must be finite and non-negative");
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let var = if (self.sigma0_sq, self.sigma_sq, self.d) == (2.0, 4.0, 3.0) {
            "large".to_string()
        } else if (self.sigma0_sq, self.sigma_sq, self.d) == (1.0, 2.0, 1.0) {
            "small".to_string()
        } else {
            format!("{}/{}/{}", self.sigma0_sq, self.sigma_sq, self.d)
        };
        format!("Q={} {} a={}", self.q, var, self.a)
    }
}

const KEYS: [&str; 13] = [
    "q", "p", "intercept", "a", "sigma0_sq", "sigma_sq", "d", "gamma0", "gamma",
    "sporadic_rate", "n_replicates", "permutations", "seed",
];

impl fmt::Display for Scenario {
    /// Flat `key=value` lines, readable by [`Scenario::from_str`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let values = [
            self.q.to_string(),
            self.p.to_string(),
            self.intercept.to_string(),
            self.a.to_string(),
            self.sigma0_sq.to_string(),
            self.sigma_sq.to_string(),
            self.d.to_string(),
            self.gamma0.to_string(),
            self.gamma.to_string(),
            self.sporadic_rate.to_string(),
            self.n_replicates.to_string(),
            self.permutations.to_string(),
            self.seed.to_string(),
        ];
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    /// Parses `key=value` lines over the default scenario. Blank lines and
    /// lines starting with `#` are ignored.
    fn from_str(s: &str) -> Result<Self> {
        let mut sc = Scenario::default();
        for (n, line) in s.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::InvalidScenario(format!("line {}: {m}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "q" => sc.q = int()?,
                "p" => sc.p = int()?,
                "intercept" => sc.intercept = float()?,
                "a" => sc.a = float()?,
                "sigma0_sq" => sc.sigma0_sq = float()?,
                "sigma_sq" => sc.sigma_sq = float()?,
                "d" => sc.d = float()?,
                "gamma0" => sc.gamma0 = float()?,
                "gamma" => sc.gamma = float()?,
                "sporadic_rate" => sc.sporadic_rate = float()?,
                "n_replicates" => sc.n_replicates = int()?,
                "permutations" => sc.permutations = int()?,
                "seed" => {
                    sc.seed = value.parse().map_err(|e| err(format!("seed: {e}")))?
                }
                _ => return Err(err(format!("unknown key {key:?}"))),
            }
        }
        sc.validate()?;
        Ok(sc)
    }
}

/// One generated dataset with its true parameters.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub data: FeatureBatchData,
    pub designs: Vec<BatchDesign>,
    pub truth: ModelParameters,
    pub mechanism: MissingMechanism,
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Batch designs with a balanced, shuffled group indicator.
pub fn generate_designs<R: Rng>(q: usize, p: usize, rng: &mut R) -> Vec<BatchDesign> {
    let n_targets = q * (p - 1);
    let mut groups: Vec<f64> = (0..n_targets).map(|i| (i < n_targets / 2) as u8 as f64).collect();
    groups.shuffle(rng);
    (0..q)
        .map(|i| {
            let mut x = DMatrix::zeros(p, 3);
            x[(0, 0)] = 1.0;
            x[(0, 1)] = 1.0;
            for j in 1..p {
                x[(j, 0)] = 1.0;
                x[(j, 2)] = groups[i * (p - 1) + j - 1];
            }
            BatchDesign::random_intercept(x, Some(0)).expect("valid simulated design")
        })
        .collect()
}

/// Complete responses, then batch-level missingness from the realized batch
/// means, then sporadic missingness in observed batches. A batch whose rows
/// are all sporadically missing becomes batch-missing.
fn draw_feature<R: Rng>(
    sc: &Scenario,
    params: &ModelParameters,
    designs: &[BatchDesign],
    mech: &MissingMechanism,
    rng: &mut R,
) -> FeatureBatchData {
    let sd_b = params.d[(0, 0)].sqrt();
    let batches = designs
        .iter()
        .map(|design| {
            let b: f64 = sd_b * rng.sample::<f64, _>(StandardNormal);
            let mean = params.fixed_mean(design);
            let y: Vec<f64> = (0..design.size())
                .map(|j| {
                    let sd = params.row_variance(design.reference(), j).sqrt();
                    mean[j] + b + sd * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            let s = y.iter().sum::<f64>() / y.len() as f64;
            let missing = rng.random::<f64>() < miss_prob(mech, s, None);
            if missing {
                return vec![None; y.len()];
            }
            y.into_iter()
                .map(|v| (rng.random::<f64>() >= sc.sporadic_rate).then_some(v))
                .collect()
        })
        .collect();
    FeatureBatchData::new(batches).expect("finite simulated values")
}

/// Generates replicate `replicate` of a scenario. Datasets without any
/// observed batch are rejected.
pub fn generate_replicate(sc: &Scenario, replicate: u64) -> Result<Replicate> {
    sc.validate()?;
    let mut rng = replicate_rng(sc.seed, replicate);
    let designs = generate_designs(sc.q, sc.p, &mut rng);
    let truth = sc.params();
    let mechanism = sc.mechanism();
    let data = draw_feature(sc, &truth, &designs, &mechanism, &mut rng);
    if data.n_observed_batches() == 0 {
        return Err(Error::DegenerateDataset("every batch is missing".into()));
    }
    Ok(Replicate {
        data,
        designs,
        truth,
        mechanism,
    })
}

/// Many features sharing one set of batch designs.
#[derive(Debug, Clone)]
pub struct SimulatedStudy {
    pub designs: Vec<BatchDesign>,
    pub features: Vec<FeatureBatchData>,
    /// True intercept of each feature.
    pub intercepts: Vec<f64>,
}

/// A multi-feature study: feature intercepts drawn from
/// `N(scenario.intercept, intercept_sd²)`, other parameters from the scenario.
/// Features may have no observed batch.
pub fn simulate_study(
    sc: &Scenario,
    n_features: usize,
    intercept_sd: f64,
    stream: u64,
) -> Result<SimulatedStudy> {
    sc.validate()?;
    if !(intercept_sd >= 0.0) {
        return Err(Error::InvalidScenario("intercept_sd must be non-negative".into()));
    }
    let mut rng = replicate_rng(sc.seed, stream);
    let designs = generate_designs(sc.q, sc.p, &mut rng);
    let mech = sc.mechanism();
    let spread = Normal::new(sc.intercept, intercept_sd).expect("checked sd");
    let mut features = Vec::with_capacity(n_features);
    let mut intercepts = Vec::with_capacity(n_features);
    for _ in 0..n_features {
        let mu = spread.sample(&mut rng);
        let params = Scenario { intercept: mu, ..sc.clone() }.params();
        features.push(draw_feature(sc, &params, &designs, &mech, &mut rng));
        intercepts.push(mu);
    }
    Ok(SimulatedStudy {
        designs,
        features,
        intercepts,
    })
}

fn fmt_rate(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.3}")
    }
}

/// Per-method p-values of one Table 1 scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub scenario: String,
    pub method: String,
    pub rate_05: f64,
    pub rate_01: f64,
    pub n_success: usize,
    pub n_failed: usize,
    /// Tests with more than 5% failed permutation refits.
    pub n_unreliable: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table1 {
    pub rows: Vec<RejectionRow>,
    pub permutations: usize,
}

impl Table1 {
    pub fn row(&self, scenario: &str, method: &str) -> Option<&RejectionRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("scenario\tmethod\trate_p05\trate_p01\tn_success\tn_failed\tn_unreliable\tpermutations\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.scenario, r.method, r.rate_05, r.rate_01, r.n_success, r.n_failed, r.n_unreliable, self.permutations
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("Rejection rates (permutation Wald test of the group effect, B = {})\n", self.permutations);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<22} {:<10} p<0.05: {:>6}  p<0.01: {:>6}  ({} ok, {} failed)",
                r.scenario,
                r.method,
                fmt_rate(r.rate_05),
                fmt_rate(r.rate_01),
                r.n_success,
                r.n_failed
            );
        }
        s
    }
}

pub const METHOD_BADMM: &str = "mixEMM";
pub const METHOD_MAR: &str = "MAR";
pub const METHOD_BASELINE: &str = "relative";

/// Group-effect permutation p-values of one replicate for the three methods.
fn table1_replicate(sc: &Scenario, r: u64, config: &FitConfig) -> [Option<(f64, bool)>; 3] {
    let Ok(rep) = generate_replicate(sc, r) else {
        return [None, None, None];
    };
    let seed = sc.seed ^ (r.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mixed = |mech: &MissingMechanism| {
        permutation_test(&rep.data, &rep.designs, mech, config, &TESTED, sc.permutations, seed)
            .ok()
            .map(|(_, t)| (t.coefficients[0].p_perm, t.reliable()))
    };
    [
        mixed(&rep.mechanism),
        mixed(&MissingMechanism::ignorable()),
        relative_abundance_baseline(&rep.data, &rep.designs, &TESTED, sc.permutations, seed)
            .ok()
            .map(|t| (t.coefficients[0].p_perm, t.reliable())),
    ]
}

fn rejection_row(scenario: String, method: &str, results: &[Option<(f64, bool)>]) -> RejectionRow {
    let ok: Vec<(f64, bool)> = results.iter().flatten().copied().collect();
    let n = ok.len() as f64;
    let rate = |level: f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().filter(|(p, _)| *p < level).count() as f64 / n
        }
    };
    RejectionRow {
        scenario,
        method: method.into(),
        rate_05: rate(0.05),
        rate_01: rate(0.01),
        n_success: ok.len(),
        n_failed: results.len() - ok.len(),
        n_unreliable: ok.iter().filter(|(_, reliable)| !reliable).count(),
    }
}

/// Rejection rates of the mixed model with the scenario mechanism, the
/// mixed model under MAR (γ = 0) and the relative-abundance baseline.
pub fn run_table1(scenarios: &[Scenario], config: &FitConfig) -> Result<Table1> {
    let mut table = Table1::default();
    for sc in scenarios {
        sc.validate()?;
        table.permutations = sc.permutations;
        let results: Vec<_> = (0..sc.n_replicates as u64)
            .into_par_iter()
            .map(|r| table1_replicate(sc, r, config))
            .collect();
        for (m, method) in [METHOD_BADMM, METHOD_MAR, METHOD_BASELINE].iter().enumerate() {
            let column: Vec<_> = results.iter().map(|r| r[m]).collect();
            table.rows.push(rejection_row(sc.label(), method, &column));
        }
    }
    Ok(table)
}

/// Squared errors of one fit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct SquaredErrors {
    alpha: f64,
    components: [f64; 3],
    sigma0_sq: f64,
    sigma_sq: f64,
    d: f64,
}

impl SquaredErrors {
    fn of(est: &ModelParameters, truth: &ModelParameters) -> Self {
        Self {
            alpha: (&est.alpha - &truth.alpha).norm_squared(),
            components: std::array::from_fn(|i| (est.alpha[i] - truth.alpha[i]).powi(2)),
            sigma0_sq: (est.sigma0_sq - truth.sigma0_sq).powi(2),
            sigma_sq: (est.sigma_sq - truth.sigma_sq).powi(2),
            d: (&est.d - &truth.d).norm_squared(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.alpha += o.alpha;
        for (a, b) in self.components.iter_mut().zip(&o.components) {
            *a += b;
        }
        self.sigma0_sq += o.sigma0_sq;
        self.sigma_sq += o.sigma_sq;
        self.d += o.d;
    }
}

/// MSE of one analysis relative to the MAR analysis of the same replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMseRow {
    pub method: String,
    pub q: usize,
    /// Ratio of Σ‖α̂ − α‖².
    pub alpha: f64,
    /// Ratios for the intercept, reference and group coefficients separately.
    pub alpha_components: [f64; 3],
    pub sigma0_sq: f64,
    pub sigma_sq: f64,
    pub d: f64,
    /// Wall-clock seconds spent fitting with this method.
    pub seconds: f64,
    /// Replicates where both this method and MAR succeeded.
    pub n_success: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table2 {
    pub rows: Vec<RelativeMseRow>,
    /// Seconds spent by the MAR reference fits.
    pub mar_seconds: f64,
}

impl Table2 {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tq\trel_mse_alpha\trel_mse_intercept\trel_mse_reference\trel_mse_group\trel_mse_sigma0_sq\trel_mse_sigma_sq\trel_mse_d\tseconds\tn_success\tn_failed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.method,
                r.q,
                r.alpha,
                r.alpha_components[0],
                r.alpha_components[1],
                r.alpha_components[2],
                r.sigma0_sq, r.sigma_sq, r.d, r.seconds, r.n_success, r.n_failed
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::from("Relative MSE versus MAR (gamma = 0)\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "  {:<12} Q={:<4} alpha {:.3} (intercept {:.3}, reference {:.3}, group {:.3})  sigma0^2 {:.3}  sigma^2 {:.3}  D {:.3}  ({:.1} s, {} ok)",
                r.method,
                r.q,
                r.alpha,
                r.alpha_components[0],
                r.alpha_components[1],
                r.alpha_components[2],
                r.sigma0_sq, r.sigma_sq, r.d, r.seconds, r.n_success
            );
        }
        s
    }
}

/// Stream used for the calibration pool of the logit analysis; far from the
/// replicate streams.
const CALIBRATION_STREAM: u64 = 1 << 40;

/// Logit mechanism fitted (available-case) to a 1000-feature pool simulated
/// under the scenario with feature means `N(intercept, 2²)`.
pub fn calibrate_logit(sc: &Scenario) -> Result<MissingMechanism> {
    let pool = simulate_study(sc, 1000, 2.0, CALIBRATION_STREAM)?;
    let inputs: Vec<_> = pool.features.iter().map(MechanismFitInput::from_feature).collect();
    estimate_gamma_logit(&inputs)?.mechanism()
}

/// Which analyses [`run_table2`] performs besides MAR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Table2Methods {
    pub exponential: bool,
    pub logit: bool,
}

impl Default for Table2Methods {
    fn default() -> Self {
        Self {
            exponential: true,
            logit: true,
        }
    }
}

/// Relative MSEs of the exponential analysis (true Γ) and of the logit
/// analysis (Γ fitted by [`calibrate_logit`]) against MAR.
pub fn run_table2(sc: &Scenario, methods: Table2Methods, config: &FitConfig) -> Result<Table2> {
    sc.validate()?;
    let mut analyses: Vec<(String, MissingMechanism)> = Vec::new();
    if methods.exponential {
        analyses.push(("exponential".into(), sc.mechanism()));
    }
    if methods.logit {
        analyses.push(("logit".into(), calibrate_logit(sc)?));
    }
    let truth = sc.params();
    let fit_all = |mech: &MissingMechanism| -> (Vec<Option<SquaredErrors>>, f64) {
        let start = Instant::now();
        let errs = (0..sc.n_replicates as u64)
            .into_par_iter()
            .map(|r| {
                let rep = generate_replicate(sc, r).ok()?;
                let f = fit(&rep.data, &rep.designs, mech, config).ok()?;
                Some(SquaredErrors::of(&f.params, &truth))
            })
            .collect();
        (errs, start.elapsed().as_secs_f64())
    };
    let (mar, mar_seconds) = fit_all(&MissingMechanism::ignorable());
    let mut table = Table2 {
        rows: Vec::new(),
        mar_seconds,
    };
    for (name, mech) in analyses {
        let (errs, seconds) = fit_all(&mech);
        let (mut num, mut den, mut n) = (SquaredErrors::default(), SquaredErrors::default(), 0);
        for (e, m) in errs.iter().zip(&mar) {
            if let (Some(e), Some(m)) = (e, m) {
                num.add(e);
                den.add(m);
                n += 1;
            }
        }
        table.rows.push(RelativeMseRow {
            method: name,
            q: sc.q,
            alpha: num.alpha / den.alpha,
            alpha_components: std::array::from_fn(|i| num.components[i] / den.components[i]),
            sigma0_sq: num.sigma0_sq / den.sigma0_sq,
            sigma_sq: num.sigma_sq / den.sigma_sq,
            d: num.d / den.d,
            seconds,
            n_success: n,
            n_failed: sc.n_replicates - n,
        });
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distribution4 {
    pub min: f64,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl Distribution4 {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            min: v.first().copied().unwrap_or(f64::NAN),
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table3 {
    pub q: usize,
    pub n_features: usize,
    pub gamma0: Distribution4,
    pub gamma: Distribution4,
    /// Per-repetition estimates (γ̂₀, γ̂).
    pub estimates: Vec<(f64, f64)>,
    pub n_failed: usize,
}

impl Table3 {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("q\tparameter\tmin\tmedian\tmean\tmax\n");
        for (name, d) in [("gamma0", &self.gamma0), ("gamma", &self.gamma)] {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", self.q, name, d.min, d.median, d.mean, d.max);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "Available-case mechanism estimates, Q = {}, {} repetitions of {} features\n",
            self.q,
            self.estimates.len(),
            self.n_features
        );
        for (name, d) in [("gamma0", &self.gamma0), ("gamma", &self.gamma)] {
            let _ = writeln!(
                s,
                "  {name:<7} min {:.4}  median {:.4}  mean {:.4}  max {:.4}",
                d.min, d.median, d.mean, d.max
            );
        }
        s
    }
}

/// Repeats the available-case estimate of Γ over `n_replicates` studies of
/// `n_features` features with means drawn from `N(intercept, 2²)`.
pub fn run_table3(sc: &Scenario, n_features: usize) -> Result<Table3> {
    sc.validate()?;
    let results: Vec<Option<(f64, f64)>> = (0..sc.n_replicates as u64)
        .into_par_iter()
        .map(|r| {
            let study = simulate_study(sc, n_features, 2.0, r).ok()?;
            let inputs: Vec<_> = study.features.iter().map(MechanismFitInput::from_feature).collect();
            estimate_gamma(&inputs).ok().map(|g| (g.gamma0, g.gamma))
        })
        .collect();
    let estimates: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let g0: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    let g: Vec<f64> = estimates.iter().map(|e| e.1).collect();
    Ok(Table3 {
        q: sc.q,
        n_features,
        gamma0: Distribution4::of(&g0),
        gamma: Distribution4::of(&g),
        n_failed: results.len() - estimates.len(),
        estimates,
    })
}

/// True parameters of every feature of a simulated study.
pub fn study_truth(sc: &Scenario, study: &SimulatedStudy) -> Vec<ModelParameters> {
    study
        .intercepts
        .iter()
        .map(|&mu| Scenario { intercept: mu, ..sc.clone() }.params())
        .collect()
}

/// Expected fraction of missing batches under the scenario, averaged over
/// the batch designs of `designs`.
pub fn expected_missing_fraction(sc: &Scenario, designs: &[BatchDesign]) -> Result<f64> {
    let params = sc.params();
    let mech = sc.mechanism();
    let mut total = 0.0;
    for d in designs {
        total += crate::mechanism::marginal_missing_prob(&params, d, &mech, None)?;
    }
    Ok(total / designs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_round_trips_through_text() {
        let sc = Scenario {
            sporadic_rate: 0.125,
            seed: 99,
            ..Scenario::small_variance(200, 0.3)
        };
        let parsed: Scenario = sc.to_string().parse().unwrap();
        assert_eq!(parsed, sc);
    }

    #[test]
    fn scenario_parse_errors() {
        assert!("q=1".parse::<Scenario>().is_err());
        assert!("bogus=3".parse::<Scenario>().is_err());
        assert!("q".parse::<Scenario>().is_err());
        assert!("sigma_sq=-1".parse::<Scenario>().is_err());
        let sc: Scenario = "# comment\n\nq = 7\n".parse().unwrap();
        assert_eq!(sc.q, 7);
    }

    #[test]
    fn designs_are_balanced() {
        let mut rng = replicate_rng(1, 0);
        let designs = generate_designs(5, 4, &mut rng);
        let ones: f64 = designs.iter().map(|d| d.x().column(2).sum()).sum();
        assert_eq!(ones, 7.0);
        for d in &designs {
            assert_eq!(d.x().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
            assert_eq!(d.reference(), Some(0));
        }
    }

    #[test]
    fn replicates_are_deterministic() {
        let sc = Scenario::large_variance(40, 0.7);
        let a = generate_replicate(&sc, 3).unwrap();
        let b = generate_replicate(&sc, 3).unwrap();
        let c = generate_replicate(&sc, 4).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.designs, b.designs);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn large_intercept_means_no_missing_batches() {
        let sc = Scenario {
            gamma0: 50.0,
            gamma: 0.0,
            sporadic_rate: 0.0,
            ..Scenario::large_variance(40, 0.0)
        };
        let rep = generate_replicate(&sc, 0).unwrap();
        assert_eq!(rep.data.n_observed_batches(), 40);
        assert!(!rep.data.has_sporadic_missing());
    }

    #[test]
    fn all_missing_is_degenerate() {
        let sc = Scenario {
            intercept: -1000.0,
            ..Scenario::large_variance(5, 0.0)
        };
        assert!(matches!(generate_replicate(&sc, 0), Err(Error::DegenerateDataset(_))));
    }
}
