//! Gauss–Legendre quadrature of logistic-weighted standard normal densities.
//!
//! For a standard normal `u` and a weight `w(u) = 1 / (1 + exp(−(η₀ + η₁u)))`
//! this computes the mass `∫ w φ`, and the mean and variance of `u` under the
//! normalized tilted density, on the truncated range `[−8, 8]`. Node counts
//! double from 16 until the three quantities change by less than the
//! requested tolerance.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Half-width of the integration range in standard deviations.
pub const HALF_WIDTH: f64 = 8.0;

/// Smallest node count tried.
pub const MIN_NODES: usize = 16;

/// Number of doublings available (16 · 2^MAX_LEVEL nodes at most).
pub const MAX_LEVEL: usize = 9;

/// Default stopping tolerance on the relative change between node counts.
pub const DEFAULT_TOL: f64 = 1e-8;

struct Rule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

static RULES: [OnceLock<Rule>; MAX_LEVEL + 1] = [const { OnceLock::new() }; MAX_LEVEL + 1];

fn rule(level: usize) -> &'static Rule {
    RULES[level].get_or_init(|| gauss_legendre(MIN_NODES << level))
}

/// Nodes and weights of the n-point Gauss–Legendre rule on [−1, 1].
fn gauss_legendre(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * x * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
            let dx = p0 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule { nodes, weights }
}

/// log(1 / (1 + exp(−x))) without overflow.
#[inline]
pub fn log_inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Moments of a standard normal variable tilted by a logistic weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticTilt {
    /// log ∫ w(u) φ(u) du
    pub log_mass: f64,
    /// E(u | tilt)
    pub mean: f64,
    /// Var(u | tilt)
    pub var: f64,
    /// Node count of the returned estimate.
    pub nodes: usize,
}

/// Evaluates the tilt with a fixed number of node doublings above 16.
pub fn logistic_tilt_at_level(eta0: f64, eta1: f64, level: usize) -> LogisticTilt {
    let rule = rule(level);
    let ln_norm = HALF_WIDTH.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut shift = f64::NEG_INFINITY;
    for &t in &rule.nodes {
        let u = HALF_WIDTH * t;
        shift = shift.max(log_inv_logit(eta0 + eta1 * u) - 0.5 * u * u);
    }
    let (mut s0, mut s1) = (0.0, 0.0);
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let u = HALF_WIDTH * t;
        let f = w * (log_inv_logit(eta0 + eta1 * u) - 0.5 * u * u - shift).exp();
        s0 += f;
        s1 += f * u;
    }
    let mean = s1 / s0;
    let mut s2 = 0.0;
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let u = HALF_WIDTH * t;
        let f = w * (log_inv_logit(eta0 + eta1 * u) - 0.5 * u * u - shift).exp();
        s2 += f * (u - mean) * (u - mean);
    }
    LogisticTilt {
        log_mass: shift + s0.ln() + ln_norm,
        mean,
        var: s2 / s0,
        nodes: rule.nodes.len(),
    }
}

/// Relative change between two successive estimates.
pub fn relative_change(coarse: &LogisticTilt, fine: &LogisticTilt) -> f64 {
    let mass = (fine.log_mass - coarse.log_mass).exp_m1().abs();
    let scale = (fine.var + fine.mean * fine.mean).sqrt().max(f64::MIN_POSITIVE);
    let mean = (fine.mean - coarse.mean).abs() / scale;
    let var = (fine.var - coarse.var).abs() / fine.var.max(f64::MIN_POSITIVE);
    mass.max(mean).max(var)
}

/// Adaptive node doubling until the relative change drops below `tol`.
pub fn logistic_tilt(eta0: f64, eta1: f64, tol: f64) -> Result<LogisticTilt> {
    let mut prev = logistic_tilt_at_level(eta0, eta1, 0);
    let mut change = f64::INFINITY;
    for level in 1..=MAX_LEVEL {
        let next = logistic_tilt_at_level(eta0, eta1, level);
        change = relative_change(&prev, &next);
        if change < tol {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::Quadrature {
        nodes: MIN_NODES << MAX_LEVEL,
        change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_rule_integrates_polynomials() {
        let r = gauss_legendre(16);
        let sum_w: f64 = r.weights.iter().sum();
        assert_relative_eq!(sum_w, 2.0, epsilon = 1e-13);
        let x4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert_relative_eq!(x4, 0.4, epsilon = 1e-13);
    }

    #[test]
    fn flat_weight_gives_standard_normal() {
        // η₁ = 0: the weight is constant, moments are those of N(0,1) truncated at ±8.
        let t = logistic_tilt(0.3, 0.0, DEFAULT_TOL).unwrap();
        assert_relative_eq!(t.log_mass, log_inv_logit(0.3), epsilon = 1e-12);
        assert!(t.mean.abs() < 1e-13);
        assert_relative_eq!(t.var, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn node_doubling_converges() {
        let t = logistic_tilt(-0.5, -0.4, DEFAULT_TOL).unwrap();
        let level = (t.nodes / MIN_NODES).trailing_zeros() as usize;
        let finer = logistic_tilt_at_level(-0.5, -0.4, level + 1);
        assert!(relative_change(&t, &finer) < DEFAULT_TOL);
    }

    #[test]
    fn stable_in_the_tails() {
        assert_relative_eq!(log_inv_logit(-800.0), -800.0);
        assert_eq!(log_inv_logit(800.0), 0.0);
        let t = logistic_tilt(-700.0, 0.2, DEFAULT_TOL).unwrap();
        assert!(t.log_mass.is_finite());
        // exponential-like tail weight e^{η₀ + η₁u} tilts the mean by η₁
        assert_relative_eq!(t.mean, 0.2, epsilon = 1e-8);
    }
}
