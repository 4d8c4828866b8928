//! Allocation-free ECM iteration over a flattened copy of one feature.
//!
//! All rows of all batches are stored contiguously: observed batches keep
//! only their observed rows, missing batches keep every row of their design.
//! Per iteration the engine computes, for every batch, `b_i`, `Δ_i`, the
//! working response and the diagonal of `V_i`, then applies the closed-form
//! CM updates. The E-step of a missing batch is expressed through the scalar
//! tilt of the batch mean (see [`crate::mechanism`]):
//!
//! ```text
//! ψ = (E(s|M=1) − m_s) / (p v_s)      κ = (Var(s|M=1) − v_s) / (p v_s)²
//! b = ψ D Zᵀ1      Δ = D + κ (D Zᵀ1)(D Zᵀ1)ᵀ
//! y_t = Xα + ψ Σ1  diag V = r + κ r²    (r = diag R)
//! ```

use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve_in_place, lu_solve_in_place};
use crate::mechanism::tilt_batch_mean;
use crate::types::{BatchDesign, FeatureBatchData, MissingMechanism, ModelParameters};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
struct BatchLayout {
    start: usize,
    len: usize,
    observed: bool,
    /// Reference rows among the stored rows (0 or 1).
    n_ref: usize,
    /// γ₂ᵀC_i
    offset: f64,
    /// Σ_j z_j (missing batches only)
    z_sum: Vec<f64>,
    /// Σ_j x_j / p (missing batches only)
    x_mean: Vec<f64>,
}

/// Flattened parameters: α, σ₀², σ², D (row-major h×h).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Theta {
    pub alpha: Vec<f64>,
    pub sigma0_sq: f64,
    pub sigma_sq: f64,
    pub d: Vec<f64>,
}

impl Theta {
    pub fn from_params(p: &ModelParameters) -> Self {
        let h = p.d.nrows();
        Self {
            alpha: p.alpha.iter().copied().collect(),
            sigma0_sq: p.sigma0_sq,
            sigma_sq: p.sigma_sq,
            d: (0..h * h).map(|i| p.d[(i / h, i % h)]).collect(),
        }
    }

    pub fn to_params(&self, h: usize) -> ModelParameters {
        ModelParameters {
            alpha: nalgebra::DVector::from_column_slice(&self.alpha),
            sigma0_sq: self.sigma0_sq,
            sigma_sq: self.sigma_sq,
            d: nalgebra::DMatrix::from_row_slice(h, h, &self.d),
        }
    }

    pub fn total_variance(&self) -> f64 {
        let h = (self.d.len() as f64).sqrt() as usize;
        self.sigma0_sq + self.sigma_sq + (0..h).map(|a| self.d[a * h + a]).sum::<f64>()
    }

    /// Largest change relative to max(|old|, 1).
    pub fn max_relative_change(&self, next: &Theta) -> f64 {
        let pairs = self
            .alpha
            .iter()
            .zip(&next.alpha)
            .chain(self.d.iter().zip(&next.d))
            .chain([(&self.sigma0_sq, &next.sigma0_sq), (&self.sigma_sq, &next.sigma_sq)]);
        pairs
            .map(|(a, b)| (b - a).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

pub(crate) struct Engine<'m> {
    k: usize,
    h: usize,
    q: usize,
    batches: Vec<BatchLayout>,
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    is_ref: Vec<bool>,
    n_ref: usize,
    n_tgt: usize,
    gram_ref: Vec<f64>,
    gram_tgt: Vec<f64>,
    mech: &'m MissingMechanism,
    scalar: Option<ScalarStats>,
    // scratch, overwritten by each E-step
    b: Vec<f64>,
    delta: Vec<f64>,
    y_work: Vec<f64>,
    v_diag: Vec<f64>,
    tmp_a: Vec<f64>,
    tmp_b: Vec<f64>,
    tmp_m: Vec<f64>,
    tmp_h: Vec<f64>,
    tmp_k: Vec<f64>,
    tmp_kk: Vec<f64>,
    /// Missing batches whose exponential marginal probability was clamped in the last E-step.
    pub clamped: usize,
}

impl<'m> Engine<'m> {
    pub fn new(
        data: &FeatureBatchData,
        designs: &[BatchDesign],
        mech: &'m MissingMechanism,
    ) -> Result<Self> {
        let q = data.n_batches();
        if designs.len() != q || q == 0 {
            return Err(Error::InvalidData(format!(
                "{q} batches but {} designs",
                designs.len()
            )));
        }
        let k = designs[0].n_fixed();
        let h = designs[0].n_random();
        let mut eng = Engine {
            k,
            h,
            q,
            batches: Vec::with_capacity(q),
            x: Vec::new(),
            z: Vec::new(),
            y: Vec::new(),
            is_ref: Vec::new(),
            n_ref: 0,
            n_tgt: 0,
            gram_ref: vec![0.0; k * k],
            gram_tgt: vec![0.0; k * k],
            mech,
            scalar: None,
            b: vec![0.0; q * h],
            delta: vec![0.0; q * h * h],
            y_work: Vec::new(),
            v_diag: Vec::new(),
            tmp_a: vec![0.0; h * h],
            tmp_b: vec![0.0; h * (h + 1)],
            tmp_m: vec![0.0; h * h],
            tmp_h: vec![0.0; h],
            tmp_k: vec![0.0; k],
            tmp_kk: vec![0.0; k * k],
            clamped: 0,
        };
        for (i, design) in designs.iter().enumerate() {
            if design.n_fixed() != k || design.n_random() != h {
                return Err(Error::InvalidDesign(format!(
                    "batch {i} has different design dimensions"
                )));
            }
            let values = data.batch(i);
            if values.len() != design.size() {
                return Err(Error::InvalidDesign(format!(
                    "batch {i}: design has {} rows, data has {}",
                    design.size(),
                    values.len()
                )));
            }
            let observed = !data.is_batch_missing(i);
            let start = eng.y.len();
            for (row, value) in values.iter().enumerate() {
                if observed && value.is_none() {
                    continue;
                }
                eng.x.extend(design.x().row(row).iter());
                eng.z.extend(design.z().row(row).iter());
                eng.y.push(value.unwrap_or(0.0));
                let is_ref = design.reference() == Some(row);
                eng.is_ref.push(is_ref);
                let gram = if is_ref {
                    eng.n_ref += 1;
                    &mut eng.gram_ref
                } else {
                    eng.n_tgt += 1;
                    &mut eng.gram_tgt
                };
                for a in 0..k {
                    for c in 0..k {
                        gram[a * k + c] += design.x()[(row, a)] * design.x()[(row, c)];
                    }
                }
            }
            let len = eng.y.len() - start;
            let n_ref = eng.is_ref[start..].iter().filter(|&&r| r).count();
            let (z_sum, x_mean) = if observed {
                (Vec::new(), Vec::new())
            } else {
                let p = design.size() as f64;
                (
                    design.z().row_sum().iter().copied().collect(),
                    design.x().row_sum().iter().map(|v| v / p).collect(),
                )
            };
            let offset = if observed { 0.0 } else { mech.covariate_offset(i)? };
            eng.batches.push(BatchLayout {
                start,
                len,
                observed,
                n_ref,
                offset,
                z_sum,
                x_mean,
            });
        }
        eng.y_work = vec![0.0; eng.y.len()];
        eng.v_diag = vec![0.0; eng.y.len()];
        if h == 1 {
            eng.scalar = Some(ScalarStats::new(&eng));
        }
        Ok(eng)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    fn row_var(&self, row: usize, t: &Theta) -> f64 {
        if self.is_ref[row] {
            t.sigma0_sq
        } else {
            t.sigma_sq
        }
    }

    #[inline]
    fn dot_x(&self, row: usize, v: &[f64]) -> f64 {
        let k = self.k;
        self.x[row * k..(row + 1) * k]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum()
    }

    #[inline]
    fn dot_z(&self, row: usize, v: &[f64]) -> f64 {
        let h = self.h;
        self.z[row * h..(row + 1) * h]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// E-step at `t`. Returns the Ω-dependent part of the observed-data
    /// log-likelihood: Gaussian densities of observed batches plus
    /// log Pr(M_i = 1) of missing batches.
    pub fn e_step(&mut self, t: &Theta) -> Result<f64> {
        if let Some(mut stats) = self.scalar.take() {
            let out = self.e_step_scalar(&mut stats, t);
            self.scalar = Some(stats);
            return out;
        }
        let (h, k) = (self.h, self.k);
        let mut loglik = 0.0;
        self.clamped = 0;
        let (ln_s0, ln_s) = (t.sigma0_sq.ln(), t.sigma_sq.ln());
        for bi in 0..self.q {
            let (start, len, observed, n_ref) = {
                let b = &self.batches[bi];
                (b.start, b.len, b.observed, b.n_ref)
            };
            if observed {
                // S = ZᵀR⁻¹Z, u = ZᵀR⁻¹r
                let mut s_mat = std::mem::take(&mut self.tmp_a);
                let mut u = std::mem::take(&mut self.tmp_h);
                s_mat.iter_mut().for_each(|v| *v = 0.0);
                u.iter_mut().for_each(|v| *v = 0.0);
                let mut quad = 0.0;
                let log_det_r = n_ref as f64 * ln_s0 + (len - n_ref) as f64 * ln_s;
                for row in start..start + len {
                    let var = self.row_var(row, t);
                    let r = self.y[row] - self.dot_x(row, &t.alpha);
                    quad += r * r / var;
                    let zr = &self.z[row * h..(row + 1) * h];
                    for a in 0..h {
                        u[a] += zr[a] * r / var;
                        for c in 0..h {
                            s_mat[a * h + c] += zr[a] * zr[c] / var;
                        }
                    }
                }
                let b_out = &mut self.b[bi * h..(bi + 1) * h];
                let d_out = &mut self.delta[bi * h * h..(bi + 1) * h * h];
                let log_det_m;
                if h == 1 {
                    let m = 1.0 + t.d[0] * s_mat[0];
                    b_out[0] = t.d[0] * u[0] / m;
                    d_out[0] = t.d[0] / m;
                    log_det_m = m.ln();
                } else {
                    // M = I + D S; solve M [b | Δ] = [D u | D]
                    let m = &mut self.tmp_m;
                    let rhs = &mut self.tmp_b;
                    for a in 0..h {
                        let mut du = 0.0;
                        for c in 0..h {
                            let mut ds = 0.0;
                            for e in 0..h {
                                ds += t.d[a * h + e] * s_mat[e * h + c];
                            }
                            m[a * h + c] = ds + if a == c { 1.0 } else { 0.0 };
                            du += t.d[a * h + c] * u[c];
                            rhs[a * (h + 1) + 1 + c] = t.d[a * h + c];
                        }
                        rhs[a * (h + 1)] = du;
                    }
                    log_det_m = lu_solve_in_place(m, h, rhs, h + 1).ok_or_else(|| {
                        Error::NotPositiveDefinite("I + D ZᵀR⁻¹Z is singular".into())
                    })?;
                    for a in 0..h {
                        b_out[a] = rhs[a * (h + 1)];
                        for c in 0..h {
                            d_out[a * h + c] = 0.5
                                * (rhs[a * (h + 1) + 1 + c] + rhs[c * (h + 1) + 1 + a]);
                        }
                    }
                }
                let ub: f64 = u.iter().zip(b_out.iter()).map(|(a, b)| a * b).sum();
                loglik -= 0.5 * (len as f64 * LN_2PI + log_det_r + log_det_m + quad - ub);
                self.tmp_a = s_mat;
                self.tmp_h = u;
                for row in start..start + len {
                    self.y_work[row] = self.y[row];
                    let zr = &self.z[row * h..(row + 1) * h];
                    let dl = &self.delta[bi * h * h..(bi + 1) * h * h];
                    let mut v = 0.0;
                    for a in 0..h {
                        for c in 0..h {
                            v += zr[a] * dl[a * h + c] * zr[c];
                        }
                    }
                    self.v_diag[row] = v;
                }
            } else {
                let p = len as f64;
                let layout = &self.batches[bi];
                let m_s: f64 = layout.x_mean.iter().zip(&t.alpha).map(|(a, b)| a * b).sum();
                // D Zᵀ1
                let dw = &mut self.tmp_h;
                let mut w_dw = 0.0;
                for a in 0..h {
                    let mut s = 0.0;
                    for c in 0..h {
                        s += t.d[a * h + c] * layout.z_sum[c];
                    }
                    dw[a] = s;
                    w_dw += layout.z_sum[a] * s;
                }
                let mut tr_r = 0.0;
                for row in start..start + len {
                    tr_r += if self.is_ref[row] { t.sigma0_sq } else { t.sigma_sq };
                }
                let v_s = (w_dw + tr_r) / (p * p);
                let tilt = tilt_batch_mean(self.mech, m_s, v_s, layout.offset)?;
                if tilt.clamped {
                    self.clamped += 1;
                }
                loglik += tilt.log_prob;
                let (psi, kappa) = if v_s > 0.0 {
                    (
                        (tilt.mean - m_s) / (p * v_s),
                        (tilt.var - v_s) / (p * v_s * p * v_s),
                    )
                } else {
                    (0.0, 0.0)
                };
                let b_out = &mut self.b[bi * h..(bi + 1) * h];
                let d_out = &mut self.delta[bi * h * h..(bi + 1) * h * h];
                for a in 0..h {
                    b_out[a] = psi * dw[a];
                    for c in 0..h {
                        d_out[a * h + c] = t.d[a * h + c] + kappa * dw[a] * dw[c];
                    }
                }
                for row in start..start + len {
                    let var = if self.is_ref[row] { t.sigma0_sq } else { t.sigma_sq };
                    let zr = &self.z[row * h..(row + 1) * h];
                    let sigma_one: f64 = zr.iter().zip(dw.iter()).map(|(a, b)| a * b).sum::<f64>() + var;
                    let xa: f64 = self.x[row * k..(row + 1) * k]
                        .iter()
                        .zip(&t.alpha)
                        .map(|(a, b)| a * b)
                        .sum();
                    self.y_work[row] = xa + psi * sigma_one;
                    self.v_diag[row] = var + kappa * var * var;
                }
            }
        }
        Ok(loglik)
    }

    /// CM step from the moments of the last E-step: D, then α (with the
    /// pre-update R), then (σ₀², σ²).
    pub fn cm_step(&mut self, t: &Theta) -> Result<Theta> {
        if let Some(mut stats) = self.scalar.take() {
            let out = self.cm_step_scalar(&mut stats, t);
            self.scalar = Some(stats);
            return out;
        }
        let (h, k, q) = (self.h, self.k, self.q);
        let mut d = vec![0.0; h * h];
        for bi in 0..q {
            let b = &self.b[bi * h..(bi + 1) * h];
            let dl = &self.delta[bi * h * h..(bi + 1) * h * h];
            for a in 0..h {
                for c in 0..h {
                    d[a * h + c] += b[a] * b[c] + dl[a * h + c];
                }
            }
        }
        d.iter_mut().for_each(|v| *v /= q as f64);
        for a in 0..h {
            for c in (a + 1)..h {
                let s = 0.5 * (d[a * h + c] + d[c * h + a]);
                d[a * h + c] = s;
                d[c * h + a] = s;
            }
        }

        let inv0 = if self.n_ref > 0 { 1.0 / t.sigma0_sq } else { 0.0 };
        let inv1 = if self.n_tgt > 0 { 1.0 / t.sigma_sq } else { 0.0 };
        let a_mat = &mut self.tmp_kk;
        for i in 0..k * k {
            a_mat[i] = self.gram_ref[i] * inv0 + self.gram_tgt[i] * inv1;
        }
        let rhs = &mut self.tmp_k;
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for bi in 0..q {
            let layout = &self.batches[bi];
            let b = &self.b[bi * h..(bi + 1) * h];
            for row in layout.start..layout.start + layout.len {
                let inv = if self.is_ref[row] { inv0 } else { inv1 };
                let zb: f64 = self.z[row * h..(row + 1) * h]
                    .iter()
                    .zip(b)
                    .map(|(a, b)| a * b)
                    .sum();
                let wr = (self.y_work[row] - zb) * inv;
                for (a, xv) in self.x[row * k..(row + 1) * k].iter().enumerate() {
                    rhs[a] += xv * wr;
                }
            }
        }
        cholesky_in_place(a_mat, k).map_err(|column| Error::RankDeficient { column })?;
        cholesky_solve_in_place(a_mat, k, rhs);
        let alpha = rhs.clone();

        let (mut ref_sum, mut tgt_sum) = (0.0, 0.0);
        for bi in 0..q {
            let layout = &self.batches[bi];
            let b = &self.b[bi * h..(bi + 1) * h];
            for row in layout.start..layout.start + layout.len {
                let e = self.y_work[row] - self.dot_x(row, &alpha) - self.dot_z(row, b);
                let contribution = e * e + self.v_diag[row];
                if self.is_ref[row] {
                    ref_sum += contribution;
                } else {
                    tgt_sum += contribution;
                }
            }
        }
        let sigma0_sq = if self.n_ref > 0 {
            ref_sum / self.n_ref as f64
        } else {
            t.sigma0_sq
        };
        let sigma_sq = if self.n_tgt > 0 {
            tgt_sum / self.n_tgt as f64
        } else {
            t.sigma_sq
        };
        Ok(Theta {
            alpha,
            sigma0_sq,
            sigma_sq,
            d,
        })
    }

    /// Σ_{i∈O} XᵢᵀWᵢXᵢ from the last E-step, as a row-major k×k matrix.
    ///
    /// Uses XᵀWX = XᵀR⁻¹X − PᵀΔP with P = ZᵀR⁻¹X, where Δ is the observed-batch
    /// conditional covariance of b.
    pub fn observed_information(&self, t: &Theta) -> Vec<f64> {
        let (h, k) = (self.h, self.k);
        let mut info = vec![0.0; k * k];
        let mut p_mat = vec![0.0; h * k];
        for (bi, layout) in self.batches.iter().enumerate() {
            if !layout.observed {
                continue;
            }
            p_mat.iter_mut().for_each(|v| *v = 0.0);
            for row in layout.start..layout.start + layout.len {
                let inv = 1.0 / self.row_var(row, t);
                let xr = &self.x[row * k..(row + 1) * k];
                let zr = &self.z[row * h..(row + 1) * h];
                for a in 0..k {
                    for c in 0..k {
                        info[a * k + c] += xr[a] * xr[c] * inv;
                    }
                    for e in 0..h {
                        p_mat[e * k + a] += zr[e] * xr[a] * inv;
                    }
                }
            }
            let dl = &self.delta[bi * h * h..(bi + 1) * h * h];
            for a in 0..k {
                for c in 0..k {
                    let mut s = 0.0;
                    for e in 0..h {
                        for f in 0..h {
                            s += p_mat[e * k + a] * dl[e * h + f] * p_mat[f * k + c];
                        }
                    }
                    info[a * k + c] -= s;
                }
            }
        }
        info
    }

    /// Starting values from available cases: OLS for α over observed rows,
    /// pooled within-batch residual variances for σ₀² and σ², and a
    /// method-of-moments between-batch variance for D (times the identity).
    pub fn initial_theta(&self) -> Result<Theta> {
        const FLOOR: f64 = 1e-6;
        let h = self.h;
        let alpha = self.available_case_alpha()?;

        let (mut ss_ref, mut n_ref, mut ss_tgt, mut n_tgt) = (0.0, 0usize, 0.0, 0usize);
        let mut means = Vec::new();
        let mut inv_sizes = Vec::new();
        for layout in self.batches.iter().filter(|b| b.observed) {
            let range = layout.start..layout.start + layout.len;
            let mean = range
                .clone()
                .map(|row| self.y[row] - self.dot_x(row, &alpha))
                .sum::<f64>()
                / layout.len as f64;
            means.push(mean);
            inv_sizes.push(1.0 / layout.len as f64);
            for row in range {
                let r = self.y[row] - self.dot_x(row, &alpha) - mean;
                if self.is_ref[row] {
                    ss_ref += r * r;
                    n_ref += 1;
                } else {
                    ss_tgt += r * r;
                    n_tgt += 1;
                }
            }
        }
        let sigma_sq = if n_tgt > 0 {
            (ss_tgt / n_tgt as f64).max(FLOOR)
        } else {
            (ss_ref / n_ref.max(1) as f64).max(FLOOR)
        };
        let sigma0_sq = if n_ref > 0 {
            (ss_ref / n_ref as f64).max(FLOOR)
        } else {
            sigma_sq
        };
        let n = means.len() as f64;
        let grand = means.iter().sum::<f64>() / n;
        let between = if means.len() > 1 {
            means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let within = sigma_sq * inv_sizes.iter().sum::<f64>() / n;
        let d0 = (between - within).max(FLOOR);
        let mut d = vec![0.0; h * h];
        for a in 0..h {
            d[a * h + a] = d0;
        }
        Ok(Theta {
            alpha,
            sigma0_sq,
            sigma_sq,
            d,
        })
    }
}

/// Sufficient statistics for a single random effect (h = 1).
///
/// Rows are split into reference (class 0) and target (class 1) rows. For
/// observed batches the statistics use responses centered at `x α₀`, with α₀
/// the available-case OLS fit, so that sums of squares do not lose precision
/// to large abundance levels. A missing batch needs only its design sums:
/// its residual in the CM step reduces to `x_j(α − α_new) + ψ r_j`.
struct ScalarStats {
    alpha0: Vec<f64>,
    /// Per batch and class (index `2 i + c`): row count, Σz², Σz y'.
    n: Vec<f64>,
    szz: Vec<f64>,
    szy: Vec<f64>,
    /// Σ z x (observed) and Σ x (missing), at `(2 i + c) k`.
    szx: Vec<f64>,
    sx: Vec<f64>,
    /// Σ z over all rows of a missing batch.
    zs: Vec<f64>,
    /// Per class: Gram matrices of observed and missing rows, Σ x y', Σ y'².
    g_obs: [Vec<f64>; 2],
    g_mis: [Vec<f64>; 2],
    sxy: [Vec<f64>; 2],
    syy: [f64; 2],
    n_obs: [f64; 2],
    n_mis: [f64; 2],
    observed: Vec<usize>,
    missing: Vec<usize>,
    psi: Vec<f64>,
    kappa: Vec<f64>,
    // scratch of length k
    bszx: [Vec<f64>; 2],
    psx: [Vec<f64>; 2],
    dn: Vec<f64>,
    da: Vec<f64>,
}

impl ScalarStats {
    fn new(eng: &Engine<'_>) -> Self {
        let (k, q) = (eng.k, eng.q);
        let alpha0 = eng.available_case_alpha().unwrap_or_else(|_| vec![0.0; k]);
        let mut st = ScalarStats {
            n: vec![0.0; 2 * q],
            szz: vec![0.0; 2 * q],
            szy: vec![0.0; 2 * q],
            szx: vec![0.0; 2 * q * k],
            sx: vec![0.0; 2 * q * k],
            zs: vec![0.0; q],
            g_obs: [vec![0.0; k * k], vec![0.0; k * k]],
            g_mis: [vec![0.0; k * k], vec![0.0; k * k]],
            sxy: [vec![0.0; k], vec![0.0; k]],
            syy: [0.0; 2],
            n_obs: [0.0; 2],
            n_mis: [0.0; 2],
            observed: (0..q).filter(|&i| eng.batches[i].observed).collect(),
            missing: (0..q).filter(|&i| !eng.batches[i].observed).collect(),
            psi: vec![0.0; q],
            kappa: vec![0.0; q],
            bszx: [vec![0.0; k], vec![0.0; k]],
            psx: [vec![0.0; k], vec![0.0; k]],
            dn: vec![0.0; k],
            da: vec![0.0; k],
            alpha0,
        };
        for (bi, layout) in eng.batches.iter().enumerate() {
            for row in layout.start..layout.start + layout.len {
                let c = if eng.is_ref[row] { 0 } else { 1 };
                let idx = 2 * bi + c;
                let xr = &eng.x[row * k..(row + 1) * k];
                let z = eng.z[row];
                st.n[idx] += 1.0;
                if layout.observed {
                    let y = eng.y[row] - eng.dot_x(row, &st.alpha0);
                    st.szz[idx] += z * z;
                    st.szy[idx] += z * y;
                    st.syy[c] += y * y;
                    st.n_obs[c] += 1.0;
                    for a in 0..k {
                        st.szx[idx * k + a] += z * xr[a];
                        st.sxy[c][a] += xr[a] * y;
                        for b in 0..k {
                            st.g_obs[c][a * k + b] += xr[a] * xr[b];
                        }
                    }
                } else {
                    st.zs[bi] += z;
                    st.n_mis[c] += 1.0;
                    for a in 0..k {
                        st.sx[idx * k + a] += xr[a];
                        for b in 0..k {
                            st.g_mis[c][a * k + b] += xr[a] * xr[b];
                        }
                    }
                }
            }
        }
        st
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(g: &[f64], v: &[f64]) -> f64 {
    let k = v.len();
    let mut s = 0.0;
    for a in 0..k {
        s += v[a] * dot(&g[a * k..(a + 1) * k], v);
    }
    s
}

impl Engine<'_> {
    fn available_case_alpha(&self) -> Result<Vec<f64>> {
        let k = self.k;
        let mut xtx = vec![0.0; k * k];
        let mut xty = vec![0.0; k];
        for layout in self.batches.iter().filter(|b| b.observed) {
            for row in layout.start..layout.start + layout.len {
                let xr = &self.x[row * k..(row + 1) * k];
                for a in 0..k {
                    xty[a] += xr[a] * self.y[row];
                    for c in 0..k {
                        xtx[a * k + c] += xr[a] * xr[c];
                    }
                }
            }
        }
        cholesky_in_place(&mut xtx, k).map_err(|column| Error::RankDeficient { column })?;
        cholesky_solve_in_place(&xtx, k, &mut xty);
        Ok(xty)
    }

    fn e_step_scalar(&mut self, st: &mut ScalarStats, t: &Theta) -> Result<f64> {
        let k = self.k;
        let d = t.d[0];
        let r = [t.sigma0_sq, t.sigma_sq];
        let inv = [1.0 / r[0], 1.0 / r[1]];
        let mut delta_a = std::mem::take(&mut st.dn);
        for (v, (a, b)) in delta_a.iter_mut().zip(t.alpha.iter().zip(&st.alpha0)) {
            *v = a - b;
        }
        self.clamped = 0;
        let mut loglik = 0.0;
        let mut ub = 0.0;
        let mut log_det_m = 0.0;
        let mut prod_m = 1.0;
        for (bi, layout) in self.batches.iter().enumerate() {
            let (i0, i1) = (2 * bi, 2 * bi + 1);
            if layout.observed {
                let s = st.szz[i0] * inv[0] + st.szz[i1] * inv[1];
                let u = (st.szy[i0] - dot(&st.szx[i0 * k..(i0 + 1) * k], &delta_a)) * inv[0]
                    + (st.szy[i1] - dot(&st.szx[i1 * k..(i1 + 1) * k], &delta_a)) * inv[1];
                let m = 1.0 + d * s;
                let b = d * u / m;
                self.b[bi] = b;
                self.delta[bi] = d / m;
                ub += u * b;
                prod_m *= m;
                if prod_m > 1e100 {
                    log_det_m += prod_m.ln();
                    prod_m = 1.0;
                }
                st.psi[bi] = 0.0;
                st.kappa[bi] = 0.0;
            } else {
                let p = layout.len as f64;
                let m_s = dot(&layout.x_mean, &t.alpha);
                let zs = st.zs[bi];
                let tr_r = st.n[i0] * r[0] + st.n[i1] * r[1];
                let v_s = (zs * zs * d + tr_r) / (p * p);
                let tilt = tilt_batch_mean(self.mech, m_s, v_s, layout.offset)?;
                if tilt.clamped {
                    self.clamped += 1;
                }
                loglik += tilt.log_prob;
                let (psi, kappa) = if v_s > 0.0 {
                    let pv = p * v_s;
                    ((tilt.mean - m_s) / pv, (tilt.var - v_s) / (pv * pv))
                } else {
                    (0.0, 0.0)
                };
                st.psi[bi] = psi;
                st.kappa[bi] = kappa;
                self.b[bi] = psi * d * zs;
                self.delta[bi] = d + kappa * (d * zs) * (d * zs);
            }
        }
        log_det_m += prod_m.ln();
        let mut quad = 0.0;
        let mut log_det_r = 0.0;
        for c in 0..2 {
            quad += (st.syy[c] - 2.0 * dot(&delta_a, &st.sxy[c]) + quad_form(&st.g_obs[c], &delta_a))
                * inv[c];
            if st.n_obs[c] > 0.0 {
                log_det_r += st.n_obs[c] * r[c].ln();
            }
        }
        st.dn = delta_a;
        let n_obs = st.n_obs[0] + st.n_obs[1];
        loglik -= 0.5 * (n_obs * LN_2PI + log_det_r + log_det_m + quad - ub);
        Ok(loglik)
    }

    fn cm_step_scalar(&mut self, st: &mut ScalarStats, t: &Theta) -> Result<Theta> {
        let (k, q) = (self.k, self.q);
        let r = [t.sigma0_sq, t.sigma_sq];
        let inv = [
            if self.n_ref > 0 { 1.0 / r[0] } else { 0.0 },
            if self.n_tgt > 0 { 1.0 / r[1] } else { 0.0 },
        ];
        let mut d_new = 0.0;
        let (mut bszy, mut bbz, mut ppn, mut kn) = ([0.0; 2], [0.0; 2], [0.0; 2], [0.0; 2]);
        let mut bszx = std::mem::take(&mut st.bszx);
        let mut psx = std::mem::take(&mut st.psx);
        for c in 0..2 {
            bszx[c].fill(0.0);
            psx[c].fill(0.0);
        }
        for &bi in &st.observed {
            let (b, dl) = (self.b[bi], self.delta[bi]);
            d_new += b * b + dl;
            for c in 0..2 {
                let idx = 2 * bi + c;
                bszy[c] += b * st.szy[idx];
                bbz[c] += (b * b + dl) * st.szz[idx];
                for (acc, v) in bszx[c].iter_mut().zip(&st.szx[idx * k..(idx + 1) * k]) {
                    *acc += b * v;
                }
            }
        }
        for &bi in &st.missing {
            let (b, dl) = (self.b[bi], self.delta[bi]);
            d_new += b * b + dl;
            let (psi, kappa) = (st.psi[bi], st.kappa[bi]);
            for c in 0..2 {
                let idx = 2 * bi + c;
                ppn[c] += psi * psi * st.n[idx];
                kn[c] += kappa * st.n[idx];
                for (acc, v) in psx[c].iter_mut().zip(&st.sx[idx * k..(idx + 1) * k]) {
                    *acc += psi * v;
                }
            }
        }
        d_new /= q as f64;

        let a_mat = &mut self.tmp_kk;
        for i in 0..k * k {
            a_mat[i] = self.gram_ref[i] * inv[0] + self.gram_tgt[i] * inv[1];
        }
        let rhs = &mut self.tmp_k;
        for a in 0..k {
            let mut v = 0.0;
            for c in 0..2 {
                let g_obs_a0 = dot(&st.g_obs[c][a * k..(a + 1) * k], &st.alpha0);
                let g_mis_a = dot(&st.g_mis[c][a * k..(a + 1) * k], &t.alpha);
                v += (st.sxy[c][a] + g_obs_a0 - bszx[c][a] + g_mis_a) * inv[c] + psx[c][a];
            }
            rhs[a] = v;
        }
        cholesky_in_place(a_mat, k).map_err(|column| Error::RankDeficient { column })?;
        cholesky_solve_in_place(a_mat, k, rhs);
        let alpha = rhs.clone();

        let (mut dn, mut da) = (std::mem::take(&mut st.dn), std::mem::take(&mut st.da));
        for a in 0..k {
            dn[a] = alpha[a] - st.alpha0[a];
            da[a] = t.alpha[a] - alpha[a];
        }
        let mut sums = [0.0; 2];
        for c in 0..2 {
            let n_mis = st.n_mis[c];
            sums[c] = st.syy[c] - 2.0 * dot(&dn, &st.sxy[c]) + quad_form(&st.g_obs[c], &dn)
                - 2.0 * bszy[c]
                + 2.0 * dot(&dn, &bszx[c])
                + bbz[c]
                + quad_form(&st.g_mis[c], &da)
                + 2.0 * r[c] * dot(&da, &psx[c])
                + r[c] * r[c] * (ppn[c] + kn[c])
                + n_mis * r[c];
        }
        st.dn = dn;
        st.da = da;
        st.bszx = bszx;
        st.psx = psx;
        Ok(Theta {
            alpha,
            sigma0_sq: if self.n_ref > 0 { sums[0] / self.n_ref as f64 } else { t.sigma0_sq },
            sigma_sq: if self.n_tgt > 0 { sums[1] / self.n_tgt as f64 } else { t.sigma_sq },
            d: vec![d_new],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MissingMechanism;
    use nalgebra::DMatrix;

    fn dataset() -> (FeatureBatchData, Vec<BatchDesign>) {
        let mut designs = Vec::new();
        let mut values = Vec::new();
        for i in 0..7 {
            let g = (i % 3) as f64;
            let x = DMatrix::from_row_slice(4, 3, &[
                1.0, 1.0, 0.0, 1.0, 0.0, g, 1.0, 0.0, 1.0, 1.0, 0.0, 0.5 * g,
            ]);
            let z = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 0.8, 1.2]);
            designs.push(BatchDesign::new(x, z, Some(0)).unwrap());
            let v: Vec<Option<f64>> = (0..4)
                .map(|j| {
                    let y = 10.0 + (i as f64 * 1.7 + j as f64 * 0.9).sin() * 2.0;
                    (!(i == 2 && j == 1) && !(i == 4 && j == 0)).then_some(y)
                })
                .collect();
            values.push(if i == 3 || i == 5 { vec![None; 4] } else { v });
        }
        (FeatureBatchData::new(values).unwrap(), designs)
    }

    #[test]
    fn scalar_path_matches_row_path() {
        let (data, designs) = dataset();
        for mech in [
            MissingMechanism::exponential(0.0, 0.1).unwrap(),
            MissingMechanism::logit(1.0, -0.3).unwrap(),
            MissingMechanism::ignorable(),
        ] {
            let mut fast = Engine::new(&data, &designs, &mech).unwrap();
            let mut slow = Engine::new(&data, &designs, &mech).unwrap();
            slow.scalar = None;
            assert!(fast.scalar.is_some());
            let mut t = fast.initial_theta().unwrap();
            for _ in 0..5 {
                let lf = fast.e_step(&t).unwrap();
                let ls = slow.e_step(&t).unwrap();
                assert!((lf - ls).abs() < 1e-9 * ls.abs().max(1.0), "{lf} vs {ls}");
                let nf = fast.cm_step(&t).unwrap();
                let ns = slow.cm_step(&t).unwrap();
                for (a, b) in nf.alpha.iter().zip(&ns.alpha) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
                assert!((nf.sigma0_sq - ns.sigma0_sq).abs() < 1e-10);
                assert!((nf.sigma_sq - ns.sigma_sq).abs() < 1e-10);
                assert!((nf.d[0] - ns.d[0]).abs() < 1e-10);
                t = nf;
            }
        }
    }
}
