//! Per-variable random-intercept measurement model.
//!
//! A single variable observed at `K + 1` occasions is modelled as
//! `X_k = μ_k + I + X*_k` with `Var(I) = φ²` and a within-person process
//! following a time-varying AR(1) recursion:
//!
//! ```text
//! X*_0 ~ (0, ψ00),   X*_k = a_k X*_{k-1} + e_k,   Var(e_k) = σ²_k
//! Σ = φ² 11ᵗ + Ψ,    Ψ = T diag(ψ00, σ²_1, …, σ²_K) Tᵗ,   T = (I - A)⁻¹
//! ```
//!
//! where `A` holds `a_k` on its first subdiagonal. Means are saturated and
//! estimated by the sample means; the `2K + 2` covariance parameters are
//! fitted by minimizing the Wishart ML discrepancy with Fisher scoring.
//! The optimization is unconstrained: negative variance estimates are kept
//! and flagged as improper.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::column_moments;
use crate::error::{Error, Result};
use crate::spd::symmetrize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementParams {
    /// Temporal means `μ_0..μ_K`.
    pub mu: Vec<f64>,
    /// Trait variance `φ²`.
    pub phi2: f64,
    /// Variance of the initial within-person score.
    pub psi00: f64,
    /// Autoregressive coefficients `a_1..a_K`.
    pub ar_coefs: Vec<f64>,
    /// Innovation variances `σ²_1..σ²_K`.
    pub resid_vars: Vec<f64>,
}

impl MeasurementParams {
    pub fn n_times(&self) -> usize {
        self.ar_coefs.len() + 1
    }

    /// Covariance parameters packed as `(φ², ψ00, a_1..a_K, σ²_1..σ²_K)`.
    pub fn theta(&self) -> DVector<f64> {
        let k = self.ar_coefs.len();
        let mut th = DVector::zeros(2 * k + 2);
        th[0] = self.phi2;
        th[1] = self.psi00;
        for j in 0..k {
            th[2 + j] = self.ar_coefs[j];
            th[2 + k + j] = self.resid_vars[j];
        }
        th
    }

    pub fn from_theta(mu: Vec<f64>, theta: &DVector<f64>) -> Self {
        let k = (theta.len() - 2) / 2;
        Self {
            mu,
            phi2: theta[0],
            psi00: theta[1],
            ar_coefs: theta.rows(2, k).iter().copied().collect(),
            resid_vars: theta.rows(2 + k, k).iter().copied().collect(),
        }
    }

    pub fn is_proper(&self) -> bool {
        self.phi2 >= 0.0 && self.psi00 >= 0.0 && self.resid_vars.iter().all(|&s| s >= 0.0)
    }

    fn check(&self) -> Result<()> {
        let t = self.n_times();
        if self.resid_vars.len() != t - 1 || self.mu.len() != t {
            return Err(Error::Invalid(format!(
                "inconsistent parameter lengths: mu {}, a {}, σ² {}",
                self.mu.len(),
                self.ar_coefs.len(),
                self.resid_vars.len()
            )));
        }
        Ok(())
    }
}

/// `T = (I - A)⁻¹` with `T[k][j] = ∏_{t=j+1}^{k} a_t` for `j ≤ k`.
fn propagation(ar: &[f64]) -> DMatrix<f64> {
    let n = ar.len() + 1;
    let mut t = DMatrix::zeros(n, n);
    for j in 0..n {
        t[(j, j)] = 1.0;
        for k in j + 1..n {
            t[(k, j)] = t[(k - 1, j)] * ar[k - 1];
        }
    }
    t
}

/// Within-person covariance `Ψ` from the AR(1) recursion.
pub fn within_covariance(params: &MeasurementParams) -> DMatrix<f64> {
    let t = propagation(&params.ar_coefs);
    let mut d = Vec::with_capacity(params.n_times());
    d.push(params.psi00);
    d.extend_from_slice(&params.resid_vars);
    let mut td = t.clone();
    for (j, mut col) in td.column_iter_mut().enumerate() {
        col *= d[j];
    }
    symmetrize(&(td * t.transpose()))
}

/// Model-implied covariance `Σ = φ² 11ᵗ + Ψ`.
///
/// For improper parameter values the result need not be positive definite,
/// so a plain matrix is returned.
pub fn implied_sigma(params: &MeasurementParams) -> DMatrix<f64> {
    let mut sigma = within_covariance(params);
    sigma.add_scalar_mut(params.phi2);
    sigma
}

/// `∂Σ/∂θ_j` for each packed parameter.
fn sigma_derivatives(theta: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let k = (theta.len() - 2) / 2;
    let n = k + 1;
    let ar: Vec<f64> = theta.rows(2, k).iter().copied().collect();
    let t = propagation(&ar);
    let mut d = DVector::zeros(n);
    d[0] = theta[1];
    d.rows_mut(1, k).copy_from(&theta.rows(2 + k, k));

    let mut out = Vec::with_capacity(theta.len());
    out.push(DMatrix::from_element(n, n, 1.0));
    let col0 = t.column(0);
    out.push(&col0 * col0.transpose());
    // D Tᵗ, shared by the AR derivatives
    let mut dtt = t.transpose();
    for (j, mut row) in dtt.row_iter_mut().enumerate() {
        row *= d[j];
    }
    for j in 1..=k {
        // ∂T/∂a_j = T[:, j] T[j-1, :]
        let dt = t.column(j) * t.row(j - 1);
        let g = dt * &dtt;
        out.push(&g + g.transpose());
    }
    for j in 1..=k {
        let c = t.column(j);
        out.push(&c * c.transpose());
    }
    out
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<(f64, Cholesky<f64, nalgebra::Dyn>)> {
    let chol = Cholesky::new(m.clone())?;
    let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Some((ld, chol))
}

/// Wishart ML discrepancy `F = ln|Σ| + tr(SΣ⁻¹) − ln|S| − p`.
pub fn ml_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != sigma.shape() || s.nrows() != s.ncols() {
        return Err(Error::Invalid("S and Σ must be square and of equal size".into()));
    }
    let (ld_s, _) = log_det_spd(s).ok_or_else(|| singular("sample covariance S", s))?;
    let (ld_sigma, chol) = log_det_spd(sigma).ok_or_else(|| singular("implied covariance Σ", sigma))?;
    let tr = chol.solve(s).trace();
    Ok(ld_sigma + tr - ld_s - s.nrows() as f64)
}

fn singular(what: &str, m: &DMatrix<f64>) -> Error {
    Error::Singular {
        context: format!("{what} is not positive definite"),
        eigenvalue: nalgebra::SymmetricEigen::new(symmetrize(m)).eigenvalues.min(),
        floor: 0.0,
    }
}

/// Discrepancy, gradient and Fisher information at `theta`, or `None` when
/// the implied covariance is not positive definite.
struct Evaluation {
    f: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate(s: &DMatrix<f64>, ld_s: f64, mu: &[f64], theta: &DVector<f64>) -> Option<Evaluation> {
    let params = MeasurementParams::from_theta(mu.to_vec(), theta);
    let sigma = implied_sigma(&params);
    let (ld_sigma, chol) = log_det_spd(&sigma)?;
    let inv = symmetrize(&chol.inverse());
    let p = s.nrows() as f64;
    let f = ld_sigma + (&inv * s).trace() - ld_s - p;
    let derivs = sigma_derivatives(theta);
    // Σ⁻¹(Σ − S)Σ⁻¹
    let core = &inv * (&sigma - s) * &inv;
    let grad = DVector::from_iterator(derivs.len(), derivs.iter().map(|d| core.component_mul(d).sum()));
    let scaled: Vec<DMatrix<f64>> = derivs.iter().map(|d| &inv * d).collect();
    let m = derivs.len();
    let mut info = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            // tr(Σ⁻¹Σ_a Σ⁻¹Σ_b) = sum((Σ⁻¹Σ_a) ∘ (Σ⁻¹Σ_b)ᵗ)
            let v = scaled[a].component_mul(&scaled[b].transpose()).sum();
            info[(a, b)] = v;
            info[(b, a)] = v;
        }
    }
    Some(Evaluation { f, grad, info })
}

/// Analytic gradient of the ML discrepancy with respect to the packed
/// covariance parameters.
pub fn ml_gradient(s: &DMatrix<f64>, params: &MeasurementParams) -> Result<DVector<f64>> {
    params.check()?;
    let (ld_s, _) = log_det_spd(s).ok_or_else(|| singular("sample covariance S", s))?;
    evaluate(s, ld_s, &params.mu, &params.theta())
        .map(|e| e.grad)
        .ok_or_else(|| singular("implied covariance Σ", &implied_sigma(params)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_f_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            relative_f_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub chi_square: f64,
    pub df: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitIndices {
    pub cfi: f64,
    pub rmsea: f64,
    pub srmr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFit {
    pub params: MeasurementParams,
    #[serde(skip)]
    pub implied_sigma: DMatrix<f64>,
    #[serde(skip)]
    pub sample_cov: DMatrix<f64>,
    pub n_persons: usize,
    pub f_ml: f64,
    /// `(N − 1) · F_ML`.
    pub chi_square: f64,
    /// `(K+1)(K+2)/2 − (2K + 2)`; means are saturated.
    pub df: usize,
    pub baseline: ChiSquare,
    pub cfi: f64,
    pub rmsea: f64,
    pub srmr: f64,
    pub converged: bool,
    pub improper: bool,
    pub n_iterations: usize,
    pub gradient_max_norm: f64,
}

impl MeasurementFit {
    pub fn usable(&self) -> bool {
        self.converged && !self.improper
    }
}

/// Degrees of freedom for `K + 1` occasions.
pub fn model_df(n_times: usize) -> usize {
    n_times * (n_times + 1) / 2 - 2 * n_times
}

/// Method-of-moments starting values.
fn starting_theta(s: &DMatrix<f64>) -> DVector<f64> {
    let n = s.nrows();
    let k = n - 1;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..i {
            off += s[(i, j)];
        }
    }
    let phi2 = (off / (n * (n - 1) / 2) as f64).max(0.01);
    let psi00 = 0.5 * s[(0, 0)];
    let mut th = DVector::zeros(2 * k + 2);
    th[0] = phi2;
    th[1] = psi00;
    let mut v_prev = psi00;
    for j in 1..=k {
        let a = s[(j, j - 1)] / (s[(j, j)] * s[(j - 1, j - 1)]).sqrt();
        let target = s[(j, j)] - phi2;
        let sigma2 = (target - a * a * v_prev).max(0.05 * s[(j, j)]);
        th[1 + j] = a;
        th[1 + k + j] = sigma2;
        v_prev = a * a * v_prev + sigma2;
    }
    th
}

/// Fits the measurement model to one variable's `N × (K+1)` block.
pub fn fit_measurement(series: &DMatrix<f64>, options: &FitOptions) -> Result<MeasurementFit> {
    let (n, t) = series.shape();
    if t < 3 {
        return Err(Error::Identification(format!("{t} occasions; K >= 2 is required")));
    }
    let n_params = 2 * t;
    if n <= n_params {
        return Err(Error::Invalid(format!("{n} persons for {n_params} covariance parameters")));
    }
    let (mean, s) = column_moments(series)?;
    let mu: Vec<f64> = mean.iter().copied().collect();
    let (ld_s, _) = log_det_spd(&s).ok_or_else(|| singular("sample covariance S", &s))?;

    let mut theta = starting_theta(&s);
    let mut eval = evaluate(&s, ld_s, &mu, &theta)
        .ok_or_else(|| Error::Invalid("starting values give a non-positive-definite Σ".into()))?;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iterations {
        let gmax = eval.grad.amax();
        if gmax < options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match eval.info.clone().lu().solve(&eval.grad) {
            Some(step) if step.iter().all(|x| x.is_finite()) => step,
            _ => eval.grad.clone(),
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &theta - &step * scale;
            if let Some(e) = evaluate(&s, ld_s, &mu, &candidate) {
                if e.f <= eval.f + 1e-12 * eval.f.abs().max(1.0) {
                    accepted = Some((candidate, e));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, next)) = accepted else {
            break;
        };
        let rel_change = (eval.f - next.f).abs() / eval.f.abs().max(1e-300);
        theta = candidate;
        eval = next;
        if rel_change < options.relative_f_tolerance && eval.grad.amax() < options.gradient_tolerance {
            converged = true;
            break;
        }
    }
    if !converged && eval.grad.amax() < options.gradient_tolerance {
        converged = true;
    }

    let params = MeasurementParams::from_theta(mu, &theta);
    let sigma = implied_sigma(&params);
    let df = model_df(t);
    let chi_square = (n as f64 - 1.0) * eval.f.max(0.0);
    let baseline = independence_chi_square(&s, n)?;
    let model = ChiSquare { chi_square, df };
    let idx = fit_indices(model, baseline, n, &s, &sigma);
    Ok(MeasurementFit {
        improper: !params.is_proper(),
        params,
        implied_sigma: sigma,
        sample_cov: s,
        n_persons: n,
        f_ml: eval.f,
        chi_square,
        df,
        baseline,
        cfi: idx.cfi,
        rmsea: idx.rmsea,
        srmr: idx.srmr,
        converged,
        n_iterations: iterations,
        gradient_max_norm: eval.grad.amax(),
    })
}

/// Chi-square of the independence (diagonal Σ, saturated means) model.
pub fn independence_chi_square(s: &DMatrix<f64>, n: usize) -> Result<ChiSquare> {
    let p = s.nrows();
    let diag = DMatrix::from_diagonal(&s.diagonal());
    let f = ml_discrepancy(s, &diag)?;
    Ok(ChiSquare {
        chi_square: (n as f64 - 1.0) * f.max(0.0),
        df: p * (p - 1) / 2,
    })
}

/// Root mean square of standardized covariance residuals over the lower
/// triangle (diagonal included).
pub fn srmr(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    let mut acc = 0.0;
    for i in 0..p {
        for j in 0..=i {
            let r = (s[(i, j)] - sigma[(i, j)]) / (s[(i, i)] * s[(j, j)]).sqrt();
            acc += r * r;
        }
    }
    (acc / (p * (p + 1) / 2) as f64).sqrt()
}

/// CFI and RMSEA (Hu & Bentler conventions) plus SRMR.
///
/// With `df = 0` the model is saturated: CFI is 1 and RMSEA is 0.
pub fn fit_indices(
    model: ChiSquare,
    baseline: ChiSquare,
    n: usize,
    s: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> FitIndices {
    let (cfi, rmsea) = cfi_rmsea(model, baseline, n);
    FitIndices {
        cfi,
        rmsea,
        srmr: srmr(s, sigma),
    }
}

pub fn cfi_rmsea(model: ChiSquare, baseline: ChiSquare, n: usize) -> (f64, f64) {
    if model.df == 0 {
        return (1.0, 0.0);
    }
    let excess = (model.chi_square - model.df as f64).max(0.0);
    let base_excess = baseline.chi_square - baseline.df as f64;
    let denom = excess.max(base_excess).max(0.0);
    let cfi = if denom > 0.0 { 1.0 - excess / denom } else { 1.0 };
    let rmsea = (excess / (model.df as f64 * (n as f64 - 1.0))).sqrt();
    (cfi.clamp(0.0, 1.0), rmsea)
}

/// Draws an `N × (K+1)` block from the measurement model. Improper
/// parameters are rejected.
pub fn simulate_series<R: Rng + ?Sized>(params: &MeasurementParams, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    params.check()?;
    if !params.is_proper() {
        return Err(Error::Invalid("cannot simulate from improper parameters".into()));
    }
    let t = params.n_times();
    let mut out = DMatrix::zeros(n, t);
    for i in 0..n {
        let trait_score = params.phi2.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut w = params.psi00.sqrt() * rng.sample::<f64, _>(StandardNormal);
        out[(i, 0)] = params.mu[0] + trait_score + w;
        for k in 1..t {
            w = params.ar_coefs[k - 1] * w + params.resid_vars[k - 1].sqrt() * rng.sample::<f64, _>(StandardNormal);
            out[(i, k)] = params.mu[k] + trait_score + w;
        }
    }
    Ok(out)
}
