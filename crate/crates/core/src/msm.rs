//! Marginal structural models fitted by stabilized inverse-probability
//! weighted least squares.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::causal::{beta_params, CausalEstimates, Estimate, InterventionWindow, Method};
use crate::data::ScoreSet;
use crate::error::{Error, Result};
use crate::regression::{ols, wls, Design, LinearFit};

/// Densities below this are treated as positivity violations.
pub const POSITIVITY_FLOOR: f64 = 1e-300;
/// Max/mean weight ratio above which the fit is flagged.
pub const EXTREME_WEIGHT_RATIO: f64 = 1000.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreatmentModelConfig {
    /// Adds squared outcome and confounder terms to the denominator model.
    pub quadratic: bool,
    /// Drops the outcome and confounders from the denominator model
    /// (a deliberately misspecified model for robustness checks).
    pub treatment_history_only: bool,
}

/// Gaussian linear model for the treatment at one occasion.
#[derive(Debug, Clone)]
pub struct GaussianRegression {
    pub fit: LinearFit,
    pub fitted: DVector<f64>,
}

impl GaussianRegression {
    fn new(design: &Design, y: &DVector<f64>, context: &str) -> Result<Self> {
        let fit = ols(design, y, context)?;
        if fit.resid_var <= 0.0 {
            return Err(Error::Invalid(format!("{context}: treatment is a deterministic function of its predictors")));
        }
        let fitted = y - &fit.residuals;
        Ok(Self { fit, fitted })
    }

    pub fn sd(&self) -> f64 {
        self.fit.resid_var.sqrt()
    }

    /// Log density of the observed treatment of person `i`.
    pub fn log_density(&self, i: usize) -> f64 {
        log_normal_density(self.fit.residuals[i], self.fit.resid_var)
    }
}

pub fn log_normal_density(x: f64, var: f64) -> f64 {
    -0.5 * (x * x / var + (2.0 * std::f64::consts::PI * var).ln())
}

#[derive(Debug, Clone)]
pub struct TreatmentTimeModel {
    pub time: usize,
    /// `A_t` on `A_{t-1}`, `Y_t` and the confounders at `t`.
    pub denominator: GaussianRegression,
    /// `A_t` on `A_{t-1}`.
    pub numerator: GaussianRegression,
    /// Correlation of the denominator residuals with `Y_t²`; far from zero
    /// when the treatment depends on the outcome nonlinearly.
    pub resid_corr_outcome_sq: f64,
}

#[derive(Debug, Clone)]
pub struct TreatmentModel {
    pub config: TreatmentModelConfig,
    pub times: Vec<TreatmentTimeModel>,
}

impl TreatmentModel {
    pub fn at(&self, t: usize) -> &TreatmentTimeModel {
        &self.times[t]
    }
}

pub(crate) fn col(scores: &ScoreSet, v: usize, t: usize) -> DVector<f64> {
    scores.block(v).column(t).into_owned()
}

pub(crate) fn col_name(scores: &ScoreSet, v: usize, t: usize) -> String {
    format!("{}_{}", scores.variables()[v].name, t)
}

/// Regressors of the denominator model at `t`: past treatment, current outcome
/// and current confounders.
pub(crate) fn denominator_design(scores: &ScoreSet, t: usize, config: TreatmentModelConfig) -> Design {
    let roles = scores.roles();
    let mut d = Design::with_intercept(scores.n_persons());
    if t >= 1 {
        d.push(col_name(scores, roles.treatment, t - 1), col(scores, roles.treatment, t - 1));
    }
    if config.treatment_history_only {
        return d;
    }
    let confounding: Vec<usize> = std::iter::once(roles.outcome).chain(roles.confounders.iter().copied()).collect();
    for &v in &confounding {
        d.push(col_name(scores, v, t), col(scores, v, t));
    }
    if config.quadratic {
        for &v in &confounding {
            d.push(format!("{}^2", col_name(scores, v, t)), col(scores, v, t).map(|x| x * x));
        }
    }
    d
}

pub(crate) fn numerator_design(scores: &ScoreSet, t: usize) -> Design {
    let a = scores.roles().treatment;
    let mut d = Design::with_intercept(scores.n_persons());
    if t >= 1 {
        d.push(col_name(scores, a, t - 1), col(scores, a, t - 1));
    }
    d
}

fn correlation(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let (mx, my) = (x.mean(), y.mean());
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Per-occasion treatment models for `t = 0..K-1`.
pub fn fit_treatment_models(scores: &ScoreSet, config: TreatmentModelConfig) -> Result<TreatmentModel> {
    let roles = scores.roles();
    let mut times = Vec::with_capacity(scores.k());
    for t in 0..scores.k() {
        let a = col(scores, roles.treatment, t);
        let den = GaussianRegression::new(
            &denominator_design(scores, t, config),
            &a,
            &format!("treatment model (denominator) at time {t}"),
        )?;
        let num = GaussianRegression::new(&numerator_design(scores, t), &a, &format!("treatment model (numerator) at time {t}"))?;
        let y2 = col(scores, roles.outcome, t).map(|y| y * y);
        let resid_corr_outcome_sq = correlation(&den.fit.residuals, &y2);
        times.push(TreatmentTimeModel {
            time: t,
            denominator: den,
            numerator: num,
            resid_corr_outcome_sq,
        });
    }
    Ok(TreatmentModel { config, times })
}

/// Treatment occasions weighted for outcome `m`.
pub fn weighted_times(window: &InterventionWindow, m: usize, include_baseline: bool) -> Vec<usize> {
    window
        .treatments_for(m)
        .filter(|&t| include_baseline || t > 0)
        .collect()
}

/// Stabilized weights for the regression of outcome `m`.
pub fn stabilized_weights(
    model: &TreatmentModel,
    m: usize,
    window: &InterventionWindow,
    include_baseline: bool,
) -> Result<DVector<f64>> {
    let n = model.times.first().map(|t| t.numerator.fitted.len()).unwrap_or(0);
    let ln_floor = POSITIVITY_FLOOR.ln();
    let mut log_w = DVector::zeros(n);
    for t in weighted_times(window, m, include_baseline) {
        let tm = model
            .times
            .get(t)
            .ok_or_else(|| Error::Config(format!("no treatment model at time {t}")))?;
        for i in 0..n {
            let den = tm.denominator.log_density(i);
            if den < ln_floor {
                return Err(Error::Positivity {
                    person: i,
                    time: t,
                    density: den.exp(),
                });
            }
            log_w[i] += tm.numerator.log_density(i) - den;
        }
    }
    Ok(log_w.map(f64::exp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub outcome: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub truncated_at: Option<f64>,
}

impl WeightSummary {
    pub fn of(outcome: usize, w: &DVector<f64>) -> Self {
        let n = w.len() as f64;
        let mean = w.mean();
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            outcome,
            mean,
            sd,
            min: w.min(),
            max: w.max(),
            truncated_at: None,
        }
    }

    pub fn is_extreme(&self) -> bool {
        self.max / self.mean > EXTREME_WEIGHT_RATIO
    }
}

/// Caps weights at the given percentile (in (0, 100]); returns the cap.
pub fn truncate_weights(w: &mut DVector<f64>, percentile: f64) -> f64 {
    let mut sorted: Vec<f64> = w.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    let cap = sorted[rank.clamp(1, sorted.len()) - 1];
    w.iter_mut().for_each(|x| *x = x.min(cap));
    cap
}

/// Weighted regressions of every outcome in the window on the treatment
/// history; `weights[j]` belongs to the `j`-th outcome of the window.
pub fn fit_msm(scores: &ScoreSet, weights: &[DVector<f64>], window: &InterventionWindow) -> Result<CausalEstimates> {
    let k = scores.k();
    window.validate(k)?;
    let outcomes: Vec<usize> = window.outcomes(k).collect();
    if weights.len() != outcomes.len() {
        return Err(Error::Invalid(format!("{} weight vectors for {} outcomes", weights.len(), outcomes.len())));
    }
    if weights.iter().flat_map(|w| w.iter()).any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Invalid("MSM weights must be positive and finite".into()));
    }
    let roles = scores.roles();
    let n = scores.n_persons();
    let mut tau = Vec::new();
    let mut se = Vec::new();
    let mut nuisance = Vec::new();
    let mut warnings = Vec::new();
    for (m, w) in outcomes.iter().copied().zip(weights) {
        let mut d = Design::with_intercept(n);
        for t in 0..window.first {
            d.push(format!("control_{m}_{t}"), col(scores, roles.treatment, t));
        }
        for t in window.treatments_for(m) {
            d.push(format!("beta_{m}_{t}"), col(scores, roles.treatment, t));
        }
        let fit = wls(&d, &col(scores, roles.outcome, m), w, &format!("MSM for outcome {m}"))?;
        let ses = fit.robust_se();
        nuisance.push(Estimate {
            name: format!("alpha_{m}"),
            estimate: fit.coef[0],
            se: ses[0],
        });
        for j in 1..=window.first {
            nuisance.push(Estimate {
                name: fit.names[j].clone(),
                estimate: fit.coef[j],
                se: ses[j],
            });
        }
        for j in window.first + 1..fit.names.len() {
            tau.push(fit.coef[j]);
            se.push(ses[j]);
        }
        let summary = WeightSummary::of(m, w);
        if summary.is_extreme() {
            warnings.push(format!(
                "extreme weights for outcome {m}: max/mean = {:.1}",
                summary.max / summary.mean
            ));
        }
    }
    Ok(CausalEstimates {
        method: Method::Msm,
        centering: scores.centering(),
        params: beta_params(k, window),
        tau,
        standard_errors: se,
        nuisance,
        absent: Vec::new(),
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmConfig {
    pub window: Option<InterventionWindow>,
    pub treatment: TreatmentModelConfig,
    /// Weight the first treatment of the panel as well.
    pub include_baseline: bool,
    /// Percentile at which weights are capped (diagnostics only).
    pub truncate_percentile: Option<f64>,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            window: None,
            treatment: TreatmentModelConfig::default(),
            include_baseline: true,
            truncate_percentile: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MsmResult {
    pub estimates: CausalEstimates,
    pub treatment_model: TreatmentModel,
    pub weights: Vec<WeightSummary>,
}

/// Treatment models, stabilized weights and weighted regressions in one call.
pub fn estimate_msm(scores: &ScoreSet, config: &MsmConfig) -> Result<MsmResult> {
    let k = scores.k();
    let window = config.window.unwrap_or_else(|| InterventionWindow::default_for(k));
    window.validate(k)?;
    let model = fit_treatment_models(scores, config.treatment)?;
    let mut weights = Vec::new();
    let mut summaries = Vec::new();
    for m in window.outcomes(k) {
        let mut w = stabilized_weights(&model, m, &window, config.include_baseline)?;
        let cap = config.truncate_percentile.map(|p| truncate_weights(&mut w, p));
        let mut s = WeightSummary::of(m, &w);
        s.truncated_at = cap;
        summaries.push(s);
        weights.push(w);
    }
    let estimates = fit_msm(scores, &weights, &window)?;
    Ok(MsmResult {
        estimates,
        treatment_model: model,
        weights: summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_schema, Centering};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scores_from(y: DMatrix<f64>, a: DMatrix<f64>, l: DMatrix<f64>) -> ScoreSet {
        ScoreSet::new(default_schema(), vec![y, a, l], Centering::TrueScores).unwrap()
    }

    fn noise(n: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn gaussian_density_matches_closed_form() {
        let direct = (-(1.0f64).powi(2) / 2.5).exp() / (2.0 * std::f64::consts::PI * 1.25).sqrt();
        assert!((log_normal_density(1.0, 1.25).exp() - direct).abs() < 1e-15);
        let den = (-(0.5f64).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let ratio = log_normal_density(1.0, 1.25).exp() / log_normal_density(0.5, 1.0).exp();
        assert!((ratio - direct / den).abs() < 1e-12);
    }

    #[test]
    fn weights_are_density_ratios_of_the_fitted_models() {
        let n = 400;
        let l = noise(n, 3, 1);
        let y = noise(n, 3, 2);
        let e = noise(n, 3, 3);
        let a = DMatrix::from_fn(n, 3, |i, t| 0.5 * l[(i, t)] + e[(i, t)]);
        let s = scores_from(y, a.clone(), l);
        let model = fit_treatment_models(&s, TreatmentModelConfig::default()).unwrap();
        let window = InterventionWindow::new(0, 1);
        let w = stabilized_weights(&model, 1, &window, true).unwrap();
        let tm = model.at(0);
        for i in [0, 17, 399] {
            let num_mean = tm.numerator.fit.coef[0];
            let den_mean = tm.denominator.fitted[i];
            let num = (-(a[(i, 0)] - num_mean).powi(2) / (2.0 * tm.numerator.fit.resid_var)).exp()
                / (2.0 * std::f64::consts::PI * tm.numerator.fit.resid_var).sqrt();
            let den = (-(a[(i, 0)] - den_mean).powi(2) / (2.0 * tm.denominator.fit.resid_var)).exp()
                / (2.0 * std::f64::consts::PI * tm.denominator.fit.resid_var).sqrt();
            assert!((w[i] - num / den).abs() < 1e-10 * (num / den));
        }
        // without the baseline factor outcome 1 has nothing to weight
        let w1 = stabilized_weights(&model, 1, &window, false).unwrap();
        assert!(w1.iter().all(|&x| x == 1.0));
        let w2 = stabilized_weights(&model, 2, &window, false).unwrap();
        assert!(w2.iter().any(|&x| (x - 1.0).abs() > 1e-3));
    }

    #[test]
    fn unconfounded_treatment_gives_near_unit_weights() {
        let n = 2000;
        let s = scores_from(noise(n, 3, 4), noise(n, 3, 5), noise(n, 3, 6));
        let r = estimate_msm(&s, &MsmConfig::default()).unwrap();
        for w in &r.weights {
            assert!((w.mean - 1.0).abs() < 0.02, "{w:?}");
            assert!(w.max < 1.5);
        }
    }

    #[test]
    fn unit_weights_reproduce_ols() {
        let n = 300;
        let a = noise(n, 3, 7);
        let e = noise(n, 3, 8);
        let y = DMatrix::from_fn(n, 3, |i, t| if t == 0 { e[(i, 0)] } else { 0.4 * a[(i, t - 1)] + e[(i, t)] });
        let s = scores_from(y.clone(), a.clone(), noise(n, 3, 9));
        let window = InterventionWindow::new(0, 1);
        let ones = vec![DVector::from_element(n, 1.0); 2];
        let est = fit_msm(&s, &ones, &window).unwrap();
        let mut d = Design::with_intercept(n);
        d.push("a0", a.column(0).into_owned());
        d.push("a1", a.column(1).into_owned());
        let direct = ols(&d, &y.column(2).into_owned(), "oracle").unwrap();
        assert!((est.estimate(&crate::causal::ParamName::beta(2, 0)).unwrap() - direct.coef[1]).abs() < 1e-10);
        assert!((est.estimate(&crate::causal::ParamName::beta(2, 1)).unwrap() - direct.coef[2]).abs() < 1e-10);
        assert_eq!(est.nuisance[0].name, "alpha_1");
    }

    #[test]
    fn scaling_outcomes_scales_estimates() {
        let n = 300;
        let a = noise(n, 4, 10);
        let l = noise(n, 4, 11);
        let y = noise(n, 4, 12) + &a * 0.3;
        let s1 = scores_from(y.clone(), a.clone(), l.clone());
        let s2 = scores_from(&y * 2.5, a, l);
        let r1 = estimate_msm(&s1, &MsmConfig::default()).unwrap().estimates;
        let r2 = estimate_msm(&s2, &MsmConfig::default()).unwrap().estimates;
        for (x, z) in r1.tau.iter().zip(&r2.tau) {
            assert!((2.5 * x - z).abs() < 1e-10 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn truncation_caps_at_percentile() {
        let mut w = DVector::from_iterator(100, (1..=100).map(|x| x as f64));
        let cap = truncate_weights(&mut w, 99.0);
        assert_eq!(cap, 99.0);
        assert_eq!(w.max(), 99.0);
    }

    #[test]
    fn collinear_treatment_model_is_reported() {
        let n = 50;
        let y = noise(n, 3, 13);
        let s = scores_from(y.clone(), noise(n, 3, 14), y);
        match fit_treatment_models(&s, TreatmentModelConfig::default()) {
            Err(Error::Collinear { columns, .. }) => assert!(columns.iter().any(|c| c == "L_0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn positivity_violation_names_person_and_time() {
        // a single outlier can sit at most about sqrt(N) residual sds away
        let n = 4000;
        let l = noise(n, 3, 15);
        let mut a = DMatrix::from_fn(n, 3, |i, t| l[(i, t)] + 1e-3 * ((i * 7 + t) % 5) as f64);
        a[(5, 0)] += 1.0;
        let s = scores_from(noise(n, 3, 16), a, l);
        let model = fit_treatment_models(&s, TreatmentModelConfig::default()).unwrap();
        match stabilized_weights(&model, 1, &InterventionWindow::new(0, 1), true) {
            Err(Error::Positivity { person, time, .. }) => assert_eq!((person, time), (5, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
