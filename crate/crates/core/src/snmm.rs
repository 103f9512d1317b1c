//! Linear structural nested mean models estimated by G-estimation.
//!
//! For every treatment occasion `t` of the window and every later outcome
//! `m`, the blipped-down outcome `U_{t,m}(τ) = Y_m − Σ_{s=t}^{m−1} blip_{m,s}`
//! must be mean-independent of `A_t` given the history before `A_t`. The
//! estimating function pairs the residual of `U_{t,m}` from the outcome
//! nuisance model with a centered `d`-vector built from the treatment
//! nuisance model, each component scaled by the reciprocal of its residual
//! variance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::causal::{CausalEstimates, InterventionWindow, Method, ParamName};
use crate::data::ScoreSet;
use crate::error::{Error, Result};
use crate::msm::{col, col_name, fit_treatment_models, TreatmentModel, TreatmentModelConfig};
use crate::regression::{ols, Design, Projector};

/// Floor of the per-component residual variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// An outcome is unidentified when its earlier values explain it this well.
const DEPENDENCE_R2: f64 = 1.0 - 1e-10;

/// Regressors of the conditional-mean (outcome) nuisance model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeModel {
    /// Intercept, `Y_0..Y_t`, confounders `0..t`, `A_0..A_{t−1}`.
    #[default]
    FullHistory,
    /// Full history plus squares of the current outcome and confounders.
    FullHistoryQuadratic,
    /// Intercept and past treatments only.
    TreatmentHistoryOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuisanceConfig {
    /// Treatment model (model A).
    pub treatment: TreatmentModelConfig,
    /// Conditional mean of the blipped-down outcome (model B).
    pub outcome: OutcomeModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnmmConfig {
    pub window: Option<InterventionWindow>,
    /// Effect modification of every blip by each confounder.
    pub interactions: bool,
    pub nuisance: NuisanceConfig,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SnmmConfig {
    fn default() -> Self {
        Self {
            window: None,
            interactions: false,
            nuisance: NuisanceConfig::default(),
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Term {
    outcome: usize,
    treatment: usize,
    /// Variable index of the modifying confounder.
    modifier: Option<usize>,
}

/// Parameterization of the blips: `(β_{ms} + Σ_v γ_{msv} L_{v,s}) A_s`.
#[derive(Debug, Clone)]
pub struct BlipSpec {
    pub window: InterventionWindow,
    pub include_interactions: bool,
    terms: Vec<Term>,
    names: Vec<ParamName>,
}

impl BlipSpec {
    pub fn new(scores: &ScoreSet, window: InterventionWindow, include_interactions: bool) -> Result<Self> {
        let outcomes: Vec<usize> = window.outcomes(scores.k()).collect();
        Self::for_outcomes(scores, window, include_interactions, &outcomes)
    }

    /// Spec restricted to a subset of the window's outcomes.
    pub fn for_outcomes(
        scores: &ScoreSet,
        window: InterventionWindow,
        include_interactions: bool,
        outcomes: &[usize],
    ) -> Result<Self> {
        let k = scores.k();
        window.validate(k)?;
        if window.last + 1 != k {
            return Err(Error::Config(format!(
                "G-estimation needs blips for every later treatment; the window must end at time {}",
                k - 1
            )));
        }
        let modifiers: Vec<usize> = if include_interactions {
            scores.roles().confounders.clone()
        } else {
            Vec::new()
        };
        let mut terms = Vec::new();
        let mut names = Vec::new();
        for m in window.outcomes(k).filter(|m| outcomes.contains(m)) {
            for s in window.treatments_for(m) {
                terms.push(Term {
                    outcome: m,
                    treatment: s,
                    modifier: None,
                });
                names.push(ParamName::beta(m, s));
                for &v in &modifiers {
                    terms.push(Term {
                        outcome: m,
                        treatment: s,
                        modifier: Some(v),
                    });
                    names.push(ParamName::gamma(m, s, scores.variables()[v].name.clone()));
                }
            }
        }
        Ok(Self {
            window,
            include_interactions,
            terms,
            names,
        })
    }

    pub fn params(&self) -> &[ParamName] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.terms.len()
    }

    pub fn outcomes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.terms.iter().map(|t| t.outcome).collect();
        out.dedup();
        out
    }

    /// Parameters entering `U_{t,m}`.
    fn terms_for(&self, t: usize, m: usize) -> Vec<usize> {
        (0..self.terms.len())
            .filter(|&j| self.terms[j].outcome == m && self.terms[j].treatment >= t)
            .collect()
    }

    /// `(t, m)` pairs of the estimating function.
    fn components(&self) -> Vec<(usize, usize)> {
        let outcomes = self.outcomes();
        (self.window.first..=self.window.last)
            .flat_map(|t| outcomes.iter().filter(move |&&m| m > t).map(move |&m| (t, m)))
            .collect()
    }
}

/// One blip: `(β + Σ γ_v l_v) · a`.
pub fn blip(a: f64, modifiers: &[f64], beta: f64, gammas: &[f64]) -> f64 {
    (beta + gammas.iter().zip(modifiers).map(|(g, l)| g * l).sum::<f64>()) * a
}

/// Column multiplying parameter `j` inside the blips: `A_s` or `L_{v,s} A_s`.
fn feature(scores: &ScoreSet, term: &Term) -> DVector<f64> {
    let a = col(scores, scores.roles().treatment, term.treatment);
    match term.modifier {
        None => a,
        Some(v) => a.component_mul(&col(scores, v, term.treatment)),
    }
}

/// Blipped-down outcomes `U_{t,m}(τ)` for every outcome `m > t` of the spec.
pub fn compute_u(scores: &ScoreSet, spec: &BlipSpec, tau: &DVector<f64>, t: usize) -> Vec<(usize, DVector<f64>)> {
    let y = scores.roles().outcome;
    spec.outcomes()
        .into_iter()
        .filter(|&m| m > t)
        .map(|m| {
            let mut u = col(scores, y, m);
            for j in spec.terms_for(t, m) {
                u -= feature(scores, &spec.terms[j]) * tau[j];
            }
            (m, u)
        })
        .collect()
}

/// History available just before `A_t`.
pub fn history_design(scores: &ScoreSet, t: usize, model: OutcomeModel) -> Design {
    let roles = scores.roles();
    let mut d = Design::with_intercept(scores.n_persons());
    let confounding: Vec<usize> = std::iter::once(roles.outcome).chain(roles.confounders.iter().copied()).collect();
    if model != OutcomeModel::TreatmentHistoryOnly {
        for s in 0..=t {
            for &v in &confounding {
                d.push(col_name(scores, v, s), col(scores, v, s));
            }
        }
    }
    for s in 0..t {
        d.push(col_name(scores, roles.treatment, s), col(scores, roles.treatment, s));
    }
    if model == OutcomeModel::FullHistoryQuadratic {
        for &v in &confounding {
            d.push(format!("{}^2", col_name(scores, v, t)), col(scores, v, t).map(|x| x * x));
        }
    }
    d
}

/// Nuisance quantities shared by all components at one treatment occasion.
struct TimeNuisance {
    /// `A_t` minus its treatment-model mean.
    eps: DVector<f64>,
    /// `A_t` residualized on the full history (for `d` of later blips).
    ra: DVector<f64>,
    outcome: Projector,
    outcome_names: Vec<String>,
}

impl TimeNuisance {
    fn new(scores: &ScoreSet, t: usize, treatment: &TreatmentModel, model: OutcomeModel) -> Result<Self> {
        let eps = treatment.at(t).denominator.fit.residuals.clone();
        let full = Projector::new(
            &history_design(scores, t, OutcomeModel::FullHistory),
            &format!("history before treatment {t}"),
        )?;
        let a = col(scores, scores.roles().treatment, t);
        let ra = full.residualize(&DMatrix::from_column_slice(a.len(), 1, a.as_slice())).0.column(0).into_owned();
        let design = history_design(scores, t, model);
        let outcome = Projector::new(&design, &format!("outcome nuisance model at time {t}"))?;
        Ok(Self {
            eps,
            ra,
            outcome,
            outcome_names: design.names,
        })
    }

    /// Centered `d`-columns for the parameters `terms` at occasion `t`.
    fn d_matrix(&self, scores: &ScoreSet, spec: &BlipSpec, t: usize, terms: &[usize]) -> DMatrix<f64> {
        let n = self.eps.len();
        let raa = self.ra.norm_squared();
        let mut d = DMatrix::zeros(n, terms.len());
        for (q, &j) in terms.iter().enumerate() {
            let term = &spec.terms[j];
            let column = if term.treatment == t {
                match term.modifier {
                    None => -&self.eps,
                    Some(v) => -self.eps.component_mul(&col(scores, v, t)),
                }
            } else {
                // E[F | H_t, A_t] − E[F | H_t] by its linear projection on A_t
                let c = if raa > 0.0 { self.ra.dot(&feature(scores, term)) / raa } else { 0.0 };
                &self.eps * -c
            };
            d.set_column(q, &column);
        }
        d
    }
}

/// Sufficient statistics of one `(t, m)` component; `R(τ) = r0 − rF τ`.
#[derive(Debug, Clone)]
struct Component {
    t: usize,
    m: usize,
    terms: Vec<usize>,
    r0r0: f64,
    rf_r0: DVector<f64>,
    rf_rf: DMatrix<f64>,
    d_r0: DVector<f64>,
    d_rf: DMatrix<f64>,
}

impl Component {
    fn tau_q(&self, tau: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.terms.len(), self.terms.iter().map(|&j| tau[j]))
    }

    fn variance(&self, tau: &DVector<f64>, n: usize) -> f64 {
        let tq = self.tau_q(tau);
        let ss = self.r0r0 - 2.0 * tq.dot(&self.rf_r0) + tq.dot(&(&self.rf_rf * &tq));
        (ss / n as f64).max(VARIANCE_FLOOR)
    }
}

struct ComponentArrays {
    r0: DVector<f64>,
    rf: DMatrix<f64>,
    d: DMatrix<f64>,
    coef: DMatrix<f64>,
}

fn component_arrays(scores: &ScoreSet, spec: &BlipSpec, tn: &TimeNuisance, t: usize, m: usize, terms: &[usize]) -> ComponentArrays {
    let n = scores.n_persons();
    let mut z = DMatrix::zeros(n, 1 + terms.len());
    z.set_column(0, &col(scores, scores.roles().outcome, m));
    for (q, &j) in terms.iter().enumerate() {
        z.set_column(1 + q, &feature(scores, &spec.terms[j]));
    }
    let (res, coef) = tn.outcome.residualize(&z);
    ComponentArrays {
        r0: res.column(0).into_owned(),
        rf: res.columns(1, terms.len()).into_owned(),
        d: tn.d_matrix(scores, spec, t, terms),
        coef,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonStep {
    pub iteration: usize,
    pub g_norm: f64,
    pub tau_norm: f64,
    pub step_norm: f64,
}

/// Outcome nuisance regression of `U_{t,m}` at the final estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRegression {
    pub time: usize,
    pub outcome: usize,
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub r_squared: f64,
    /// Residual variance `V_{t,m}` used in the estimating function.
    pub variance: f64,
}

/// The G-estimation problem with all nuisance fits done; cheap to evaluate
/// at any `τ`.
pub struct GEstimator<'a> {
    scores: &'a ScoreSet,
    spec: BlipSpec,
    config: NuisanceConfig,
    treatment_model: TreatmentModel,
    components: Vec<Component>,
}

impl<'a> GEstimator<'a> {
    pub fn prepare(scores: &'a ScoreSet, spec: BlipSpec, config: NuisanceConfig) -> Result<Self> {
        if spec.n_params() == 0 {
            return Err(Error::Config("no identifiable blip parameters".into()));
        }
        let treatment_model = fit_treatment_models(scores, config.treatment)?;
        let mut components = Vec::new();
        let comps = spec.components();
        for t in spec.window.first..=spec.window.last {
            let tn = TimeNuisance::new(scores, t, &treatment_model, config.outcome)?;
            for &(_, m) in comps.iter().filter(|c| c.0 == t) {
                let terms = spec.terms_for(t, m);
                let arr = component_arrays(scores, &spec, &tn, t, m, &terms);
                components.push(Component {
                    t,
                    m,
                    r0r0: arr.r0.norm_squared(),
                    rf_r0: arr.rf.tr_mul(&arr.r0),
                    rf_rf: arr.rf.tr_mul(&arr.rf),
                    d_r0: arr.d.tr_mul(&arr.r0),
                    d_rf: arr.d.tr_mul(&arr.rf),
                    terms,
                });
            }
        }
        Ok(Self {
            scores,
            spec,
            config,
            treatment_model,
            components,
        })
    }

    pub fn spec(&self) -> &BlipSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Residual variances `V_{t,m}(τ)` in component order.
    pub fn variances(&self, tau: &DVector<f64>) -> Vec<f64> {
        let n = self.scores.n_persons();
        self.components.iter().map(|c| c.variance(tau, n)).collect()
    }

    /// Estimating function `ḡ(τ)` for fixed variances.
    pub fn value(&self, tau: &DVector<f64>, v: &[f64]) -> DVector<f64> {
        let n = self.scores.n_persons() as f64;
        let mut g = DVector::zeros(self.n_params());
        for (c, &vc) in self.components.iter().zip(v) {
            let r = &c.d_r0 - &c.d_rf * c.tau_q(tau);
            for (q, &j) in c.terms.iter().enumerate() {
                g[j] += r[q] / (vc * n);
            }
        }
        g
    }

    /// `∂ḡ/∂τ` for fixed variances (exact, `ḡ` is affine in `τ`).
    pub fn jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let n = self.scores.n_persons() as f64;
        let p = self.n_params();
        let mut jac = DMatrix::zeros(p, p);
        for (c, &vc) in self.components.iter().zip(v) {
            for (a, &ja) in c.terms.iter().enumerate() {
                for (b, &jb) in c.terms.iter().enumerate() {
                    jac[(ja, jb)] -= c.d_rf[(a, b)] / (vc * n);
                }
            }
        }
        jac
    }

    /// Newton–Raphson from `τ = 0`, re-estimating the variances each step.
    pub fn solve(&self, max_iterations: usize, tolerance: f64) -> Result<(DVector<f64>, Vec<NewtonStep>)> {
        let p = self.n_params();
        let mut tau = DVector::zeros(p);
        let mut trace = Vec::new();
        for iteration in 0..=max_iterations {
            let v = self.variances(&tau);
            let g = self.value(&tau, &v);
            let g_norm = g.norm();
            if g_norm < tolerance * (1.0 + tau.norm()) {
                trace.push(NewtonStep {
                    iteration,
                    g_norm,
                    tau_norm: tau.norm(),
                    step_norm: 0.0,
                });
                return Ok((tau, trace));
            }
            if iteration == max_iterations {
                break;
            }
            let jac = self.jacobian(&v);
            let sv = jac.clone().svd(false, false).singular_values;
            if !(sv.min() > 1e-12 * sv.max()) {
                return Err(Error::GEstimation {
                    reason: format!("singular Jacobian (condition {:e})", sv.max() / sv.min()),
                    singular: true,
                    trace,
                });
            }
            let step = jac.lu().solve(&g).ok_or_else(|| Error::GEstimation {
                reason: "singular Jacobian".into(),
                singular: true,
                trace: trace.clone(),
            })?;
            tau -= &step;
            trace.push(NewtonStep {
                iteration,
                g_norm,
                tau_norm: tau.norm(),
                step_norm: step.norm(),
            });
        }
        Err(Error::GEstimation {
            reason: format!("no convergence after {max_iterations} Newton iterations"),
            singular: false,
            trace,
        })
    }

    /// Sandwich covariance with nuisance fits treated as fixed, and the
    /// outcome nuisance regressions at `tau`.
    pub fn sandwich(&self, tau: &DVector<f64>) -> Result<(DMatrix<f64>, Vec<OutcomeRegression>)> {
        let scores = self.scores;
        let n = scores.n_persons();
        let p = self.n_params();
        let v = self.variances(tau);
        let mut gi = DMatrix::zeros(n, p);
        let mut regressions = Vec::new();
        let mut idx = 0;
        for t in self.spec.window.first..=self.spec.window.last {
            let tn = TimeNuisance::new(scores, t, &self.treatment_model, self.config.outcome)?;
            while idx < self.components.len() && self.components[idx].t == t {
                let c = &self.components[idx];
                let arr = component_arrays(scores, &self.spec, &tn, t, c.m, &c.terms);
                let tq = c.tau_q(tau);
                let r = &arr.r0 - &arr.rf * &tq;
                for (q, &j) in c.terms.iter().enumerate() {
                    let mut target = gi.column_mut(j);
                    target.axpy(1.0 / v[idx], &arr.d.column(q).component_mul(&r), 1.0);
                }
                let coef = arr.coef.column(0) - arr.coef.columns(1, c.terms.len()) * &tq;
                let u = compute_u_single(scores, &self.spec, tau, t, c.m);
                let um = u.mean();
                let tss: f64 = u.iter().map(|x| (x - um).powi(2)).sum();
                regressions.push(OutcomeRegression {
                    time: t,
                    outcome: c.m,
                    names: tn.outcome_names.clone(),
                    coef: coef.iter().copied().collect(),
                    r_squared: if tss > 0.0 { 1.0 - r.norm_squared() / tss } else { 0.0 },
                    variance: v[idx],
                });
                idx += 1;
            }
        }
        let nf = n as f64;
        let meat = gi.tr_mul(&gi) / (nf * nf);
        let jac = self.jacobian(&v);
        let jinv = jac.try_inverse().ok_or_else(|| Error::GEstimation {
            reason: "singular Jacobian at the solution".into(),
            singular: true,
            trace: Vec::new(),
        })?;
        Ok((&jinv * meat * jinv.transpose(), regressions))
    }
}

fn compute_u_single(scores: &ScoreSet, spec: &BlipSpec, tau: &DVector<f64>, t: usize, m: usize) -> DVector<f64> {
    let mut u = col(scores, scores.roles().outcome, m);
    for j in spec.terms_for(t, m) {
        u -= feature(scores, &spec.terms[j]) * tau[j];
    }
    u
}

/// Estimating function evaluated the long way: blip down the outcomes,
/// refit the outcome nuisance regressions by least squares, build `d` and
/// average. Variances are re-estimated unless given.
pub fn estimating_function(
    scores: &ScoreSet,
    spec: &BlipSpec,
    config: &NuisanceConfig,
    tau: &DVector<f64>,
    fixed_v: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let treatment_model = fit_treatment_models(scores, config.treatment)?;
    let n = scores.n_persons() as f64;
    let mut g = DVector::zeros(spec.n_params());
    let mut idx = 0;
    for t in spec.window.first..=spec.window.last {
        let tn = TimeNuisance::new(scores, t, &treatment_model, config.outcome)?;
        let design = history_design(scores, t, config.outcome);
        for (m, u) in compute_u(scores, spec, tau, t) {
            let fit = ols(&design, &u, &format!("outcome nuisance model for U_{t},{m}"))?;
            let v = match fixed_v {
                Some(v) => v[idx],
                None => (fit.residuals.norm_squared() / n).max(VARIANCE_FLOOR),
            };
            let terms = spec.terms_for(t, m);
            let d = tn.d_matrix(scores, spec, t, &terms);
            let dr = d.tr_mul(&fit.residuals);
            for (q, &j) in terms.iter().enumerate() {
                g[j] += dr[q] / (v * n);
            }
            idx += 1;
        }
    }
    Ok(g)
}

/// Window outcomes that are exact linear combinations of the earlier
/// outcomes (e.g. the last occasion after person-mean centering).
pub fn unidentified_outcomes(scores: &ScoreSet, window: &InterventionWindow) -> Result<Vec<usize>> {
    let y = scores.roles().outcome;
    let mut out = Vec::new();
    for m in window.outcomes(scores.k()) {
        let mut d = Design::with_intercept(scores.n_persons());
        for s in 0..m {
            d.push(col_name(scores, y, s), col(scores, y, s));
        }
        let ym = col(scores, y, m);
        let proj = Projector::new(&d, "earlier outcomes")?;
        let r = proj.residualize(&DMatrix::from_column_slice(ym.len(), 1, ym.as_slice())).0;
        let mean = ym.mean();
        let tss: f64 = ym.iter().map(|v| (v - mean).powi(2)).sum();
        if tss == 0.0 || 1.0 - r.norm_squared() / tss > DEPENDENCE_R2 {
            out.push(m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GEstimationResult {
    pub estimates: CausalEstimates,
    pub trace: Vec<NewtonStep>,
    pub treatment_model: TreatmentModel,
    pub outcome_models: Vec<OutcomeRegression>,
}

impl GEstimationResult {
    /// `V_{t,m}` at the solution.
    pub fn variances(&self) -> Vec<(usize, usize, f64)> {
        self.outcome_models.iter().map(|r| (r.time, r.outcome, r.variance)).collect()
    }
}

pub fn g_estimate(scores: &ScoreSet, config: &SnmmConfig) -> Result<GEstimationResult> {
    let k = scores.k();
    let window = config.window.unwrap_or_else(|| InterventionWindow::default_for(k));
    let full = BlipSpec::new(scores, window, config.interactions)?;
    let dropped = unidentified_outcomes(scores, &window)?;
    let keep: Vec<usize> = window.outcomes(k).filter(|m| !dropped.contains(m)).collect();
    let spec = BlipSpec::for_outcomes(scores, window, config.interactions, &keep)?;
    let absent: Vec<ParamName> = full
        .params()
        .iter()
        .filter(|p| dropped.contains(&p.outcome))
        .cloned()
        .collect();
    let est = GEstimator::prepare(scores, spec, config.nuisance)?;
    let (tau, trace) = est.solve(config.max_iterations, config.tolerance)?;
    let (cov, outcome_models) = est.sandwich(&tau)?;
    let mut warnings = Vec::new();
    if !dropped.is_empty() {
        warnings.push(format!(
            "outcomes {dropped:?} are linear combinations of earlier outcomes; their effects are not identified"
        ));
    }
    let estimates = CausalEstimates {
        method: Method::Snmm,
        centering: scores.centering(),
        params: est.spec().params().to_vec(),
        tau: tau.iter().copied().collect(),
        standard_errors: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        nuisance: Vec::new(),
        absent,
        warnings,
    };
    Ok(GEstimationResult {
        estimates,
        trace,
        treatment_model: est.treatment_model,
        outcome_models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Centering, Role, VariableSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Small linear system with two confounders, K = 2, known blips.
    fn toy(n: usize, seed: u64, beta: f64) -> ScoreSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
        let (mut y, mut a, mut b, mut c) = (
            DMatrix::zeros(n, 3),
            DMatrix::zeros(n, 3),
            DMatrix::zeros(n, 3),
            DMatrix::zeros(n, 3),
        );
        for i in 0..n {
            for k in 0..3 {
                let (yp, ap, bp, cp) = if k == 0 {
                    (0.0, 0.0, 0.0, 0.0)
                } else {
                    (y[(i, k - 1)], a[(i, k - 1)], b[(i, k - 1)], c[(i, k - 1)])
                };
                b[(i, k)] = 0.5 * bp + 0.2 * ap + z();
                c[(i, k)] = 0.3 * cp + 0.1 * yp + z();
                y[(i, k)] = 0.4 * yp + beta * ap + 0.2 * bp + z();
                a[(i, k)] = 0.3 * y[(i, k)] + 0.3 * ap + 0.3 * b[(i, k)] - 0.2 * c[(i, k)] + z();
            }
        }
        let vars = vec![
            VariableSpec::new("Y", Role::Outcome),
            VariableSpec::new("A", Role::Treatment),
            VariableSpec::new("B", Role::Confounder),
            VariableSpec::new("C", Role::Confounder),
        ];
        ScoreSet::new(vars, vec![y, a, b, c], Centering::TrueScores).unwrap()
    }

    #[test]
    fn blip_substitution() {
        assert_eq!(blip(2.0, &[3.0], 0.0, &[0.0]), 0.0);
        assert!((blip(2.0, &[], 0.4, &[]) - 0.8).abs() < 1e-15);
        assert!((blip(2.0, &[3.0], 0.4, &[0.1]) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn interaction_layout_has_nine_parameters() {
        let s = toy(50, 1, 0.4);
        let spec = BlipSpec::new(&s, InterventionWindow::default_for(2), true).unwrap();
        let names: Vec<String> = spec.params().iter().map(|p| p.to_string()).collect();
        assert_eq!(
            names,
            [
                "beta_1_0", "gamma_1_0_B", "gamma_1_0_C", "beta_2_0", "gamma_2_0_B", "gamma_2_0_C", "beta_2_1",
                "gamma_2_1_B", "gamma_2_1_C"
            ]
        );
    }

    #[test]
    fn u_hand_example_and_zero_tau() {
        let n = 1;
        let vars = vec![
            VariableSpec::new("Y", Role::Outcome),
            VariableSpec::new("A", Role::Treatment),
            VariableSpec::new("L", Role::Confounder),
        ];
        let y = DMatrix::from_row_slice(n, 3, &[0.0, 0.0, 5.0]);
        let a = DMatrix::from_row_slice(n, 3, &[0.0, 2.0, 0.0]);
        let l = DMatrix::from_row_slice(n, 3, &[0.0, 1.0, 0.0]);
        let s = ScoreSet::new(vars, vec![y, a, l], Centering::TrueScores).unwrap();
        let spec = BlipSpec::new(&s, InterventionWindow::new(0, 1), true).unwrap();
        // beta_1_0, gamma_1_0_L, beta_2_0, gamma_2_0_L, beta_2_1, gamma_2_1_L
        let tau = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.4, 0.1]);
        let u = compute_u(&s, &spec, &tau, 1);
        assert_eq!(u.len(), 1);
        assert!((u[0].1[0] - 4.0).abs() < 1e-15);
        let u0 = compute_u(&s, &spec, &DVector::zeros(6), 0);
        assert_eq!(u0[1].1[0], 5.0);
    }

    #[test]
    fn u_is_affine_in_tau() {
        let s = toy(200, 2, 0.4);
        let spec = BlipSpec::new(&s, InterventionWindow::new(0, 1), true).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = spec.n_params();
        let t1 = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let t2 = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        for t in 0..2 {
            let u1 = compute_u(&s, &spec, &t1, t);
            let u2 = compute_u(&s, &spec, &t2, t);
            for ((m, a), (_, b)) in u1.iter().zip(&u2) {
                let mut direct = DVector::zeros(a.len());
                for j in spec.terms_for(t, *m) {
                    direct += feature(&s, &spec.terms[j]) * (t2[j] - t1[j]);
                }
                assert!((a - b - direct).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_and_explicit_routes_agree() {
        let s = toy(300, 4, 0.4);
        for outcome in [OutcomeModel::FullHistory, OutcomeModel::FullHistoryQuadratic, OutcomeModel::TreatmentHistoryOnly] {
            let config = NuisanceConfig {
                treatment: TreatmentModelConfig::default(),
                outcome,
            };
            let spec = BlipSpec::new(&s, InterventionWindow::new(0, 1), true).unwrap();
            let est = GEstimator::prepare(&s, spec.clone(), config).unwrap();
            let tau = DVector::from_fn(spec.n_params(), |j, _| 0.1 * j as f64 - 0.2);
            let v = est.variances(&tau);
            let fast = est.value(&tau, &v);
            let slow = estimating_function(&s, &spec, &config, &tau, None).unwrap();
            assert!((fast - slow).amax() < 1e-10);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let s = toy(300, 5, 0.4);
        let config = NuisanceConfig::default();
        let spec = BlipSpec::new(&s, InterventionWindow::new(0, 1), true).unwrap();
        let est = GEstimator::prepare(&s, spec.clone(), config).unwrap();
        let p = spec.n_params();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let tau = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let v = est.variances(&tau);
        let jac = est.jacobian(&v);
        let h = 1e-5;
        for j in 0..p {
            let mut up = tau.clone();
            let mut dn = tau.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (estimating_function(&s, &spec, &config, &up, Some(&v)).unwrap()
                - estimating_function(&s, &spec, &config, &dn, Some(&v)).unwrap())
                / (2.0 * h);
            assert!((fd - jac.column(j)).amax() <= 1e-6 * (1.0 + jac.amax()));
        }
    }

    /// Blips of the toy system: lag 1 is `beta`; lag 2 runs through Y_1
    /// (`beta·0.4`) and through B_1 (`0.2·0.2`).
    fn toy_truth(beta: f64) -> [(ParamName, f64); 3] {
        [
            (ParamName::beta(1, 0), beta),
            (ParamName::beta(2, 0), beta * 0.4 + 0.2 * 0.2),
            (ParamName::beta(2, 1), beta),
        ]
    }

    #[test]
    fn recovers_blips_of_a_linear_system() {
        let s = toy(20_000, 7, 0.5);
        let r = g_estimate(&s, &SnmmConfig::default()).unwrap();
        for (name, truth) in toy_truth(0.5) {
            let (est, se) = r.estimates.get(&name).unwrap();
            assert!((est - truth).abs() < 0.03, "{name}: {est} vs {truth} (se {se})");
            assert!(se > 0.0 && se < 0.05);
        }
        assert!(r.trace.len() <= 5, "{:?}", r.trace);
    }

    #[test]
    fn zero_direct_effects_leave_only_the_indirect_path() {
        let s = toy(5000, 8, 0.0);
        let r = g_estimate(&s, &SnmmConfig::default()).unwrap();
        for (name, truth) in toy_truth(0.0) {
            let (est, se) = r.estimates.get(&name).unwrap();
            assert!((est - truth).abs() < 4.0 * se, "{name}: {est} ± {se} vs {truth}");
        }
    }

    #[test]
    fn person_mean_centering_drops_last_outcome() {
        let s = toy(500, 9, 0.4);
        let blocks = s
            .blocks()
            .iter()
            .map(|b| {
                let mut out = b.clone();
                for mut row in out.row_iter_mut() {
                    let m = row.mean();
                    row.add_scalar_mut(-m);
                }
                out
            })
            .collect();
        let centered = ScoreSet::new(s.variables().to_vec(), blocks, Centering::ObservedMean).unwrap();
        let w = InterventionWindow::default_for(2);
        assert_eq!(unidentified_outcomes(&centered, &w).unwrap(), vec![2]);
        assert!(unidentified_outcomes(&s, &w).unwrap().is_empty());
        let r = g_estimate(&centered, &SnmmConfig::default()).unwrap();
        assert_eq!(r.estimates.params, vec![ParamName::beta(1, 0)]);
        assert_eq!(r.estimates.absent, vec![ParamName::beta(2, 0), ParamName::beta(2, 1)]);
        assert_eq!(r.estimates.warnings.len(), 1);
    }

    #[test]
    fn window_must_reach_last_treatment() {
        let s = toy(50, 10, 0.4);
        assert!(BlipSpec::new(&s, InterventionWindow::new(0, 0), false).is_err());
    }
}
