//! Monte Carlo cells: generate, score, estimate, aggregate.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{CausalEstimates, Method, ParamName};
use crate::data::{Centering, ScoreSet};
use crate::error::{Error, Result};
use crate::measurement::FitOptions;
use crate::msm::{estimate_msm, MsmConfig};
use crate::scores::{center, fit_all_measurements, CenteringInputs, Step1};
use crate::sim::{generate_replication, Scenario, SimConfig, SimulatedPanel};
use crate::snmm::{g_estimate, SnmmConfig};

/// A cell fails when an arm loses more than this share of its replications.
pub const MAX_DISCARD_SHARE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    pub sim: SimConfig,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub centerings: Vec<Centering>,
    pub msm: MsmConfig,
    pub snmm: SnmmConfig,
    pub fit: FitOptions,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            replications: 200,
            methods: vec![Method::Msm, Method::Snmm],
            centerings: vec![
                Centering::TrueScores,
                Centering::Proposed,
                Centering::ObservedMean,
                Centering::None,
            ],
            msm: MsmConfig::default(),
            snmm: SnmmConfig::default(),
            fit: FitOptions::default(),
        }
    }
}

/// Step-1 outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step1Status {
    Usable,
    Improper,
    NonConverged,
    Failed(String),
}

/// Estimates of one replication, per `(method, centering)` arm.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: u64,
    pub step1: Step1Status,
    pub arms: Vec<(Method, Centering, std::result::Result<CausalEstimates, String>)>,
    pub truth: Vec<(ParamName, f64)>,
}

fn step1_status(panel: &SimulatedPanel, fit: &FitOptions) -> (Step1Status, Option<Step1>) {
    let fits = match fit_all_measurements(&panel.observed, fit) {
        Ok(f) => f,
        Err(e) => return (Step1Status::Failed(e.to_string()), None),
    };
    if fits.iter().any(|f| f.improper) {
        return (Step1Status::Improper, None);
    }
    if fits.iter().any(|f| !f.converged) {
        return (Step1Status::NonConverged, None);
    }
    match Step1::from_fits(&panel.observed, fits) {
        Ok(s) => (Step1Status::Usable, Some(s)),
        Err(e) => (Step1Status::Failed(e.to_string()), None),
    }
}

fn scores_for(panel: &SimulatedPanel, centering: Centering, step1: Option<&Step1>) -> Result<ScoreSet> {
    match centering {
        // generator within scores, so that scenario perturbations are
        // excluded from the oracle arm
        Centering::TrueScores => Ok(ScoreSet::new(
            panel.observed.variables().to_vec(),
            panel.true_within.clone(),
            Centering::TrueScores,
        )?
        .with_traits(panel.true_traits.clone())),
        c if c.needs_step1() => {
            let step1 = step1.ok_or_else(|| Error::Config("step 1 unusable".into()))?;
            center(
                &panel.observed,
                c,
                CenteringInputs {
                    step1: Some(step1),
                    true_traits: None,
                },
            )
        }
        c => center(&panel.observed, c, CenteringInputs::default()),
    }
}

fn estimate(scores: &ScoreSet, method: Method, config: &CellConfig) -> Result<CausalEstimates> {
    match method {
        Method::Msm => Ok(estimate_msm(scores, &config.msm)?.estimates),
        Method::Snmm => Ok(g_estimate(scores, &config.snmm)?.estimates),
    }
}

/// One replication of a cell.
pub fn run_replication(config: &CellConfig, index: u64) -> Result<Replication> {
    let panel = generate_replication(&config.sim, index)?;
    let needs_step1 = config.centerings.iter().any(|c| c.needs_step1());
    let (status, step1) = if needs_step1 {
        step1_status(&panel, &config.fit)
    } else {
        (Step1Status::Usable, None)
    };
    let mut arms = Vec::new();
    for &c in &config.centerings {
        let scores = if c.needs_step1() && step1.is_none() {
            None
        } else {
            Some(scores_for(&panel, c, step1.as_ref()).map_err(|e| e.to_string()))
        };
        for &m in &config.methods {
            match &scores {
                // discarded with step 1
                None => {}
                Some(Err(e)) => arms.push((m, c, Err(e.clone()))),
                Some(Ok(s)) => arms.push((m, c, estimate(s, m, config).map_err(|e| e.to_string()))),
            }
        }
    }
    Ok(Replication {
        index,
        step1: status,
        arms,
        truth: panel.true_tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parameter: ParamName,
    pub truth: f64,
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Monte Carlo standard error of the bias (`sd / √n`).
    pub mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub method: Method,
    pub centering: Centering,
    pub used: usize,
    /// Replications not contributing to this arm (step-1 discards and
    /// estimation failures).
    pub discarded: usize,
    pub failures: Vec<String>,
    pub params: Vec<ParamSummary>,
    /// Parameters never identified in this arm.
    pub absent: Vec<ParamName>,
}

impl ArmSummary {
    pub fn param(&self, p: &ParamName) -> Option<&ParamSummary> {
        self.params.iter().find(|s| &s.parameter == p)
    }

    pub fn mean_rmse(&self) -> f64 {
        self.params.iter().map(|p| p.rmse).sum::<f64>() / self.params.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: CellConfig,
    pub replications: usize,
    pub discarded_improper: usize,
    pub discarded_nonconverged: usize,
    pub discarded_other: usize,
    pub arms: Vec<ArmSummary>,
    pub failed: bool,
}

impl CellResult {
    pub fn arm(&self, method: Method, centering: Centering) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.method == method && a.centering == centering)
    }

    pub fn label(&self) -> String {
        cell_label(&self.config.sim)
    }
}

pub fn cell_label(sim: &SimConfig) -> String {
    format!("N={} K={} phi2={:.4} {}", sim.n_persons, sim.k_times, sim.phi2, sim.scenario)
}

fn summarize_param(parameter: ParamName, truth: f64, values: &[f64]) -> ParamSummary {
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / nf).sqrt();
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    ParamSummary {
        parameter,
        truth,
        n,
        mean,
        bias: mean - truth,
        rmse,
        mc_se: sd / nf.sqrt(),
    }
}

/// Aggregates replications (in index order) into a cell result.
pub fn aggregate(config: &CellConfig, reps: &[Replication]) -> CellResult {
    let mut reps: Vec<&Replication> = reps.iter().collect();
    reps.sort_by_key(|r| r.index);
    let count = |s: fn(&Step1Status) -> bool| reps.iter().filter(|r| s(&r.step1)).count();
    let truth = reps.first().map(|r| r.truth.clone()).unwrap_or_default();
    let mut arms = Vec::new();
    let mut failed = false;
    for &c in &config.centerings {
        for &m in &config.methods {
            let mut failures = Vec::new();
            let mut used = 0;
            let mut values: Vec<Vec<f64>> = vec![Vec::new(); truth.len()];
            for r in &reps {
                match r.arms.iter().find(|a| a.0 == m && a.1 == c) {
                    None => {}
                    Some((_, _, Err(e))) => failures.push(format!("replication {}: {e}", r.index)),
                    Some((_, _, Ok(est))) => {
                        used += 1;
                        for (j, (p, _)) in truth.iter().enumerate() {
                            if let Some(v) = est.estimate(p) {
                                values[j].push(v);
                            }
                        }
                    }
                }
            }
            let discarded = reps.len() - used;
            if discarded as f64 > MAX_DISCARD_SHARE * reps.len() as f64 {
                failed = true;
            }
            let mut params = Vec::new();
            let mut absent = Vec::new();
            for ((p, t), v) in truth.iter().zip(&values) {
                if v.is_empty() {
                    absent.push(p.clone());
                } else {
                    params.push(summarize_param(p.clone(), *t, v));
                }
            }
            arms.push(ArmSummary {
                method: m,
                centering: c,
                used,
                discarded,
                failures,
                params,
                absent,
            });
        }
    }
    CellResult {
        config: config.clone(),
        replications: reps.len(),
        discarded_improper: count(|s| *s == Step1Status::Improper),
        discarded_nonconverged: count(|s| *s == Step1Status::NonConverged),
        discarded_other: count(|s| matches!(s, Step1Status::Failed(_))),
        arms,
        failed,
    }
}

/// Runs a cell; `workers` caps the thread count (`None` uses rayon's default).
/// Results do not depend on the number of workers.
pub fn run_cell(config: &CellConfig, workers: Option<usize>) -> Result<CellResult> {
    if config.replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    if config.methods.is_empty() || config.centerings.is_empty() {
        return Err(Error::Config("select at least one method and one centering".into()));
    }
    config.sim.validate()?;
    let run = || -> Result<Vec<Replication>> {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|i| run_replication(config, i))
            .collect()
    };
    let reps = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    Ok(aggregate(config, &reps))
}

/// Factors of a Monte Carlo grid; cells share the base seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub n_persons: Vec<usize>,
    pub k_times: Vec<usize>,
    pub phi2: Vec<f64>,
    pub scenarios: Vec<Scenario>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n_persons: vec![200, 600, 1000],
            k_times: vec![4, 8],
            phi2: vec![10.0 / 9.0, 30.0 / 7.0, 10.0],
            scenarios: vec![Scenario::Clean],
        }
    }
}

impl Grid {
    pub fn cells(&self, base: &CellConfig) -> Vec<CellConfig> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for &phi2 in &self.phi2 {
                for &k in &self.k_times {
                    for &n in &self.n_persons {
                        let mut c = base.clone();
                        c.sim.n_persons = n;
                        c.sim.k_times = k;
                        c.sim.phi2 = phi2;
                        c.sim.scenario = scenario;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub method: Method,
    pub centering: Centering,
    pub parameter: String,
    pub bias: f64,
    pub rmse: f64,
    pub mc_se: f64,
    pub discards: usize,
}

/// Long-format report rows sorted by `(φ², K, N, scenario, method,
/// centering, parameter)`.
pub fn summarize(results: &[CellResult]) -> Vec<ReportRow> {
    let mut keyed = Vec::new();
    for cell in results {
        let s = &cell.config.sim;
        for arm in &cell.arms {
            let c_rank = Centering::ALL.iter().position(|c| *c == arm.centering).unwrap_or(usize::MAX);
            for (j, p) in arm.params.iter().enumerate() {
                let key = (s.phi2, s.k_times, s.n_persons, s.scenario, arm.method, c_rank, j);
                keyed.push((
                    key,
                    ReportRow {
                        cell: cell.label(),
                        method: arm.method,
                        centering: arm.centering,
                        parameter: p.parameter.to_string(),
                        bias: p.bias,
                        rmse: p.rmse,
                        mc_se: p.mc_se,
                        discards: arm.discarded,
                    },
                ));
            }
        }
    }
    keyed.sort_by(|a, b| {
        let (x, y) = (&a.0, &b.0);
        x.0.total_cmp(&y.0)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
            .then(x.3.cmp(&y.3))
            .then(x.4.cmp(&y.4))
            .then(x.5.cmp(&y.5))
            .then(x.6.cmp(&y.6))
    });
    keyed.into_iter().map(|(_, r)| r).collect()
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn report_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("| cell | method | centering | parameter | bias | rmse | mc_se | discards |\n");
    out.push_str("|---|---|---|---|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |",
            r.cell, r.method, r.centering, r.parameter, r.bias, r.rmse, r.mc_se, r.discards
        );
    }
    out
}

pub fn write_report_markdown(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(report_markdown(rows).as_bytes()).map_err(|e| Error::io(path, e))
}
