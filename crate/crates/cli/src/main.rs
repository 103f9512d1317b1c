use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use wpv_core::causal::{InterventionWindow, Method};
use wpv_core::data::{default_schema, load_panel_csv, load_scores_csv, write_panel_csv, write_scores_csv};
use wpv_core::harness::{run_cell, summarize, write_report_csv, write_report_markdown, CellConfig, CellResult, Grid};
use wpv_core::measurement::{FitOptions, MeasurementFit};
use wpv_core::msm::{estimate_msm, MsmConfig};
use wpv_core::scores::{center, fit_all_measurements, CenteringInputs, Step1};
use wpv_core::sim::{generate_replication, read_truth_csv, write_truth_csv, Scenario, SimConfig};
use wpv_core::snmm::{g_estimate, SnmmConfig};
use wpv_core::{Centering, Error, PanelDataset, ScoreSet, VariableSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_IMPROPER: u8 = 3;
const EXIT_NONCONVERGENCE: u8 = 4;

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    /// Step 1 was unusable and `--strict` was given.
    Strict(Error),
    CellsFailed(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Strict(_) | Failure::CellsFailed(_) => EXIT_IMPROPER,
            Failure::Core(e) => match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Io { .. } | Error::Csv(_) | Error::MissingCell { .. } | Error::NonNumeric { .. } | Error::Schema(_) => {
                    EXIT_IO
                }
                Error::Improper(_) | Error::UntrustworthyRepair { .. } => EXIT_IMPROPER,
                _ => EXIT_NONCONVERGENCE,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Core(e) | Failure::Strict(e) => write!(f, "{e}"),
            Failure::CellsFailed(cells) => write!(f, "{} cell(s) failed: {}", cells.len(), cells.join("; ")),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "wpv", version, about = "Within-person scores and time-varying causal effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a panel from the cross-lagged data-generating process.
    Simulate(SimulateArgs),
    /// Fit the measurement models and write centered scores.
    Scores(ScoresArgs),
    /// Estimate lagged treatment effects with an MSM or an SNMM.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo grid.
    Mc(McArgs),
}

fn parse<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    phi2: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse::<Scenario>)]
    scenario: Option<Scenario>,
    #[arg(long)]
    replication: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoresArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Wide-format panel CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Repeat to request several centerings.
    #[arg(long, value_parser = parse::<Centering>)]
    centering: Vec<Centering>,
    /// Truth file from `simulate`, needed for `true_scores`.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Fail instead of warning when a measurement fit is unusable.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Panel CSV, centered before estimation.
    #[arg(long, conflicts_with = "scores")]
    panel: Option<PathBuf>,
    /// Score CSV written by `scores`.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, value_parser = parse::<Centering>)]
    centering: Option<Centering>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_parser = parse::<Method>)]
    method: Option<Method>,
    /// Intervened treatments as `first..last`.
    #[arg(long, value_parser = parse::<InterventionWindow>)]
    window: Option<InterventionWindow>,
    /// Let SNMM blips vary with the confounders.
    #[arg(long)]
    interactions: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    phi2: Option<f64>,
    #[arg(long, value_parser = parse::<Scenario>)]
    scenario: Option<Scenario>,
    /// Use the full N × K × φ² grid instead of a single cell.
    #[arg(long)]
    full_grid: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateConfig {
    sim: SimConfig,
    replication: u64,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScoresConfig {
    input: Option<PathBuf>,
    variables: Vec<VariableSpec>,
    centerings: Vec<Centering>,
    truth: Option<PathBuf>,
    fit: FitOptions,
    strict: bool,
    out: Option<PathBuf>,
}

impl Default for ScoresConfig {
    fn default() -> Self {
        Self {
            input: None,
            variables: default_schema(),
            centerings: vec![Centering::Proposed],
            truth: None,
            fit: FitOptions::default(),
            strict: false,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EstimateConfig {
    panel: Option<PathBuf>,
    scores: Option<PathBuf>,
    centering: Centering,
    truth: Option<PathBuf>,
    variables: Vec<VariableSpec>,
    method: Method,
    window: Option<InterventionWindow>,
    msm: MsmConfig,
    snmm: SnmmConfig,
    fit: FitOptions,
    out: Option<PathBuf>,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            panel: None,
            scores: None,
            centering: Centering::Proposed,
            truth: None,
            variables: default_schema(),
            method: Method::Snmm,
            window: None,
            msm: MsmConfig::default(),
            snmm: SnmmConfig::default(),
            fit: FitOptions::default(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct McConfig {
    base: CellConfig,
    /// `None` runs the base cell alone.
    grid: Option<Grid>,
    workers: Option<usize>,
    out: Option<PathBuf>,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Outcome<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn out_dir(out: &Option<PathBuf>) -> Outcome<PathBuf> {
    let dir = out.clone().ok_or_else(|| Failure::Usage("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_manifest(dir: &Path, command: &str, config: &impl Serialize, outputs: &[&str], extra: Value) -> Outcome<()> {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "outputs": outputs,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    write_json(&dir.join("manifest.json"), &m)
}

fn simulate(args: SimulateArgs) -> Outcome<()> {
    let mut cfg: SimulateConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.n {
        cfg.sim.n_persons = v;
    }
    if let Some(v) = args.k {
        cfg.sim.k_times = v;
    }
    if let Some(v) = args.phi2 {
        cfg.sim.phi2 = v;
    }
    if let Some(v) = args.seed {
        cfg.sim.seed = v;
    }
    if let Some(v) = args.scenario {
        cfg.sim.scenario = v;
    }
    if let Some(v) = args.replication {
        cfg.replication = v;
    }
    if args.out.is_some() {
        cfg.out = args.out;
    }
    cfg.sim.validate()?;
    let dir = out_dir(&cfg.out)?;
    let panel = generate_replication(&cfg.sim, cfg.replication)?;
    write_panel_csv(dir.join("panel.csv"), &panel.observed)?;
    write_truth_csv(dir.join("truth.csv"), &panel)?;
    write_manifest(&dir, "simulate", &cfg, &["panel.csv", "truth.csv"], json!({}))
}

fn fit_report(vars: &[VariableSpec], fits: &[MeasurementFit]) -> Value {
    Value::Array(
        vars.iter()
            .zip(fits)
            .map(|(v, f)| {
                json!({
                    "variable": v.name,
                    "params": f.params,
                    "chi_square": f.chi_square,
                    "df": f.df,
                    "cfi": f.cfi,
                    "rmsea": f.rmsea,
                    "srmr": f.srmr,
                    "converged": f.converged,
                    "improper": f.improper,
                    "iterations": f.n_iterations,
                })
            })
            .collect(),
    )
}

fn truth_traits(path: &Option<PathBuf>) -> Outcome<Option<nalgebra::DMatrix<f64>>> {
    match path {
        Some(p) => Ok(Some(read_truth_csv(p)?.traits)),
        None => Ok(None),
    }
}

fn scores(args: ScoresArgs) -> Outcome<()> {
    let mut cfg: ScoresConfig = load_config(args.config.as_deref())?;
    if args.input.is_some() {
        cfg.input = args.input;
    }
    if !args.centering.is_empty() {
        cfg.centerings = args.centering;
    }
    if args.truth.is_some() {
        cfg.truth = args.truth;
    }
    cfg.strict |= args.strict;
    if args.out.is_some() {
        cfg.out = args.out;
    }
    let input = cfg.input.clone().ok_or_else(|| Failure::Usage("an input panel is required (--input)".into()))?;
    let dir = out_dir(&cfg.out)?;
    let data = load_panel_csv(&input, &cfg.variables)?;
    let traits = truth_traits(&cfg.truth)?;

    let needs_step1 = cfg.centerings.iter().any(|c| c.needs_step1());
    let mut outputs = Vec::new();
    let mut skipped = Vec::new();
    let mut step1 = None;
    if needs_step1 {
        let fits = fit_all_measurements(&data, &cfg.fit)?;
        write_json(&dir.join("fits.json"), &fit_report(data.variables(), &fits))?;
        outputs.push("fits.json".to_string());
        match Step1::from_fits(&data, fits) {
            Ok(s) => step1 = Some(s),
            Err(e) if cfg.strict => {
                write_manifest(&dir, "scores", &cfg, &["fits.json"], json!({ "error": e.to_string() }))?;
                return Err(Failure::Strict(e));
            }
            Err(e) => eprintln!("warning: {e}; centerings that need step 1 are skipped"),
        }
    }
    for &c in &cfg.centerings {
        if c.needs_step1() && step1.is_none() {
            skipped.push(c.to_string());
            continue;
        }
        let inputs = CenteringInputs {
            step1: step1.as_ref(),
            true_traits: traits.as_ref(),
        };
        let s = center(&data, c, inputs)?;
        let name = format!("scores_{c}.csv");
        write_scores_csv(dir.join(&name), &s)?;
        outputs.push(name);
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&dir, "scores", &cfg, &outputs, json!({ "skipped": skipped }))
}

fn load_estimation_scores(cfg: &EstimateConfig) -> Outcome<ScoreSet> {
    if let Some(path) = &cfg.scores {
        return Ok(load_scores_csv(path, &cfg.variables)?);
    }
    let Some(path) = &cfg.panel else {
        return Err(Failure::Usage("either --panel or --scores is required".into()));
    };
    let data: PanelDataset = load_panel_csv(path, &cfg.variables)?;
    let traits = truth_traits(&cfg.truth)?;
    let step1 = if cfg.centering.needs_step1() {
        Some(Step1::fit(&data, &cfg.fit)?)
    } else {
        None
    };
    let inputs = CenteringInputs {
        step1: step1.as_ref(),
        true_traits: traits.as_ref(),
    };
    Ok(center(&data, cfg.centering, inputs)?)
}

fn write_estimates_csv(path: &Path, est: &wpv_core::causal::CausalEstimates) -> Outcome<()> {
    let mut text = String::from("parameter,estimate,se,method,centering\n");
    for row in est.report_rows() {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.name, row.estimate, row.se, est.method, est.centering
        ));
    }
    fs::write(path, text).map_err(|e| {
        Failure::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn estimate(args: EstimateArgs) -> Outcome<()> {
    let mut cfg: EstimateConfig = load_config(args.config.as_deref())?;
    if args.panel.is_some() {
        cfg.panel = args.panel;
        cfg.scores = None;
    }
    if args.scores.is_some() {
        cfg.scores = args.scores;
        cfg.panel = None;
    }
    if let Some(c) = args.centering {
        cfg.centering = c;
    }
    if args.truth.is_some() {
        cfg.truth = args.truth;
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if args.window.is_some() {
        cfg.window = args.window;
    }
    cfg.snmm.interactions |= args.interactions;
    if args.out.is_some() {
        cfg.out = args.out;
    }
    if cfg.window.is_some() {
        cfg.msm.window = cfg.window;
        cfg.snmm.window = cfg.window;
    }
    let dir = out_dir(&cfg.out)?;
    let scores = load_estimation_scores(&cfg)?;

    let (est, diagnostics) = match cfg.method {
        Method::Msm => {
            let r = estimate_msm(&scores, &cfg.msm)?;
            let d = json!({
                "weights": r.weights,
                "nuisance": r.estimates.nuisance,
                "absent": r.estimates.absent,
                "warnings": r.estimates.warnings,
            });
            (r.estimates, d)
        }
        Method::Snmm => match g_estimate(&scores, &cfg.snmm) {
            Ok(r) => {
                let d = json!({
                    "newton_trace": r.trace,
                    "outcome_models": r.outcome_models,
                    "absent": r.estimates.absent,
                    "warnings": r.estimates.warnings,
                });
                (r.estimates, d)
            }
            Err(e) => {
                if let Error::GEstimation { trace, singular, .. } = &e {
                    write_json(&dir.join("newton_trace.json"), &json!({ "singular": singular, "trace": trace }))?;
                }
                write_manifest(&dir, "estimate", &cfg, &["newton_trace.json"], json!({ "error": e.to_string() }))?;
                return Err(e.into());
            }
        },
    };
    for w in scores.warnings().iter().chain(&est.warnings) {
        eprintln!("warning: {w}");
    }
    write_estimates_csv(&dir.join("estimates.csv"), &est)?;
    write_json(&dir.join("diagnostics.json"), &diagnostics)?;
    write_manifest(&dir, "estimate", &cfg, &["estimates.csv", "diagnostics.json"], json!({}))
}

fn mc(args: McArgs) -> Outcome<()> {
    let mut cfg: McConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.reps {
        cfg.base.replications = v;
    }
    if let Some(v) = args.seed {
        cfg.base.sim.seed = v;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    if args.full_grid && cfg.grid.is_none() {
        cfg.grid = Some(Grid::default());
    }
    let grid = cfg.grid.get_or_insert_with(|| Grid {
        n_persons: vec![cfg.base.sim.n_persons],
        k_times: vec![cfg.base.sim.k_times],
        phi2: vec![cfg.base.sim.phi2],
        scenarios: vec![cfg.base.sim.scenario],
    });
    if let Some(v) = args.n {
        grid.n_persons = vec![v];
    }
    if let Some(v) = args.k {
        grid.k_times = vec![v];
    }
    if let Some(v) = args.phi2 {
        grid.phi2 = vec![v];
    }
    if let Some(v) = args.scenario {
        grid.scenarios = vec![v];
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    if cfg.workers == Some(0) {
        return Err(Failure::Usage("--workers must be positive".into()));
    }
    let cells = grid.cells(&cfg.base);
    for c in &cells {
        c.sim.validate()?;
    }
    let dir = out_dir(&cfg.out)?;

    let mut results: Vec<CellResult> = Vec::new();
    let mut error = None;
    for c in &cells {
        match run_cell(c, cfg.workers) {
            Ok(r) => {
                eprintln!("{}: {} replications", r.label(), r.replications);
                results.push(r);
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let rows = summarize(&results);
    write_report_csv(dir.join("report.csv"), &rows)?;
    write_report_markdown(dir.join("report.md"), &rows)?;
    write_json(&dir.join("cells.json"), &results)?;
    let failed: Vec<String> = results.iter().filter(|r| r.failed).map(CellResult::label).collect();
    write_manifest(
        &dir,
        "mc",
        &cfg,
        &["report.csv", "report.md", "cells.json"],
        json!({ "cells": cells.len(), "completed": results.len(), "failed_cells": failed }),
    )?;
    if let Some(e) = error {
        return Err(e.into());
    }
    if !failed.is_empty() {
        return Err(Failure::CellsFailed(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Scores(a) => scores(a),
        Command::Estimate(a) => estimate(a),
        Command::Mc(a) => mc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
