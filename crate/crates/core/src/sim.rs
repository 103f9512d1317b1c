//! Synthetic panels with known within-person dynamics, traits and causal
//! effects.
//!
//! Randomness: `ChaCha20Rng::seed_from_u64(seed)` with the replication index
//! as the ChaCha stream, so replications are independent and reproducible
//! regardless of how they are scheduled. Normal variates come from
//! `rand_distr::StandardNormal` (ziggurat).

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::causal::{InterventionWindow, ParamName};
use crate::data::{default_schema, PanelDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[default]
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "measurement_error_10")]
    MeasurementError10,
    #[serde(rename = "measurement_error_20")]
    MeasurementError20,
    #[serde(rename = "timevarying_loadings")]
    TimevaryingLoadings,
    #[serde(rename = "quadratic_confounding")]
    QuadraticConfounding,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Clean,
        Scenario::MeasurementError10,
        Scenario::MeasurementError20,
        Scenario::TimevaryingLoadings,
        Scenario::QuadraticConfounding,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::MeasurementError10 => "measurement_error_10",
            Scenario::MeasurementError20 => "measurement_error_20",
            Scenario::TimevaryingLoadings => "timevarying_loadings",
            Scenario::QuadraticConfounding => "quadratic_confounding",
        }
    }

    /// Measurement-error variance as a fraction of the initial measurement variance.
    pub fn error_fraction(&self) -> f64 {
        match self {
            Scenario::MeasurementError10 => 0.1,
            Scenario::MeasurementError20 => 0.2,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// Coefficients of the within-person recursion.
///
/// `Y_k = yy·Y_{k−1} + ya·A_{k−1} + yl·L_{k−1} + d`,
/// `L_k = ly·Y_{k−1} + la·A_{k−1} + ll·L_{k−1} + d`,
/// `A_k = ay·Y_k + aa·A_{k−1} + al·L_k (+ quadratic·Y_k²) + d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dynamics {
    pub yy: f64,
    pub ya: f64,
    pub yl: f64,
    pub ay: f64,
    pub aa: f64,
    pub al: f64,
    pub ly: f64,
    pub la: f64,
    pub ll: f64,
    /// Coefficient of `Y_k²` in the treatment equation under quadratic confounding.
    pub quadratic: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            yy: 0.4,
            ya: 0.4,
            yl: 0.1,
            ay: 0.2,
            aa: 0.4,
            al: 0.3,
            ly: 0.2,
            la: 0.2,
            ll: 0.5,
            quadratic: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_persons: usize,
    pub k_times: usize,
    pub phi2: f64,
    pub trait_correlation: f64,
    pub within_initial_variance: f64,
    pub within_initial_covariance: f64,
    pub residual_variance: f64,
    pub scenario: Scenario,
    pub dynamics: Dynamics,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_persons: 1000,
            k_times: 4,
            phi2: 10.0,
            trait_correlation: 0.3,
            within_initial_variance: 10.0,
            within_initial_covariance: 3.0,
            residual_variance: 5.0,
            scenario: Scenario::Clean,
            dynamics: Dynamics::default(),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_persons == 0 {
            return Err(Error::Config("n_persons must be positive".into()));
        }
        if self.k_times < 2 {
            return Err(Error::Config(format!("k_times must be at least 2, got {}", self.k_times)));
        }
        for (name, v) in [
            ("phi2", self.phi2),
            ("within_initial_variance", self.within_initial_variance),
            ("residual_variance", self.residual_variance),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.trait_correlation.abs() <= 1.0) {
            return Err(Error::Config("trait_correlation must lie in [-1, 1]".into()));
        }
        if !(self.within_initial_covariance.abs() <= self.within_initial_variance) {
            return Err(Error::Config("initial covariance exceeds the initial variance".into()));
        }
        Ok(())
    }

    /// Measurement-error variance added to every cell.
    pub fn error_variance(&self) -> f64 {
        self.scenario.error_fraction() * (self.within_initial_variance + self.phi2)
    }
}

/// A generated panel and everything needed to score estimators against it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub config: SimConfig,
    pub replication: u64,
    pub observed: PanelDataset,
    /// Within-person scores `X*`, one `N × (K+1)` block per variable.
    pub true_within: Vec<DMatrix<f64>>,
    /// `N × 3` traits in variable order.
    pub true_traits: DMatrix<f64>,
    pub true_tau: Vec<(ParamName, f64)>,
}

/// Symmetric square-root factor of a PSD 3×3 matrix (works when singular).
fn psd_factor(c: Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(c);
    let mut f = eig.eigenvectors;
    for (j, l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

fn exchangeable(var: f64, cov: f64) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| if i == j { var } else { cov })
}

pub fn generate(config: &SimConfig) -> Result<SimulatedPanel> {
    generate_replication(config, 0)
}

/// Replication `rep` of a cell: the ChaCha stream `rep` under the cell's seed.
pub fn generate_replication(config: &SimConfig, rep: u64) -> Result<SimulatedPanel> {
    config.validate()?;
    let n = config.n_persons;
    let t = config.k_times + 1;
    let k = config.k_times as f64;
    let dy = config.dynamics;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(rep);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };

    let trait_f = psd_factor(exchangeable(config.phi2, config.trait_correlation * config.phi2));
    let init_f = psd_factor(exchangeable(config.within_initial_variance, config.within_initial_covariance));
    let sd = config.residual_variance.sqrt();
    let err_sd = config.error_variance().sqrt();
    let quadratic = if config.scenario == Scenario::QuadraticConfounding { dy.quadratic } else { 0.0 };

    let mut within = vec![DMatrix::zeros(n, t); 3];
    let mut observed = vec![DMatrix::zeros(n, t); 3];
    let mut traits = DMatrix::zeros(n, 3);
    for i in 0..n {
        let tr = trait_f * nalgebra::Vector3::new(z(), z(), z());
        traits.set_row(i, &tr.transpose());
        let x0 = init_f * nalgebra::Vector3::new(z(), z(), z());
        for v in 0..3 {
            within[v][(i, 0)] = x0[v];
        }
        for s in 1..t {
            let (yp, ap, lp) = (within[0][(i, s - 1)], within[1][(i, s - 1)], within[2][(i, s - 1)]);
            let l = dy.ly * yp + dy.la * ap + dy.ll * lp + sd * z();
            let y = dy.yy * yp + dy.ya * ap + dy.yl * lp + sd * z();
            let a = dy.ay * y + quadratic * y * y + dy.aa * ap + dy.al * l + sd * z();
            within[0][(i, s)] = y;
            within[1][(i, s)] = a;
            within[2][(i, s)] = l;
        }
        for s in 0..t {
            for v in 0..3 {
                let loading = if config.scenario == Scenario::TimevaryingLoadings {
                    (0..3)
                        .map(|u| {
                            let w = if u == v { 1.0 + 0.5 * s as f64 / k } else { 0.3 };
                            w * tr[u]
                        })
                        .sum::<f64>()
                } else {
                    tr[v]
                };
                let e = if err_sd > 0.0 { err_sd * z() } else { 0.0 };
                observed[v][(i, s)] = loading + within[v][(i, s)] + e;
            }
        }
    }
    let observed = PanelDataset::new(default_schema(), observed)?;
    let window = InterventionWindow::default_for(config.k_times);
    Ok(SimulatedPanel {
        config: config.clone(),
        replication: rep,
        observed,
        true_within: within,
        true_traits: traits,
        true_tau: true_tau(&config.dynamics, config.k_times, &window)?,
    })
}

/// Lagged joint effects in the default dynamics, lags 1..=4.
pub const LAG_EFFECTS: [f64; 4] = [0.40, 0.18, 0.09, 0.0486];

/// Effect of a unit change in `A_s` on `Y_{s+lag}` with every later
/// treatment held fixed, for lags `1..=max_lag`, by path tracing through
/// the outcome and confounder.
pub fn lag_effects(d: &Dynamics, max_lag: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max_lag);
    let (mut y, mut l) = (d.ya, d.la);
    for _ in 0..max_lag {
        out.push(y);
        (y, l) = (d.yy * y + d.yl * l, d.ly * y + d.ll * l);
    }
    out
}

/// Ground-truth `β_{m s}` of a window, in canonical order.
pub fn true_tau(d: &Dynamics, k: usize, window: &InterventionWindow) -> Result<Vec<(ParamName, f64)>> {
    window.validate(k)?;
    let lags = lag_effects(d, k);
    if *d == Dynamics::default() {
        for (got, want) in lags.iter().zip(LAG_EFFECTS) {
            assert!((got - want).abs() < 1e-12, "path tracing gives {got}, table {want}");
        }
    }
    Ok(crate::causal::beta_params(k, window)
        .into_iter()
        .map(|p| {
            let v = lags[p.lag() - 1];
            (p, v)
        })
        .collect())
}

/// Writes generator truth in `#truth` sections: the causal parameters,
/// the traits and the within-person scores.
pub fn write_truth_csv(path: impl AsRef<Path>, panel: &SimulatedPanel) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let names: Vec<&str> = panel.observed.variables().iter().map(|v| v.name.as_str()).collect();
    let t = panel.observed.n_times();
    let mut out = String::new();
    out.push_str("#truth tau\nparameter,value\n");
    for (p, v) in &panel.true_tau {
        out.push_str(&format!("{p},{v}\n"));
    }
    out.push_str(&format!("#truth traits\nperson,{}\n", names.join(",")));
    for i in 0..panel.true_traits.nrows() {
        let row: Vec<String> = panel.true_traits.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&format!("{i},{}\n", row.join(",")));
    }
    let header: Vec<String> = names.iter().flat_map(|n| (0..t).map(move |s| format!("{n}_{s}"))).collect();
    out.push_str(&format!("#truth within\nperson,{}\n", header.join(",")));
    for i in 0..panel.true_traits.nrows() {
        let row: Vec<String> = panel
            .true_within
            .iter()
            .flat_map(|b| b.row(i).iter().map(|x| x.to_string()).collect::<Vec<_>>())
            .collect();
        out.push_str(&format!("{i},{}\n", row.join(",")));
    }
    f.write_all(out.as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub tau: Vec<(String, f64)>,
    pub traits: DMatrix<f64>,
    pub within: Vec<DMatrix<f64>>,
}

/// Reads a file written by [`write_truth_csv`].
pub fn read_truth_csv(path: impl AsRef<Path>) -> Result<Truth> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut section = String::new();
    let mut header_pending = false;
    let mut tau = Vec::new();
    let mut traits: Vec<Vec<f64>> = Vec::new();
    let mut within: Vec<Vec<f64>> = Vec::new();
    let mut n_vars = 0;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let first = rec.get(0).unwrap_or("");
        if let Some(name) = first.strip_prefix("#truth ") {
            section = name.trim().to_string();
            header_pending = true;
            continue;
        }
        if header_pending {
            header_pending = false;
            if section == "traits" {
                n_vars = rec.len() - 1;
            }
            continue;
        }
        let num = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or("");
            s.trim().parse().map_err(|_| Error::NonNumeric {
                row: row + 1,
                column: format!("{section}[{j}]"),
                value: s.to_string(),
            })
        };
        match section.as_str() {
            "tau" => tau.push((first.to_string(), num(1)?)),
            "traits" => traits.push((1..rec.len()).map(num).collect::<Result<_>>()?),
            "within" => within.push((1..rec.len()).map(num).collect::<Result<_>>()?),
            other => return Err(Error::Schema(format!("unknown truth section `{other}`"))),
        }
    }
    let n = traits.len();
    if n == 0 || within.len() != n || n_vars == 0 {
        return Err(Error::Schema("truth file lacks traits or within scores".into()));
    }
    let t = within[0].len() / n_vars;
    let traits = DMatrix::from_fn(n, n_vars, |i, v| traits[i][v]);
    let within = (0..n_vars)
        .map(|v| DMatrix::from_fn(n, t, |i, s| within[i][v * t + s]))
        .collect();
    Ok(Truth { tau, traits, within })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_tracing_matches_table_in_exact_arithmetic() {
        // coefficients in tenths; the lag-n effect is an integer over 10^n
        let (yy, yl, ly, ll, ya, la) = (4i64, 1, 2, 5, 4, 2);
        let (mut y, mut l) = (ya, la);
        let mut exact = vec![];
        for n in 1..=4u32 {
            exact.push((y, 10i64.pow(n)));
            (y, l) = (yy * y + yl * l, ly * y + ll * l);
        }
        assert_eq!(exact, vec![(4, 10), (18, 100), (90, 1000), (486, 10000)]);
        let lags = lag_effects(&Dynamics::default(), 4);
        for (j, (num, den)) in exact.iter().enumerate() {
            let q = *num as f64 / *den as f64;
            assert_eq!(q, LAG_EFFECTS[j]);
            assert!((lags[j] - q).abs() < 1e-15);
        }
    }

    #[test]
    fn truth_for_both_grids() {
        let d = Dynamics::default();
        let t4 = true_tau(&d, 4, &InterventionWindow::default_for(4)).unwrap();
        let want = [0.40, 0.18, 0.40, 0.09, 0.18, 0.40, 0.0486, 0.09, 0.18, 0.40];
        let got: Vec<f64> = t4.iter().map(|x| x.1).collect();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let t8 = true_tau(&d, 8, &InterventionWindow::default_for(8)).unwrap();
        assert_eq!(t8[0].0, ParamName::beta(5, 4));
        let got8: Vec<f64> = t8.iter().map(|x| x.1).collect();
        assert_eq!(got, got8);
    }

    #[test]
    fn deterministic_null_panel() {
        let c = SimConfig {
            n_persons: 20,
            phi2: 0.0,
            within_initial_variance: 0.0,
            within_initial_covariance: 0.0,
            residual_variance: 0.0,
            ..SimConfig::default()
        };
        let p = generate(&c).unwrap();
        assert!(p.observed.blocks().iter().all(|b| b.amax() == 0.0));
    }

    #[test]
    fn same_seed_same_panel_and_streams_differ() {
        let c = SimConfig {
            n_persons: 50,
            ..SimConfig::default()
        };
        let a = generate_replication(&c, 3).unwrap();
        let b = generate_replication(&c, 3).unwrap();
        assert_eq!(a.observed, b.observed);
        let other = generate_replication(&c, 4).unwrap();
        assert_ne!(a.observed, other.observed);
    }

    #[test]
    fn clean_observed_is_traits_plus_within() {
        let c = SimConfig {
            n_persons: 30,
            ..SimConfig::default()
        };
        let p = generate(&c).unwrap();
        for v in 0..3 {
            for i in 0..30 {
                for s in 0..5 {
                    let x = p.true_traits[(i, v)] + p.true_within[v][(i, s)];
                    assert_eq!(p.observed.series(v)[(i, s)], x);
                }
            }
        }
        let b = generate(&SimConfig {
            scenario: Scenario::TimevaryingLoadings,
            ..c
        })
        .unwrap();
        let last = b.observed.series(0)[(0, 4)] - b.true_within[0][(0, 4)];
        let want = 1.5 * b.true_traits[(0, 0)] + 0.3 * (b.true_traits[(0, 1)] + b.true_traits[(0, 2)]);
        assert!((last - want).abs() < 1e-12);
        assert!((p.observed.series(0)[(0, 4)] - (p.true_traits[(0, 0)] + p.true_within[0][(0, 4)])).abs() < 1e-12);
        assert!((b.observed.series(0)[(0, 4)] - (b.true_traits[(0, 0)] + b.true_within[0][(0, 4)])).abs() > 1e-6);
    }

    #[test]
    fn error_variance_is_a_fraction_of_initial_variance() {
        let c = SimConfig {
            scenario: Scenario::MeasurementError10,
            ..SimConfig::default()
        };
        assert!((c.error_variance() - 2.0).abs() < 1e-12);
        assert_eq!("measurement_error_20".parse::<Scenario>().unwrap(), Scenario::MeasurementError20);
        assert!("bogus".parse::<Scenario>().is_err());
    }

    #[test]
    fn truth_round_trip() {
        let c = SimConfig {
            n_persons: 7,
            ..SimConfig::default()
        };
        let p = generate(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        write_truth_csv(&path, &p).unwrap();
        let t = read_truth_csv(&path).unwrap();
        assert_eq!(t.traits, p.true_traits);
        assert_eq!(t.within, p.true_within);
        assert_eq!(t.tau[9], ("beta_4_3".to_string(), 0.4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            SimConfig {
                k_times: 1,
                ..SimConfig::default()
            },
            SimConfig {
                phi2: -1.0,
                ..SimConfig::default()
            },
            SimConfig {
                n_persons: 0,
                ..SimConfig::default()
            },
        ] {
            assert!(matches!(generate(&c), Err(Error::Config(_))));
        }
    }
}
