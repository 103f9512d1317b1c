//! Joint-effect parameters shared by the MSM and SNMM estimators.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::Centering;
use crate::error::{Error, Result};

/// Treatment occasions whose effects are estimated (inclusive range).
///
/// Outcomes are every occasion after the first intervened treatment. For
/// outcome `m` the intervened treatments are `first..=min(m-1, last)`;
/// treatments before `first` enter the MSM as controls and the SNMM as
/// history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionWindow {
    pub first: usize,
    pub last: usize,
}

impl InterventionWindow {
    pub fn new(first: usize, last: usize) -> Self {
        Self { first, last }
    }

    /// All treatments for `K ≤ 4`; the last four treatments otherwise, so
    /// the window always carries ten lagged effects once `K ≥ 4`.
    pub fn default_for(k: usize) -> Self {
        if k <= 4 {
            Self::new(0, k.saturating_sub(1))
        } else {
            Self::new(k - 4, k - 1)
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.first > self.last {
            return Err(Error::Config(format!(
                "window {}..{} is empty",
                self.first, self.last
            )));
        }
        if self.last >= k {
            return Err(Error::Config(format!(
                "treatment at time {} has no later outcome (K = {k})",
                self.last
            )));
        }
        Ok(())
    }

    /// Outcome occasions `first+1..=K`.
    pub fn outcomes(&self, k: usize) -> std::ops::RangeInclusive<usize> {
        self.first + 1..=k
    }

    /// Intervened treatments for outcome `m`.
    pub fn treatments_for(&self, m: usize) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last.min(m - 1)
    }
}

impl fmt::Display for InterventionWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl std::str::FromStr for InterventionWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| Error::Config(format!("window `{s}` must look like `first..last`")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad window bound `{x}`")))
        };
        Ok(Self::new(parse(a)?, parse(b)?))
    }
}

/// One causal parameter: `β_{m t}` or its modification `γ_{m t v}` by confounder `v`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamName {
    pub outcome: usize,
    pub treatment: usize,
    /// Name of the effect-modifying confounder, `None` for the main effect.
    pub modifier: Option<String>,
}

impl ParamName {
    pub fn beta(outcome: usize, treatment: usize) -> Self {
        Self {
            outcome,
            treatment,
            modifier: None,
        }
    }

    pub fn gamma(outcome: usize, treatment: usize, modifier: impl Into<String>) -> Self {
        Self {
            outcome,
            treatment,
            modifier: Some(modifier.into()),
        }
    }

    pub fn lag(&self) -> usize {
        self.outcome - self.treatment
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.modifier {
            None => write!(f, "beta_{}_{}", self.outcome, self.treatment),
            Some(v) => write!(f, "gamma_{}_{}_{}", self.outcome, self.treatment, v),
        }
    }
}

/// Main-effect parameters of a window in canonical order (outcome, then treatment).
pub fn beta_params(k: usize, window: &InterventionWindow) -> Vec<ParamName> {
    window
        .outcomes(k)
        .flat_map(|m| window.treatments_for(m).map(move |t| ParamName::beta(m, t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Msm,
    Snmm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Msm => "msm",
            Method::Snmm => "snmm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msm" => Ok(Method::Msm),
            "snmm" => Ok(Method::Snmm),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// A named estimate with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

/// Point estimates of the joint-effect parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimates {
    pub method: Method,
    pub centering: Centering,
    /// Causal parameters (β and γ) in canonical order.
    pub params: Vec<ParamName>,
    pub tau: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// MSM intercepts `α_m` and control coefficients; empty for the SNMM.
    pub nuisance: Vec<Estimate>,
    /// Parameters of the window that could not be identified.
    pub absent: Vec<ParamName>,
    pub warnings: Vec<String>,
}

impl CausalEstimates {
    pub fn get(&self, name: &ParamName) -> Option<(f64, f64)> {
        self.params
            .iter()
            .position(|p| p == name)
            .map(|j| (self.tau[j], self.standard_errors[j]))
    }

    pub fn estimate(&self, name: &ParamName) -> Option<f64> {
        self.get(name).map(|(e, _)| e)
    }

    /// Rows in reporting order: latest outcome first, then latest treatment,
    /// main effect before its modifiers.
    pub fn report_rows(&self) -> Vec<Estimate> {
        let mut idx: Vec<usize> = (0..self.params.len()).collect();
        idx.sort_by(|&a, &b| {
            let (pa, pb) = (&self.params[a], &self.params[b]);
            pb.outcome
                .cmp(&pa.outcome)
                .then(pb.treatment.cmp(&pa.treatment))
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .map(|j| Estimate {
                name: self.params[j].to_string(),
                estimate: self.tau[j],
                se: self.standard_errors[j],
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_windows_have_ten_parameters() {
        let w4 = InterventionWindow::default_for(4);
        assert_eq!(w4, InterventionWindow::new(0, 3));
        let names: Vec<String> = beta_params(4, &w4).iter().map(|p| p.to_string()).collect();
        assert_eq!(
            names,
            [
                "beta_1_0", "beta_2_0", "beta_2_1", "beta_3_0", "beta_3_1", "beta_3_2", "beta_4_0", "beta_4_1",
                "beta_4_2", "beta_4_3"
            ]
        );
        let w8 = InterventionWindow::default_for(8);
        assert_eq!(w8, InterventionWindow::new(4, 7));
        let p8 = beta_params(8, &w8);
        assert_eq!(p8.len(), 10);
        assert_eq!(p8[0], ParamName::beta(5, 4));
        assert_eq!(p8[9], ParamName::beta(8, 7));
    }

    #[test]
    fn window_validation() {
        assert!(InterventionWindow::new(0, 2).validate(2).is_err());
        assert!(InterventionWindow::new(2, 1).validate(4).is_err());
        assert!(InterventionWindow::new(1, 1).validate(2).is_ok());
        assert_eq!("4..7".parse::<InterventionWindow>().unwrap(), InterventionWindow::new(4, 7));
    }
}
