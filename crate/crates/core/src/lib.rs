//! Two-step estimation of within-person joint causal effects of time-varying
//! continuous treatments.
//!
//! Step 1 fits a random-intercept measurement model to every variable and
//! turns the observed panel into within-person variability scores with a
//! covariance-preserving linear predictor. Step 2 estimates the joint
//! effects of the treatment history on later outcomes from those scores,
//! either with a marginal structural model (stabilized inverse probability
//! weights) or with a linear structural nested mean model (G-estimation).
//! A data-generating simulator and a Monte Carlo harness compare both
//! against alternative centering methods.

pub mod causal;
pub mod data;
pub mod error;
pub mod harness;
pub mod measurement;
pub mod msm;
pub mod regression;
pub mod scores;
pub mod sim;
pub mod snmm;
pub mod spd;

pub use data::{Centering, PanelDataset, Role, ScoreSet, VariableSpec};
pub use error::{Error, Result};
