//! Step-1 output: trait covariances, the within-score covariance and the
//! covariance-preserving weight matrix, plus every centering method.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::{column_moments, stack_blocks, Centering, PanelDataset, ScoreSet};
use crate::error::{Error, Result};
use crate::measurement::{fit_measurement, FitOptions, MeasurementFit};
use crate::spd::{repair_psd, spd_power, symmetrize, SpdMatrix};

/// Ψ̂ repairs that clip more than this fraction of the trace are rejected.
pub const PSI_REPAIR_LIMIT: f64 = 0.05;

/// Trait covariance `Φ̂` and its stacked expansion `Φ̂⁺ = Φ̂ ⊗ 11ᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraitCovariance {
    pub phi: DMatrix<f64>,
    pub phi_plus: DMatrix<f64>,
}

impl TraitCovariance {
    /// Kronecker expansion with one `n_times`-long block per variable.
    pub fn from_phi(phi: DMatrix<f64>, n_times: usize) -> Self {
        let phi_plus = phi.kronecker(&DMatrix::from_element(n_times, n_times, 1.0));
        Self { phi, phi_plus }
    }
}

/// Linear predictor matrix `W` with `X̂* = Wᵗ (X − μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub w: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn transpose(&self) -> DMatrix<f64> {
        self.w.transpose()
    }
}

/// Correlation-preserving trait predictor
/// `Î_i = φ̂ / sqrt(1ᵗΣ̂⁻¹1) · 1ᵗΣ̂⁻¹(X_i − X̄)` with Σ̂ the model-implied covariance.
pub fn trait_predictor(series: &DMatrix<f64>, fit: &MeasurementFit) -> Result<DVector<f64>> {
    if !fit.converged || fit.improper {
        return Err(Error::Improper("trait predictor needs a converged, proper fit".into()));
    }
    let t = series.ncols();
    if fit.implied_sigma.nrows() != t {
        return Err(Error::Invalid("fit does not match the series length".into()));
    }
    let chol = Cholesky::new(fit.implied_sigma.clone()).ok_or_else(|| Error::Singular {
        context: "model-implied Σ̂ in the trait predictor".into(),
        eigenvalue: nalgebra::SymmetricEigen::new(fit.implied_sigma.clone()).eigenvalues.min(),
        floor: 0.0,
    })?;
    let weights = chol.solve(&DVector::from_element(t, 1.0));
    let scale = fit.params.phi2.max(0.0).sqrt() / weights.sum().sqrt();
    let mean = DVector::from_iterator(t, (0..t).map(|k| series.column(k).mean()));
    Ok(DVector::from_iterator(
        series.nrows(),
        series.row_iter().map(|row| scale * (row.transpose() - &mean).dot(&weights)),
    ))
}

/// `Φ̂`: diagonal from the fitted `φ̂²`, off-diagonals from sample
/// covariances of the trait predictions.
pub fn assemble_trait_covariance(
    fits: &[&MeasurementFit],
    names: &[&str],
    trait_scores: &DMatrix<f64>,
) -> Result<TraitCovariance> {
    if fits.is_empty() || fits.len() != trait_scores.ncols() || names.len() != fits.len() {
        return Err(Error::Invalid("one fit and one trait column per variable are required".into()));
    }
    if let Some(p) = fits.iter().position(|f| f.improper) {
        return Err(Error::Improper(names[p].to_string()));
    }
    let t = fits[0].implied_sigma.nrows();
    let v = fits.len();
    let (_, cov) = column_moments(trait_scores)?;
    let mut phi = DMatrix::zeros(v, v);
    for a in 0..v {
        phi[(a, a)] = fits[a].params.phi2;
        for b in 0..a {
            phi[(a, b)] = cov[(a, b)];
            phi[(b, a)] = cov[(a, b)];
        }
    }
    Ok(TraitCovariance::from_phi(phi, t))
}

#[derive(Debug, Clone)]
pub struct PsiEstimate {
    pub psi: SpdMatrix,
    pub clipped_fraction: f64,
    /// More than 1% of the trace was clipped.
    pub warning: bool,
}

/// `Ψ̂ = S − Φ̂⁺`, repaired to be positive definite.
pub fn estimate_psi(s: &DMatrix<f64>, trait_cov: &TraitCovariance) -> Result<PsiEstimate> {
    if s.shape() != trait_cov.phi_plus.shape() {
        return Err(Error::Invalid(format!(
            "S is {:?} but Φ̂⁺ is {:?}",
            s.shape(),
            trait_cov.phi_plus.shape()
        )));
    }
    let repaired = repair_psd(&(s - &trait_cov.phi_plus))?;
    if repaired.clipped_fraction > PSI_REPAIR_LIMIT {
        return Err(Error::UntrustworthyRepair {
            fraction: repaired.clipped_fraction,
            limit: PSI_REPAIR_LIMIT,
        });
    }
    Ok(PsiEstimate {
        psi: repaired.matrix,
        clipped_fraction: repaired.clipped_fraction,
        warning: repaired.warning,
    })
}

/// `Wᵗ = Ψ^{1/2} (Ψ^{3/2} Σ⁻¹ Ψ^{3/2})^{-1/2} Ψ^{3/2} Σ⁻¹`, which satisfies `WᵗΣW = Ψ`.
pub fn weight_matrix(psi: &SpdMatrix, sigma: &SpdMatrix) -> Result<WeightMatrix> {
    if psi.dim() != sigma.dim() {
        return Err(Error::Invalid("Ψ and Σ differ in size".into()));
    }
    let sigma_inv = spd_power(sigma, -1.0)?;
    let psi_half = spd_power(psi, 0.5)?;
    let psi_3h = spd_power(psi, 1.5)?;
    let inner = symmetrize(&(psi_3h.matrix() * sigma_inv.matrix() * psi_3h.matrix()));
    let inner_inv_half = spd_power(&SpdMatrix::new(inner)?, -0.5)?;
    let wt = psi_half.matrix() * inner_inv_half.matrix() * psi_3h.matrix() * sigma_inv.matrix();
    Ok(WeightMatrix { w: wt.transpose() })
}

/// Everything step 1 produces for one panel.
#[derive(Debug, Clone)]
pub struct Step1 {
    pub fits: Vec<MeasurementFit>,
    /// `N × V` trait predictions.
    pub traits: DMatrix<f64>,
    pub trait_cov: TraitCovariance,
    pub psi: PsiEstimate,
    pub weights: WeightMatrix,
    /// Stacked sample means and covariance of all variables.
    pub means: DVector<f64>,
    pub sample_cov: DMatrix<f64>,
}

/// Fits the measurement model to every variable of the panel.
pub fn fit_all_measurements(data: &PanelDataset, options: &FitOptions) -> Result<Vec<MeasurementFit>> {
    data.blocks().iter().map(|b| fit_measurement(b, options)).collect()
}

impl Step1 {
    pub fn fit(data: &PanelDataset, options: &FitOptions) -> Result<Self> {
        let fits = fit_all_measurements(data, options)?;
        Self::from_fits(data, fits)
    }

    /// Builds `Φ̂`, `Ψ̂` and `W` from per-variable fits; refuses improper or
    /// non-converged fits.
    pub fn from_fits(data: &PanelDataset, fits: Vec<MeasurementFit>) -> Result<Self> {
        for (fit, var) in fits.iter().zip(data.variables()) {
            if fit.improper {
                return Err(Error::Improper(var.name.clone()));
            }
            if !fit.converged {
                return Err(Error::NonConvergence {
                    iterations: fit.n_iterations,
                    context: format!("measurement model for `{}`", var.name),
                });
            }
        }
        let n = data.n_persons();
        let v = data.variables().len();
        let mut traits = DMatrix::zeros(n, v);
        for (j, fit) in fits.iter().enumerate() {
            traits.set_column(j, &trait_predictor(data.series(j), fit)?);
        }
        let refs: Vec<&MeasurementFit> = fits.iter().collect();
        let names: Vec<&str> = data.variables().iter().map(|v| v.name.as_str()).collect();
        let trait_cov = assemble_trait_covariance(&refs, &names, &traits)?;
        let x = stack_blocks(&data.blocks().iter().collect::<Vec<_>>());
        let (means, sample_cov) = column_moments(&x)?;
        let psi = estimate_psi(&sample_cov, &trait_cov)?;
        let sigma = SpdMatrix::new(sample_cov.clone())?;
        let weights = weight_matrix(&psi.psi, &sigma)?;
        Ok(Self {
            fits,
            traits,
            trait_cov,
            psi,
            weights,
            means,
            sample_cov,
        })
    }
}

/// Inputs some centering methods need beyond the panel itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct CenteringInputs<'a> {
    pub step1: Option<&'a Step1>,
    /// Generator-provided traits, `N × V`.
    pub true_traits: Option<&'a DMatrix<f64>>,
}

fn means_matrix(data: &PanelDataset) -> DMatrix<f64> {
    let t = data.n_times();
    DMatrix::from_fn(t, data.variables().len(), |k, v| data.series(v).column(k).mean())
}

/// Produces within-person scores with the requested centering.
pub fn center(data: &PanelDataset, method: Centering, inputs: CenteringInputs<'_>) -> Result<ScoreSet> {
    let vars = data.variables().to_vec();
    let n = data.n_persons();
    let t = data.n_times();
    let subtract_traits = |traits: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
        data.blocks()
            .iter()
            .enumerate()
            .map(|(v, b)| DMatrix::from_fn(n, t, |i, k| b[(i, k)] - traits[(i, v)]))
            .collect()
    };
    let need = |what: &str| Error::Config(format!("centering `{method}` requires {what}"));
    match method {
        Centering::None => ScoreSet::new(vars, data.blocks().to_vec(), method),
        Centering::ObservedMean => {
            let blocks = data
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
            ScoreSet::new(vars, blocks, method)
        }
        Centering::TrueScores => {
            let traits = inputs.true_traits.ok_or_else(|| need("generator-provided true traits"))?;
            if traits.shape() != (n, vars.len()) {
                return Err(Error::Config("true traits do not match the panel shape".into()));
            }
            Ok(ScoreSet::new(vars, subtract_traits(traits), method)?.with_traits(traits.clone()))
        }
        Centering::TraitPredictor => {
            let step1 = inputs.step1.ok_or_else(|| need("step-1 measurement fits"))?;
            Ok(ScoreSet::new(vars, subtract_traits(&step1.traits), method)?
                .with_traits(step1.traits.clone())
                .with_source_means(means_matrix(data)))
        }
        Centering::Proposed => {
            let step1 = inputs.step1.ok_or_else(|| need("step-1 fits and weight matrix"))?;
            let x = stack_blocks(&data.blocks().iter().collect::<Vec<_>>());
            if x.ncols() != step1.weights.w.nrows() {
                return Err(Error::Config("weight matrix does not match the panel".into()));
            }
            let mut centered = x;
            for (j, mut col) in centered.column_iter_mut().enumerate() {
                col.add_scalar_mut(-step1.means[j]);
            }
            // rows are persons: (Wᵗ x_i)ᵗ = x_iᵗ W
            let scores = centered * &step1.weights.w;
            let blocks = (0..vars.len()).map(|v| scores.columns(v * t, t).into_owned()).collect();
            let mut set = ScoreSet::new(vars, blocks, method)?
                .with_traits(step1.traits.clone())
                .with_source_means(means_matrix(data));
            if step1.psi.warning {
                set = set.with_warning(format!(
                    "psi repair clipped {:.4} of the trace",
                    step1.psi.clipped_fraction
                ));
            }
            Ok(set)
        }
    }
}
