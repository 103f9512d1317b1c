//! Least-squares helpers shared by the treatment, MSM and G-estimation models.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold of the scaled Gram matrix below which a
/// design is treated as collinear.
const COLLINEARITY_TOL: f64 = 1e-10;

/// A design matrix with named columns.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    columns: Vec<DVector<f64>>,
    pub names: Vec<String>,
}

impl Design {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            columns: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn with_intercept(n: usize) -> Self {
        let mut d = Self::new(n);
        d.push("intercept", DVector::from_element(n, 1.0));
        d
    }

    pub fn push(&mut self, name: impl Into<String>, column: DVector<f64>) {
        debug_assert_eq!(column.len(), self.n);
        self.columns.push(column);
        self.names.push(name.into());
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        if self.columns.is_empty() {
            return DMatrix::zeros(self.n, 0);
        }
        DMatrix::from_columns(&self.columns)
    }
}

/// Cholesky factor of `XᵗWX`, with collinear columns reported by name.
pub(crate) fn gram_factor(gram: &DMatrix<f64>, names: &[String], context: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let p = gram.nrows();
    let scale: Vec<f64> = (0..p).map(|j| gram[(j, j)].max(0.0).sqrt()).collect();
    let zero: Vec<String> = (0..p).filter(|&j| scale[j] == 0.0).map(|j| names[j].clone()).collect();
    if !zero.is_empty() {
        return Err(Error::Collinear {
            context: context.to_string(),
            columns: zero,
        });
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
    let eig = SymmetricEigen::new(scaled);
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, l)| if l < acc.1 { (i, l) } else { acc });
    if lmin < COLLINEARITY_TOL * eig.eigenvalues.max() {
        let v = eig.eigenvectors.column(imin);
        let columns = (0..p).filter(|&j| v[j].abs() > 0.1).map(|j| names[j].clone()).collect();
        return Err(Error::Collinear {
            context: context.to_string(),
            columns,
        });
    }
    Cholesky::new(gram.clone()).ok_or_else(|| Error::Collinear {
        context: context.to_string(),
        columns: names.to_vec(),
    })
}

/// Weighted least-squares fit with HC0 sandwich covariance.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `Σ w e² / Σ w` (the ML residual variance when unweighted).
    pub resid_var: f64,
    pub r_squared: f64,
    pub robust_cov: DMatrix<f64>,
}

impl LinearFit {
    pub fn robust_se(&self) -> Vec<f64> {
        self.robust_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|j| self.coef[j])
    }
}

pub fn ols(design: &Design, y: &DVector<f64>, context: &str) -> Result<LinearFit> {
    fit_linear(design, y, None, context)
}

pub fn wls(design: &Design, y: &DVector<f64>, weights: &DVector<f64>, context: &str) -> Result<LinearFit> {
    fit_linear(design, y, Some(weights), context)
}

fn fit_linear(design: &Design, y: &DVector<f64>, weights: Option<&DVector<f64>>, context: &str) -> Result<LinearFit> {
    let x = &design.matrix();
    let n = x.nrows();
    if y.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Invalid(format!("{context}: length mismatch")));
    }
    if n <= x.ncols() {
        return Err(Error::Invalid(format!("{context}: {n} observations for {} coefficients", x.ncols())));
    }
    let xw = match weights {
        Some(w) => {
            let mut xw = x.clone();
            for (i, mut row) in xw.row_iter_mut().enumerate() {
                row *= w[i];
            }
            xw
        }
        None => x.clone(),
    };
    let gram = xw.tr_mul(x);
    let chol = gram_factor(&gram, &design.names, context)?;
    let coef = chol.solve(&xw.tr_mul(y));
    let residuals = y - x * &coef;
    let (sw, swe2) = match weights {
        Some(w) => (w.sum(), w.iter().zip(residuals.iter()).map(|(w, e)| w * e * e).sum::<f64>()),
        None => (n as f64, residuals.norm_squared()),
    };
    let resid_var = swe2 / sw;
    let ybar = match weights {
        Some(w) => w.dot(y) / sw,
        None => y.mean(),
    };
    let tss: f64 = match weights {
        Some(w) => y.iter().zip(w.iter()).map(|(v, w)| w * (v - ybar).powi(2)).sum(),
        None => y.iter().map(|v| (v - ybar).powi(2)).sum(),
    };
    let r_squared = if tss > 0.0 { 1.0 - swe2 / tss } else { 0.0 };

    // HC0: (XᵗWX)⁻¹ Xᵗ W diag(e²) W X (XᵗWX)⁻¹
    let mut score = xw;
    for (i, mut row) in score.row_iter_mut().enumerate() {
        row *= residuals[i];
    }
    let meat = score.tr_mul(&score);
    let bread = chol.inverse();
    let robust_cov = &bread * meat * &bread;
    Ok(LinearFit {
        names: design.names.clone(),
        coef,
        residuals,
        resid_var,
        r_squared,
        robust_cov,
    })
}

/// Least-squares projection onto the column space of a fixed design;
/// residualizes many responses at once.
pub(crate) struct Projector {
    x: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    pub fn new(design: &Design, context: &str) -> Result<Self> {
        let x = design.matrix();
        let gram = x.tr_mul(&x);
        let chol = gram_factor(&gram, &design.names, context)?;
        Ok(Self { x, chol })
    }

    /// Coefficients of the regression of every column of `z`.
    pub fn coefficients(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(&self.x.tr_mul(z))
    }

    /// Residuals and coefficients of every column of `z`.
    pub fn residualize(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let coef = self.coefficients(z);
        (z - &self.x * &coef, coef)
    }
}
