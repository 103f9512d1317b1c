//! Symmetric positive (semi)definite matrix powers via eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetry tolerance (absolute, scaled by the largest entry).
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Relative eigenvalue floor: `EIGEN_FLOOR_REL * max eigenvalue`.
pub const EIGEN_FLOOR_REL: f64 = 1e-10;

/// A symmetric matrix whose eigenvalues are (numerically) nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
}

impl SpdMatrix {
    /// Validates symmetry and `λ_min ≥ -1e-10 · max(1, λ_max)`.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        check_square(&entries)?;
        let scale = entries.amax().max(1.0);
        let asym = (&entries - entries.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Invalid(format!("matrix is not symmetric (max asymmetry {asym:e})")));
        }
        let sym = symmetrize(&entries);
        let eig = SymmetricEigen::new(sym.clone());
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if lmin < -SYMMETRY_TOL * lmax.abs().max(1.0) {
            return Err(Error::Singular {
                context: "matrix is not positive semidefinite".into(),
                eigenvalue: lmin,
                floor: -SYMMETRY_TOL * lmax.abs().max(1.0),
            });
        }
        Ok(Self { entries: sym })
    }

    /// Wraps a matrix known to be symmetric PSD by construction.
    pub(crate) fn from_trusted(entries: DMatrix<f64>) -> Self {
        Self {
            entries: symmetrize(&entries),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Invalid(format!("expected a nonempty square matrix, got {:?}", m.shape())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("matrix has non-finite entries".into()));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn reconstruct(vectors: &DMatrix<f64>, values: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values(j);
    }
    let out = &scaled * vectors.transpose();
    symmetrize(&out)
}

/// `C^p` for symmetric PSD `C` and `p ∈ {1/2, -1/2, 3/2, -1}` (any real `p`
/// is accepted). Negative powers fail when an eigenvalue lies below
/// `1e-10 · λ_max`.
pub fn spd_power(c: &SpdMatrix, p: f64) -> Result<SpdMatrix> {
    spd_power_with_floor(c, p, None)
}

/// As [`spd_power`] with an explicit absolute eigenvalue floor.
pub fn spd_power_with_floor(c: &SpdMatrix, p: f64, floor: Option<f64>) -> Result<SpdMatrix> {
    let eig = SymmetricEigen::new(c.matrix().clone());
    let lmax = eig.eigenvalues.max().max(0.0);
    let floor = floor.unwrap_or(EIGEN_FLOOR_REL * lmax);
    if p < 0.0 {
        let lmin = eig.eigenvalues.min();
        if lmin <= floor || lmax == 0.0 {
            return Err(Error::Singular {
                context: format!("negative power {p} of a {}x{} matrix", c.dim(), c.dim()),
                eigenvalue: lmin,
                floor,
            });
        }
    }
    let values = &eig.eigenvalues;
    let out = reconstruct(&eig.eigenvectors, |j| {
        let l = values[j].max(0.0);
        if l == 0.0 {
            0.0
        } else {
            l.powf(p)
        }
    });
    Ok(SpdMatrix::from_trusted(out))
}

/// Result of [`repair_psd`].
#[derive(Debug, Clone)]
pub struct RepairedPsd {
    pub matrix: SpdMatrix,
    /// Sum of `floor - λ` over the clipped eigenvalues.
    pub clipped_mass: f64,
    /// `clipped_mass / |trace|` of the repaired matrix.
    pub clipped_fraction: f64,
    /// Set when more than 1% of the trace had to be added.
    pub warning: bool,
}

/// Symmetrizes `C` and lifts eigenvalues below the floor up to it.
///
/// The floor is `1e-10 · λ_max`. A matrix that is already PSD with all
/// eigenvalues above the floor is returned unchanged (after symmetrization).
pub fn repair_psd(c: &DMatrix<f64>) -> Result<RepairedPsd> {
    check_square(c)?;
    let sym = symmetrize(c);
    let eig = SymmetricEigen::new(sym.clone());
    let lmax = eig.eigenvalues.max();
    let floor = EIGEN_FLOOR_REL * lmax.max(0.0);
    let clipped_mass: f64 = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l < floor)
        .map(|&l| floor - l)
        .sum();
    if clipped_mass == 0.0 {
        return Ok(RepairedPsd {
            matrix: SpdMatrix::from_trusted(sym),
            clipped_mass: 0.0,
            clipped_fraction: 0.0,
            warning: false,
        });
    }
    let values = &eig.eigenvalues;
    let repaired = reconstruct(&eig.eigenvectors, |j| values[j].max(floor));
    let trace = repaired.trace().abs();
    let clipped_fraction = if trace > 0.0 { clipped_mass / trace } else { f64::INFINITY };
    Ok(RepairedPsd {
        matrix: SpdMatrix::from_trusted(repaired),
        clipped_mass,
        clipped_fraction,
        warning: clipped_fraction > 0.01,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> SpdMatrix {
        SpdMatrix::new(DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))).unwrap()
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.amax()
    }

    #[test]
    fn identity_square_root() {
        let i = SpdMatrix::new(DMatrix::identity(4, 4)).unwrap();
        let r = spd_power(&i, 0.5).unwrap();
        assert!(max_abs(&(r.matrix() - DMatrix::<f64>::identity(4, 4))) < 1e-15);
    }

    #[test]
    fn diagonal_powers() {
        let d = diag(&[4.0, 9.0]);
        let half = spd_power(&d, 0.5).unwrap();
        let three_half = spd_power(&d, 1.5).unwrap();
        let expect_half = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[2.0, 3.0]));
        let expect_3h = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[8.0, 27.0]));
        assert!(max_abs(&(half.matrix() - expect_half)) < 1e-12);
        assert!(max_abs(&(three_half.matrix() - expect_3h)) < 1e-12);
        let inv = spd_power(&d, -1.0).unwrap();
        assert!((inv.matrix()[(1, 1)] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn negative_power_of_singular_matrix_reports_eigenvalue() {
        let d = diag(&[1.0, 0.0]);
        match spd_power(&d, -0.5) {
            Err(Error::Singular { eigenvalue, .. }) => assert_eq!(eigenvalue, 0.0),
            other => panic!("expected singular error, got {other:?}"),
        }
        // positive powers of a PSD matrix are fine
        assert!(spd_power(&d, 0.5).is_ok());
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(SpdMatrix::new(m).is_err());
    }

    #[test]
    fn repair_is_fixed_point_on_spd_input() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let r = repair_psd(&m).unwrap();
        assert!(max_abs(&(r.matrix.matrix() - &m)) < 1e-12);
        assert_eq!(r.clipped_mass, 0.0);
        assert!(!r.warning);
    }

    #[test]
    fn repair_clips_to_floor() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let r = repair_psd(&m).unwrap();
        let floor = EIGEN_FLOOR_REL * 1.0;
        assert!((r.matrix.matrix()[(1, 1)] - floor).abs() < 1e-20);
        assert!((r.matrix.matrix()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((r.clipped_mass - (floor + 1e-12)).abs() < 1e-20);
        assert!(!r.warning);
        assert!(spd_power(&r.matrix, 0.5).is_ok());
    }

    #[test]
    fn repair_flags_large_clipping() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let r = repair_psd(&m).unwrap();
        assert!(r.warning);
        assert!(r.clipped_fraction > 0.4);
    }

    fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
    }

    #[test]
    fn random_five_by_five_reconstruction() {
        let m = random_spd(5, 3);
        let c = SpdMatrix::new(m.clone()).unwrap();
        let h = spd_power(&c, 0.5).unwrap();
        let back = h.matrix() * h.matrix();
        assert!(max_abs(&(back - &m)) < 1e-8 * m.norm());
    }

    proptest! {
        #[test]
        fn half_powers_compose(dim in 1usize..8, seed in any::<u64>()) {
            let m = random_spd(dim, seed);
            let c = SpdMatrix::new(m.clone()).unwrap();
            let h = spd_power(&c, 0.5).unwrap();
            let hi = spd_power(&c, -0.5).unwrap();
            prop_assert!(max_abs(&(h.matrix() * h.matrix() - &m)) < 1e-8 * m.norm());
            let eye = DMatrix::<f64>::identity(dim, dim);
            prop_assert!(max_abs(&(hi.matrix() * h.matrix() - eye)) < 1e-8);
            let h3 = spd_power(&c, 1.5).unwrap();
            prop_assert!(max_abs(&(h3.matrix() - &m * h.matrix())) < 1e-8 * m.norm().powf(1.5).max(1.0));
        }

        #[test]
        fn power_commutes_with_rotation(dim in 2usize..7, seed in any::<u64>()) {
            let m = random_spd(dim, seed);
            let q = nalgebra::linalg::QR::new(random_spd(dim, seed ^ 0x9e37)).q();
            let rotated = SpdMatrix::new(symmetrize(&(&q * &m * q.transpose()))).unwrap();
            let lhs = spd_power(&rotated, 0.5).unwrap();
            let rhs = &q * spd_power(&SpdMatrix::new(m.clone()).unwrap(), 0.5).unwrap().matrix() * q.transpose();
            prop_assert!(max_abs(&(lhs.matrix() - rhs)) < 1e-8 * m.norm().max(1.0));
        }
    }
}
