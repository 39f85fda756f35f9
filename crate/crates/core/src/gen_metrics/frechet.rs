//! Gaussian fits of feature sets and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues in `[-NEG_TOL, 0)` are rounding noise and clipped to zero.
pub const NEG_TOL: f64 = 1e-8;
/// Relative Frobenius residual accepted for `S·S ≈ A`.
pub const SQRT_RESIDUAL_TOL: f64 = 1e-6;
/// Small negative distances above this are clipped to zero.
pub const FID_CLIP: f64 = -1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Column means and unbiased covariance of an `n × d` feature matrix.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::invalid(format!("fit_gaussian needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::invalid("fit_gaussian: zero-dimensional features"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("feature matrix contains a non-finite value".into()));
    }
    let mu = features.row_mean().transpose();
    let mut centred = features.clone();
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let s = centred.transpose() * &centred / (n - 1) as f64;
    let sigma = (&s + s.transpose()) * 0.5;
    Ok(FeatureStats { mu, sigma, n })
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn clipped_eigenvalues(eig: &SymmetricEigen<f64, nalgebra::Dyn>, what: &str) -> Result<DVector<f64>> {
    // Relative to the spectrum so large-scale features do not trip the check.
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut out = eig.eigenvalues.clone();
    for v in out.iter_mut() {
        if *v < -NEG_TOL * scale {
            return Err(Error::Numerical(format!("{what}: eigenvalue {v:e} is negative beyond tolerance")));
        }
        *v = v.max(0.0);
    }
    Ok(out)
}

fn psd_sqrt_eigen(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let lam = clipped_eigenvalues(&eig, what)?;
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&lam.map(f64::sqrt));
    Ok(symmetrize(&(q * d * q.transpose())))
}

fn is_symmetric(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1.0);
    (a - a.transpose()).amax() <= 1e-9 * scale
}

/// Square root of a triangular matrix with a non-negative diagonal.
fn triangular_sqrt(t: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = t.nrows();
    let mut u = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = t[(i, i)];
        let scale = t.amax().max(1.0);
        if d < -NEG_TOL * scale {
            return None;
        }
        u[(i, i)] = d.max(0.0).sqrt();
    }
    for j in 0..n {
        for i in (0..j).rev() {
            let s: f64 = ((i + 1)..j).map(|k| u[(i, k)] * u[(k, j)]).sum();
            let num = t[(i, j)] - s;
            let den = u[(i, i)] + u[(j, j)];
            u[(i, j)] = if den.abs() > f64::EPSILON { num / den } else { 0.0 };
        }
    }
    Some(u)
}

fn denman_beavers(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse()?;
        let zi = z.clone().try_inverse()?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-14 * y.norm().max(1.0) {
            break;
        }
    }
    Some(y)
}

fn residual(s: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    (s * s - a).norm()
}

/// Principal square root of a matrix with a real non-negative spectrum.
///
/// Symmetric input goes through an eigendecomposition. A general product of
/// two PSD matrices goes through a real Schur form, falling back to a
/// Denman–Beavers iteration if the form has 2×2 blocks.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::shape(format!("matrix_sqrt_psd needs a square matrix, got {:?}", a.shape())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix_sqrt_psd: non-finite entry".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let s = if is_symmetric(a) {
        psd_sqrt_eigen(a, "matrix_sqrt_psd")?
    } else {
        let (q, t) = Schur::new(a.clone()).unpack();
        let quasi = (0..n - 1).any(|i| t[(i + 1, i)].abs() > 1e-12 * t.amax().max(1.0));
        match (!quasi).then(|| triangular_sqrt(&t)).flatten() {
            Some(u) => &q * u * q.transpose(),
            None => denman_beavers(a)
                .ok_or_else(|| Error::Numerical("matrix_sqrt_psd: iteration hit a singular matrix".into()))?,
        }
    };
    let r = residual(&s, a);
    let tol = SQRT_RESIDUAL_TOL * a.norm().max(f64::MIN_POSITIVE);
    if r > tol && r > 1e-12 {
        return Err(Error::Numerical(format!("matrix_sqrt_psd residual {r:e} exceeds {tol:e}")));
    }
    Ok(s)
}

/// `Tr((Σr Σg)^{1/2})` via the symmetric form `Σr^{1/2} Σg Σr^{1/2}`.
pub fn trace_sqrt_product(sr: &DMatrix<f64>, sg: &DMatrix<f64>) -> Result<f64> {
    let half = psd_sqrt_eigen(sr, "real covariance")?;
    let inner = symmetrize(&(&half * sg * &half));
    let eig = SymmetricEigen::new(inner);
    Ok(clipped_eigenvalues(&eig, "covariance product")?.iter().map(|v| v.sqrt()).sum())
}

pub fn fid(real: &FeatureStats, gen: &FeatureStats) -> Result<f64> {
    if real.dim() != gen.dim() || real.sigma.shape() != gen.sigma.shape() {
        return Err(Error::shape(format!(
            "fid: feature dimensions differ ({} vs {})",
            real.dim(),
            gen.dim()
        )));
    }
    let dmu = (&real.mu - &gen.mu).norm_squared();
    let tr = real.sigma.trace() + gen.sigma.trace() - 2.0 * trace_sqrt_product(&real.sigma, &gen.sigma)?;
    let v = dmu + tr;
    if !v.is_finite() {
        return Err(Error::Numerical("fid is not finite".into()));
    }
    if v < 0.0 {
        let scale = (real.sigma.trace() + gen.sigma.trace()).max(1.0);
        if v < FID_CLIP * scale {
            return Err(Error::Numerical(format!("fid came out negative ({v:e})")));
        }
        return Ok(0.0);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn stats1(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mu: DVector::from_element(1, mu),
            sigma: DMatrix::from_element(1, 1, var),
            n: 10,
        }
    }

    #[test]
    fn gaussian_fit_hand_case() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let s = fit_gaussian(&f).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, DMatrix::from_element(2, 2, 2.0));
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(fit_gaussian(&same).unwrap().sigma, DMatrix::zeros(2, 2));
        assert!(fit_gaussian(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn sqrt_diagonal_and_identity() {
        let i = DMatrix::<f64>::identity(4, 4);
        assert_abs_diff_eq!(matrix_sqrt_psd(&i).unwrap(), i, epsilon = 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = matrix_sqrt_psd(&d).unwrap();
        assert_abs_diff_eq!(s, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])), epsilon = 1e-12);
    }

    #[test]
    fn sqrt_rejects_negative_spectrum() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(matrix_sqrt_psd(&d), Err(Error::Numerical(_))));
        let tiny = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-10]));
        assert!(matrix_sqrt_psd(&tiny).is_ok());
    }

    #[test]
    fn fid_closed_forms() {
        assert_abs_diff_eq!(fid(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fid(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(fid(&stats1(2.0, 3.0), &stats1(2.0, 3.0)).unwrap(), 0.0);
        let wide = FeatureStats {
            mu: DVector::zeros(2),
            sigma: DMatrix::identity(2, 2),
            n: 2,
        };
        assert!(fid(&stats1(0.0, 1.0), &wide).is_err());
    }
}
