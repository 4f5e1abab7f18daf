use nalgebra::DMatrix;

use super::SystemError;

const MAX_ITER: usize = 100_000;
const TOL: f64 = 1e-10;

/// Infinite-horizon discrete LQR gain `K` for `u = -K x`, from the
/// fixed point of the Riccati recursion.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SystemError> {
    let n = a.nrows();
    let m = b.ncols();
    let shape = |what, mat: &DMatrix<f64>, er, ec| {
        if mat.shape() == (er, ec) {
            Ok(())
        } else {
            Err(SystemError::DimensionMismatch {
                what,
                expected: (er, ec),
                found: mat.shape(),
            })
        }
    };
    shape("A", a, n, n)?;
    shape("B", b, n, m)?;
    shape("Q", q, n, n)?;
    shape("R", r, m, m)?;

    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, SystemError> {
        let s = r + b.transpose() * p * b;
        let ch = s.cholesky().ok_or(SystemError::SingularInputCost)?;
        Ok(ch.solve(&(b.transpose() * p * a)))
    };

    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let k = gain(&p)?;
        let next = q + a.transpose() * &p * (a - b * &k);
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).norm();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        p = next;
        if change <= TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SystemError::NoConvergence {
            iterations: MAX_ITER,
        });
    }
    let k = gain(&p)?;
    let rho = spectral_radius(&(a - b * &k));
    if rho >= 1.0 {
        return Err(SystemError::Unstable {
            spectral_radius: rho,
        });
    }
    Ok(k)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
