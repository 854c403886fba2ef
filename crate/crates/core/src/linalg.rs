//! Small dense kernels on row-major slices. Dimensions here are the number of
//! assets and Brownian motions, so allocation-free loops beat a general
//! matrix library in the per-step inner loops.

use crate::error::{Error, Result};

/// In-place Cholesky factor (lower) of an n x n symmetric matrix. Returns
/// false when a pivot is not positive relative to `tol * trace / n`.
pub fn cholesky(a: &mut [f64], n: usize, tol: f64) -> bool {
    let scale = (0..n).map(|i| a[i * n + i].abs()).sum::<f64>() / n.max(1) as f64;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tol * scale) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves L L^T x = b in place given the factor from `cholesky`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Gram matrix sigma sigma^T (d x d) of a d x m matrix, Cholesky factored.
pub fn factor_gram(sigma: &[f64], d: usize, m: usize, t: f64, out: &mut [f64]) -> Result<()> {
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..m).map(|k| sigma[i * m + k] * sigma[j * m + k]).sum();
        }
    }
    if cholesky(out, d, 1e-12) {
        Ok(())
    } else {
        Err(Error::RankDeficient { t })
    }
}

/// Coordinates h = (sigma sigma^T)^{-1} sigma v, so that sigma^T h is the
/// projection of v onto the row space of sigma.
pub fn row_coords(sigma: &[f64], gram_l: &[f64], d: usize, m: usize, v: &[f64], h: &mut [f64]) {
    for i in 0..d {
        h[i] = (0..m).map(|k| sigma[i * m + k] * v[k]).sum();
    }
    cholesky_solve(gram_l, d, h);
}

/// sigma^T h.
pub fn lift_rows(sigma: &[f64], d: usize, m: usize, h: &[f64], out: &mut [f64]) {
    for k in 0..m {
        out[k] = (0..d).map(|i| sigma[i * m + k] * h[i]).sum();
    }
}

/// Minimal-norm solution of sigma x = b.
pub fn min_norm_solve(sigma: &[f64], d: usize, m: usize, b: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    let mut g = vec![0.0; d * d];
    let mut h = vec![0.0; d];
    min_norm_solve_with(sigma, d, m, b, t, out, &mut g, &mut h)
}

/// `min_norm_solve` with caller-provided scratch (d*d and d entries).
#[allow(clippy::too_many_arguments)]
pub fn min_norm_solve_with(
    sigma: &[f64],
    d: usize,
    m: usize,
    b: &[f64],
    t: f64,
    out: &mut [f64],
    g: &mut [f64],
    h: &mut [f64],
) -> Result<()> {
    factor_gram(sigma, d, m, t, g)?;
    h[..d].copy_from_slice(&b[..d]);
    cholesky_solve(g, d, h);
    lift_rows(sigma, d, m, h, out);
    Ok(())
}

/// Orthonormal basis of the null space of sigma, written column by column
/// into `out` (m x (m-d), column j at `out[j*m..(j+1)*m]`). Canonical vectors
/// are projected onto the null space, starting from the last d+1.. axes, and
/// orthonormalised.
pub fn null_basis(sigma: &[f64], d: usize, m: usize, t: f64, out: &mut [f64]) -> Result<()> {
    let mut g = vec![0.0; d * d];
    factor_gram(sigma, d, m, t, &mut g)?;
    let free = m - d;
    let mut h = vec![0.0; d];
    let mut lifted = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut found = 0;
    let order = (d..m).chain(0..d);
    for axis in order {
        if found == free {
            break;
        }
        v.fill(0.0);
        v[axis] = 1.0;
        row_coords(sigma, &g, d, m, &v, &mut h);
        lift_rows(sigma, d, m, &h, &mut lifted);
        for k in 0..m {
            v[k] -= lifted[k];
        }
        for _ in 0..2 {
            for j in 0..found {
                let c = &out[j * m..(j + 1) * m];
                let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for k in 0..m {
                    v[k] -= dot * c[k];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for k in 0..m {
                out[found * m + k] = v[k] / norm;
            }
            found += 1;
        }
    }
    if found < free {
        return Err(Error::RankDeficient { t });
    }
    Ok(())
}

/// Projection of v onto the null space of sigma.
pub fn project_null(sigma: &[f64], d: usize, m: usize, v: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
    let mut g = vec![0.0; d * d];
    factor_gram(sigma, d, m, t, &mut g)?;
    let mut h = vec![0.0; d];
    row_coords(sigma, &g, d, m, v, &mut h);
    lift_rows(sigma, d, m, &h, out);
    for k in 0..m {
        out[k] = v[k] - out[k];
    }
    Ok(())
}

pub fn mat_vec(a: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = (0..cols).map(|k| a[i * cols + k] * x[k]).sum();
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn cholesky_solves() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        assert!(cholesky(&mut a, 2, 1e-14));
        let mut b = vec![2.0, 1.0];
        cholesky_solve(&a, 2, &mut b);
        assert!((4.0 * b[0] + 2.0 * b[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * b[0] + 3.0 * b[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_detected() {
        let sigma = [1.0, 2.0, 2.0, 4.0];
        let mut out = [0.0; 2];
        assert!(min_norm_solve(&sigma, 2, 2, &[1.0, 1.0], 0.0, &mut out).is_err());
    }

    #[test]
    fn null_basis_against_cross_product() {
        let sigma = [0.3, -0.2, 0.5, 0.1, 0.4, 0.0];
        let (d, m) = (2, 3);
        let mut n = vec![0.0; 3];
        null_basis(&sigma, d, m, 0.0, &mut n).unwrap();
        let s = DMatrix::from_row_slice(d, m, &sigma);
        let v = DMatrix::from_column_slice(m, 1, &n);
        assert!((&s * &v).norm() < 1e-14);
        assert!((v.norm() - 1.0).abs() < 1e-14);
        let cross = s.transpose().column(0).cross(&s.transpose().column(1));
        let c = cross.normalize();
        let dot: f64 = c.iter().zip(&n).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-12);
    }
}
