use num_complex::Complex64;

use super::matrix::{dot, Matrix};
use crate::error::{ensure, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

/// Eigenvalues of a 2x2 matrix together with the discriminant of its
/// characteristic polynomial `l^2 - tr l + det`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum2 {
    pub eigenvalues: [Complex64; 2],
    pub discriminant: f64,
    pub trace: f64,
    pub determinant: f64,
}

impl Spectrum2 {
    /// A zero discriminant counts as real (repeated root).
    pub fn is_real(&self) -> bool {
        self.discriminant >= 0.0
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues[0].norm().max(self.eigenvalues[1].norm())
    }
}

pub fn eig2x2(m: &Matrix) -> Result<Spectrum2> {
    ensure!(m.shape() == (2, 2), "eig2x2 needs a 2x2 matrix, got {:?}", m.shape());
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = tr * tr - 4.0 * det;
    let eigenvalues = if disc >= 0.0 {
        let s = disc.sqrt();
        // Stable quadratic roots: avoid cancellation in tr - s.
        let big = 0.5 * (tr + tr.signum() * s);
        if big == 0.0 {
            [Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)]
        } else {
            let small = det / big;
            let (a, b) = if big >= small { (big, small) } else { (small, big) };
            [Complex64::new(a, 0.0), Complex64::new(b, 0.0)]
        }
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex64::new(0.5 * tr, im), Complex64::new(0.5 * tr, -im)]
    };
    Ok(Spectrum2 {
        eigenvalues,
        discriminant: disc,
        trace: tr,
        determinant: det,
    })
}

/// Thin SVD factors from one-sided (Hestenes) Jacobi: singular values in
/// descending order and the matching right singular vectors as the columns of
/// `v` (cols x cols).
#[derive(Debug, Clone)]
pub struct JacobiSvd {
    pub singular_values: Vec<f64>,
    pub v: Matrix,
    pub sweeps: usize,
}

pub fn svd_jacobi(m: &Matrix) -> Result<JacobiSvd> {
    ensure!(m.is_finite(), "svd input has non-finite entries");
    let (rows, cols) = m.shape();
    // Work on columns: store A^T so each column is a contiguous row.
    let mut at = m.transpose();
    let mut v = Matrix::identity(cols);
    let fro = m.frobenius_norm();
    let floor = (JACOBI_TOL * fro).powi(2);
    let mut sweeps = 0;
    let mut converged = cols < 2 || fro == 0.0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            let norms: Vec<f64> = (0..cols).map(|c| dot(at.row(c), at.row(c)).sqrt()).collect();
            let max = norms.iter().cloned().fold(0.0, f64::max);
            let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(Error::numerical(format!(
                "one-sided Jacobi SVD did not converge after {JACOBI_MAX_SWEEPS} sweeps \
                 ({rows}x{cols}, column-norm condition estimate {:.3e})",
                if min > 0.0 { max / min } else { f64::INFINITY }
            )));
        }
        sweeps += 1;
        converged = true;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(at.row(p), at.row(p));
                let beta = dot(at.row(q), at.row(q));
                let gamma = dot(at.row(p), at.row(q));
                if alpha * beta <= floor * floor || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut at, p, q, c, s);
                rotate_rows_of_transpose(&mut v, p, q, c, s);
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..cols)
        .map(|c| (dot(at.row(c), at.row(c)).sqrt(), c))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut v_sorted = Matrix::zeros(cols, cols);
    for (new_c, &(_, old_c)) in pairs.iter().enumerate() {
        for r in 0..cols {
            v_sorted[(r, new_c)] = v[(r, old_c)];
        }
    }
    Ok(JacobiSvd {
        singular_values: pairs.into_iter().map(|(s, _)| s).collect(),
        v: v_sorted,
        sweeps,
    })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    for k in 0..cols {
        let a = data[p * cols + k];
        let b = data[q * cols + k];
        data[p * cols + k] = c * a - s * b;
        data[q * cols + k] = s * a + c * b;
    }
}

fn rotate_rows_of_transpose(v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..v.rows() {
        let a = v[(r, p)];
        let b = v[(r, q)];
        v[(r, p)] = c * a - s * b;
        v[(r, q)] = s * a + c * b;
    }
}

/// Singular values in descending order (length = number of columns).
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd_jacobi(m)?.singular_values)
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Principal component analysis result.
#[derive(Debug, Clone)]
pub struct Pca {
    /// Fraction of total variance per component, descending.
    pub explained_variance_ratios: Vec<f64>,
    /// One principal axis per row, in the same order as the ratios.
    pub components: Matrix,
}

/// PCA of the given observations (one per row). Data are centered, then the
/// singular values of the centered matrix give the covariance spectrum.
pub fn pca(rows: &[Vec<f64>]) -> Result<Pca> {
    ensure!(rows.len() >= 2, "pca needs at least 2 rows, got {}", rows.len());
    let dim = rows[0].len();
    ensure!(dim >= 1, "pca rows must be non-empty");
    ensure!(
        rows.iter().all(|r| r.len() == dim),
        "pca rows have unequal dimensions"
    );
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let centered: Vec<f64> = rows
        .iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let x = Matrix::from_vec(rows.len(), dim, centered)?;
    let svd = svd_jacobi(&x)?;
    let variances: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let total: f64 = variances.iter().sum();
    if total <= f64::EPSILON * f64::EPSILON {
        return Err(Error::numerical("pca: data have zero total variance"));
    }
    Ok(Pca {
        explained_variance_ratios: variances.iter().map(|v| v / total).collect(),
        components: svd.v.transpose(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Classic two-sided Jacobi eigenvalue iteration for symmetric matrices;
    /// kept here as an oracle independent of the one-sided SVD path.
    fn symmetric_jacobi_eigenvalues(s: &Matrix) -> Vec<f64> {
        let n = s.rows();
        let mut a = s.clone();
        for _ in 0..200 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = 0.5 * (2.0 * a[(p, q)]).atan2(a[(q, q)] - a[(p, p)]);
                    let (c, sn) = (theta.cos(), theta.sin());
                    let mut j = Matrix::identity(n);
                    j[(p, p)] = c;
                    j[(q, q)] = c;
                    j[(p, q)] = sn;
                    j[(q, p)] = -sn;
                    a = j.transpose().matmul(&a).unwrap().matmul(&j).unwrap();
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    #[test]
    fn eig_identity() {
        let s = eig2x2(&Matrix::identity(2)).unwrap();
        assert_eq!(s.discriminant, 0.0);
        assert!((s.eigenvalues[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((s.eigenvalues[1] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn eig_quarter_rotation() {
        let r = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let s = eig2x2(&r).unwrap();
        assert_eq!(s.discriminant, -4.0);
        assert!(!s.is_real());
        assert!((s.eigenvalues[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert!((s.eigenvalues[1] - Complex64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn eig_rwkv_product_closed_form() {
        let r3 = 3f64.sqrt();
        let m = Matrix::from_rows(&[
            vec![15.0 / 16.0, -r3 / 4.0],
            vec![-3.0 * r3 / 16.0, 3.0 / 4.0],
        ])
        .unwrap();
        let s = eig2x2(&m).unwrap();
        let expected = (27.0 + 153f64.sqrt()) / 32.0;
        assert!((s.eigenvalues[0].re - expected).abs() < 1e-14);
        assert!((s.spectral_radius() - 1.2303).abs() < 1e-4);
    }

    #[test]
    fn eig_rejects_non_square() {
        assert!(matches!(eig2x2(&Matrix::zeros(2, 3)), Err(Error::Contract(_))));
    }

    #[test]
    fn eig_sum_and_product_match_trace_and_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let m = random(&mut rng, 2, 2);
            let s = eig2x2(&m).unwrap();
            let sum = s.eigenvalues[0] + s.eigenvalues[1];
            let prod = s.eigenvalues[0] * s.eigenvalues[1];
            assert!((sum - Complex64::new(s.trace, 0.0)).norm() < 1e-12);
            assert!((prod - Complex64::new(s.determinant, 0.0)).norm() < 1e-12);
            for l in s.eigenvalues {
                let resid = l * l - l * s.trace + s.determinant;
                assert!(resid.norm() < 1e-12 * (1.0 + l.norm_sqr()));
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let sv = singular_values(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-15 && (sv[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_values_of_unit_outer_product() {
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0];
        let sv = singular_values(&Matrix::outer(&u, &v)).unwrap();
        assert!((sv[0] - 1.0).abs() < 1e-12);
        assert!(sv[1..].iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn singular_values_match_symmetric_jacobi_on_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(&mut rng, 5, 4);
        let sv = singular_values(&m).unwrap();
        let gram = m.transpose().matmul(&m).unwrap();
        let ev = symmetric_jacobi_eigenvalues(&gram);
        for (s, e) in sv.iter().zip(ev) {
            assert!((s - e.max(0.0).sqrt()).abs() < 1e-10, "{s} vs {}", e.sqrt());
        }
        let energy: f64 = sv.iter().map(|s| s * s).sum();
        let fro2 = m.frobenius_norm().powi(2);
        assert!((energy - fro2).abs() <= 1e-9 * fro2);
    }

    #[test]
    fn orthogonal_matrix_has_unit_singular_values() {
        let a = 0.3 * PI;
        let c = a.cos();
        let s = a.sin();
        let rot = Matrix::from_rows(&[
            vec![c, -s, 0.0],
            vec![s, c, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let refl = Matrix::identity(3)
            .sub(&Matrix::outer(&[0.0, 0.6, 0.8], &[0.0, 0.6, 0.8]).scale(2.0))
            .unwrap();
        let q = rot.matmul(&refl).unwrap();
        for sv in singular_values(&q).unwrap() {
            assert!((sv - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_matrix_is_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(&mut rng, 2, 6);
        let sv = singular_values(&m).unwrap();
        assert_eq!(sv.len(), 6);
        assert!(sv[2..].iter().all(|s| *s < 1e-10));
        let t = singular_values(&m.transpose()).unwrap();
        assert!((sv[0] - t[0]).abs() < 1e-12 && (sv[1] - t[1]).abs() < 1e-12);
    }

    #[test]
    fn pca_requires_two_rows() {
        assert!(matches!(pca(&[vec![1.0, 2.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn pca_constant_rows_is_error() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(pca(&rows), Err(Error::Numerical(_))));
    }

    #[test]
    fn pca_on_a_line() {
        let dir = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| dir.iter().map(|d| 0.3 + d * (i as f64 - 4.0)).collect())
            .collect();
        let p = pca(&rows).unwrap();
        assert!((p.explained_variance_ratios[0] - 1.0).abs() < 1e-9);
        assert!(p.explained_variance_ratios[1..].iter().all(|r| r.abs() < 1e-9));
        let axis = p.components.row(0);
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let cos = dot(axis, &dir) / norm;
        assert!((cos.abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pca_on_three_dim_subspace_of_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let basis: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..32)
                    .map(|j| (0..3).map(|b| c[b] * basis[b][j]).sum())
                    .collect()
            })
            .collect();
        let p = pca(&rows).unwrap();
        let total: f64 = p.explained_variance_ratios.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let top3: f64 = p.explained_variance_ratios[..3].iter().sum();
        assert!((top3 - 1.0).abs() < 1e-9);
        assert!(p
            .explained_variance_ratios
            .windows(2)
            .all(|w| w[0] >= w[1]));
    }
}
