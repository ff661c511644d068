//! Dense symmetric eigendecomposition and thin SVD.
//!
//! The eigensolver reduces the matrix to tridiagonal form with Householder
//! reflections (tred2) and diagonalizes it with the implicit-shift QL
//! iteration (tql2), accumulating the transformations so the eigenvectors
//! come out directly. SVD is obtained from the eigendecomposition of the
//! smaller Gram matrix; the matrices in this pipeline are small and dense,
//! so this keeps the crate free of external solvers.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

const MAX_QL_ITERATIONS: usize = 50;

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized internally as (A + Aᵀ)/2. Returns eigenvalues in
/// ascending order and the matching orthonormal eigenvectors as the columns
/// of the second tensor.
pub fn sym_eig(a: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::shape(
            "sym_eig",
            format!("expected square matrix, got {:?}", a.shape()),
        ));
    }
    let n = a.shape()[0];
    if n == 0 {
        return Err(Error::invalid("sym_eig", "empty matrix"));
    }

    // Work on the symmetrized copy, row-major n×n.
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            z[i * n + j] = 0.5 * (a.get2(i, j) + a.get2(j, i));
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut z, n, &mut d, &mut e);
    tql2(&mut z, n, &mut d, &mut e)?;

    // Sort ascending, permuting eigenvector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let mut values = Tensor::zeros(&[n]);
    let mut vectors = Tensor::zeros(&[n, n]);
    for (dst, &src) in order.iter().enumerate() {
        values.data_mut()[dst] = d[src];
        for r in 0..n {
            vectors.data_mut()[r * n + dst] = z[r * n + src];
        }
    }
    Ok((values, vectors))
}

/// Householder reduction to tridiagonal form, accumulating the orthogonal
/// transformation in `a` (becomes Q so that Qᵀ A Q is tridiagonal).
fn tred2(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i * n + k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    a[j * n + i] = a[i * n + j] / h;
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in (j + 1)..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    f_acc += e[j] * a[i * n + j];
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += a[i * n + k] * a[k * n + j];
                }
                for k in 0..i {
                    a[k * n + j] -= g * a[k * n + i];
                }
            }
        }
        d[i] = a[i * n + i];
        a[i * n + i] = 1.0;
        for j in 0..i {
            a[j * n + i] = 0.0;
            a[i * n + j] = 0.0;
        }
    }
}

/// Implicit-shift QL iteration on the tridiagonal (d, e), rotating the
/// accumulated transformation `z` so its columns become eigenvectors.
fn tql2(z: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) -> Result<()> {
    if n == 1 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_QL_ITERATIONS {
                return Err(Error::NoConvergence {
                    iterations: MAX_QL_ITERATIONS,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    // Deflate: the rotation chain annihilated an off-diagonal.
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z[k * n + i + 1];
                    z[k * n + i + 1] = s * z[k * n + i] + c * f;
                    z[k * n + i] = c * z[k * n + i] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Thin singular value decomposition A = U Σ Vᵀ.
pub struct Svd {
    /// m×k, orthonormal columns.
    pub u: Tensor,
    /// k singular values, descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: Tensor,
}

/// Thin SVD of an m×n matrix via eigendecomposition of the smaller Gram
/// matrix; k = min(m, n). Singular values come out descending.
pub fn svd(a: &Tensor) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(Error::shape(
            "svd",
            format!("expected matrix, got shape {:?}", a.shape()),
        ));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m == 0 || n == 0 {
        return Err(Error::invalid("svd", "empty matrix"));
    }
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }

    // m >= n: eigendecompose AᵀA (n×n), then lift V to U = A V Σ⁻¹.
    let gram = matmul(&a.transpose(), a)?;
    let (w, q) = sym_eig(&gram)?;
    let k = n;
    let mut singular_values = vec![0.0; k];
    let mut v = Tensor::zeros(&[n, k]);
    for j in 0..k {
        let src = k - 1 - j; // ascending -> descending
        singular_values[j] = w.data()[src].max(0.0).sqrt();
        for r in 0..n {
            v.data_mut()[r * k + j] = q.get2(r, src);
        }
    }

    // The Gram route cannot resolve singular values below about
    // sqrt(eps)·σ_max; clamp them to exactly zero so rank queries are clean.
    let tol = 4.0 * singular_values[0] * (m.max(n) as f64 * f64::EPSILON).sqrt();
    for s in singular_values.iter_mut() {
        if *s <= tol {
            *s = 0.0;
        }
    }
    let av = matmul(a, &v)?;
    let mut u = Tensor::zeros(&[m, k]);
    for j in 0..k {
        if singular_values[j] > 0.0 {
            let inv = 1.0 / singular_values[j];
            for r in 0..m {
                u.data_mut()[r * k + j] = av.get2(r, j) * inv;
            }
        }
    }
    orthonormalize_columns(&mut u, tol.max(f64::MIN_POSITIVE));
    Ok(Svd {
        u,
        singular_values,
        v,
    })
}

/// Modified Gram-Schmidt over the columns of `u`, replacing numerically
/// dependent or zero columns with completions drawn from the standard basis.
fn orthonormalize_columns(u: &mut Tensor, _tol: f64) {
    let (m, k) = (u.shape()[0], u.shape()[1]);
    let mut next_seed = 0usize;
    for j in 0..k {
        // Two orthogonalization passes for stability.
        for _pass in 0..2 {
            for prev in 0..j {
                let mut proj = 0.0;
                for r in 0..m {
                    proj += u.get2(r, prev) * u.get2(r, j);
                }
                for r in 0..m {
                    let v = u.get2(r, j) - proj * u.get2(r, prev);
                    u.set2(r, j, v);
                }
            }
        }
        let mut norm = 0.0;
        for r in 0..m {
            norm += u.get2(r, j) * u.get2(r, j);
        }
        norm = norm.sqrt();
        if norm > 1e-8 {
            for r in 0..m {
                let v = u.get2(r, j) / norm;
                u.set2(r, j, v);
            }
        } else {
            // Column carried no information; seed from a basis vector that
            // survives orthogonalization against the accepted columns.
            loop {
                assert!(next_seed < m, "orthonormal completion exhausted basis");
                for r in 0..m {
                    u.set2(r, j, if r == next_seed { 1.0 } else { 0.0 });
                }
                next_seed += 1;
                for _pass in 0..2 {
                    for prev in 0..j {
                        let mut proj = 0.0;
                        for r in 0..m {
                            proj += u.get2(r, prev) * u.get2(r, j);
                        }
                        for r in 0..m {
                            let v = u.get2(r, j) - proj * u.get2(r, prev);
                            u.set2(r, j, v);
                        }
                    }
                }
                let mut nrm = 0.0;
                for r in 0..m {
                    nrm += u.get2(r, j) * u.get2(r, j);
                }
                nrm = nrm.sqrt();
                if nrm > 0.5 {
                    for r in 0..m {
                        let v = u.get2(r, j) / nrm;
                        u.set2(r, j, v);
                    }
                    break;
                }
            }
        }
    }
}

/// Solve the symmetric positive definite system L·x = b for many right-hand
/// sides via Cholesky; `a` must be SPD. Used by tests and small solves.
pub fn cholesky_solve(a: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::shape("cholesky_solve", "matrix must be square"));
    }
    let n = a.shape()[0];
    if rhs.shape()[0] != n {
        return Err(Error::shape(
            "cholesky_solve",
            format!("rhs rows {} != n {}", rhs.shape()[0], n),
        ));
    }
    let m = rhs.shape()[1];
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get2(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::SingularSystem {
                        op: "cholesky_solve",
                        detail: format!("non-positive pivot at {}", i),
                    });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut x = rhs.clone();
    // forward substitution L y = b
    for col in 0..m {
        for i in 0..n {
            let mut sum = x.get2(i, col);
            for k in 0..i {
                sum -= l[i * n + k] * x.get2(k, col);
            }
            x.set2(i, col, sum / l[i * n + i]);
        }
        // back substitution Lᵀ x = y
        for i in (0..n).rev() {
            let mut sum = x.get2(i, col);
            for k in (i + 1)..n {
                sum -= l[k * n + i] * x.get2(k, col);
            }
            x.set2(i, col, sum / l[i * n + i]);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                a.set2(i, j, v);
                a.set2(j, i, v);
            }
        }
        a
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let (w, _) = sym_eig(&Tensor::eye(4)).unwrap();
        for &v in w.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_eigenvalues_sorted_ascending() {
        let mut a = Tensor::zeros(&[3, 3]);
        a.set2(0, 0, 3.0);
        a.set2(1, 1, 1.0);
        a.set2(2, 2, 2.0);
        let (w, _) = sym_eig(&a).unwrap();
        let got: Vec<f64> = w.data().to_vec();
        assert!((got[0] - 1.0).abs() < 1e-12);
        assert!((got[1] - 2.0).abs() < 1e-12);
        assert!((got[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        for seed in 0..4 {
            let a = random_symmetric(20, seed);
            let (w, v) = sym_eig(&a).unwrap();
            let n = 20;
            // V diag(w) Vᵀ
            let mut vd = v.clone();
            for i in 0..n {
                for j in 0..n {
                    let x = vd.get2(i, j) * w.data()[j];
                    vd.set2(i, j, x);
                }
            }
            let recon = matmul(&vd, &v.transpose()).unwrap();
            let err = recon.sub(&a).unwrap().max_abs();
            assert!(err < 1e-8, "reconstruction err {} (seed {})", err, seed);
            // orthonormality
            let vtv = matmul(&v.transpose(), &v).unwrap();
            let ortho = vtv.sub(&Tensor::eye(n)).unwrap().max_abs();
            assert!(ortho < 1e-8, "orthonormality err {}", ortho);
        }
    }

    #[test]
    fn eigenpairs_satisfy_definition() {
        let a = random_symmetric(15, 99);
        let (w, v) = sym_eig(&a).unwrap();
        let av = matmul(&a, &v).unwrap();
        for j in 0..15 {
            for i in 0..15 {
                let lhs = av.get2(i, j);
                let rhs = w.data()[j] * v.get2(i, j);
                assert!((lhs - rhs).abs() < 1e-8 * (1.0 + w.data()[j].abs()));
            }
        }
    }

    #[test]
    fn sym_eig_rejects_non_square() {
        assert!(sym_eig(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn svd_identity_all_ones() {
        let s = svd(&Tensor::eye(5)).unwrap();
        for &v in &s.singular_values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn svd_diag_descending() {
        let mut a = Tensor::zeros(&[2, 2]);
        a.set2(0, 0, 2.0);
        a.set2(1, 1, 1.0);
        let s = svd(&a).unwrap();
        assert!((s.singular_values[0] - 2.0).abs() < 1e-12);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_rank_one_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 8;
        let n = 5;
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                a.set2(i, j, u[i] * v[j]);
            }
        }
        let s = svd(&a).unwrap();
        let above: usize = s
            .singular_values
            .iter()
            .filter(|&&x| x > 1e-10)
            .count();
        assert_eq!(above, 1);
        check_svd_contract(&a, &s, 1e-10);
    }

    fn check_svd_contract(a: &Tensor, s: &Svd, tol: f64) {
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let k = s.singular_values.len();
        assert_eq!(k, m.min(n));
        let utu = matmul(&s.u.transpose(), &s.u).unwrap();
        assert!(utu.sub(&Tensor::eye(k)).unwrap().max_abs() < tol);
        let vtv = matmul(&s.v.transpose(), &s.v).unwrap();
        assert!(vtv.sub(&Tensor::eye(k)).unwrap().max_abs() < tol);
        let mut us = s.u.clone();
        for i in 0..m {
            for j in 0..k {
                let x = us.get2(i, j) * s.singular_values[j];
                us.set2(i, j, x);
            }
        }
        let recon = matmul(&us, &s.v.transpose()).unwrap();
        assert!(recon.sub(a).unwrap().max_abs() < tol * (1.0 + s.singular_values[0]));
    }

    #[test]
    fn svd_random_matrices_reconstruct() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            for &(m, n) in &[(7, 7), (9, 4), (4, 9)] {
                let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = Tensor::from_vec(&[m, n], data).unwrap();
                let s = svd(&a).unwrap();
                check_svd_contract(&a, &s, 1e-8);
            }
        }
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = random_symmetric(6, 3);
        // make SPD: AᵀA + I
        let spd = matmul(&a.transpose(), &a)
            .unwrap()
            .add(&Tensor::eye(6))
            .unwrap();
        let b = random_symmetric(6, 4);
        let x = cholesky_solve(&spd, &b).unwrap();
        let res = matmul(&spd, &x).unwrap().sub(&b).unwrap().max_abs();
        assert!(res < 1e-10);
    }
}
