//! Symmetric eigendecomposition.
//!
//! Householder reduction to tridiagonal form followed by the implicit QL
//! algorithm, after the EISPACK `tred2`/`tql2` pair.

use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
    /// Row-major `dim x dim`; column `j` is the eigenvector of `eigenvalues[j]`.
    pub eigenvectors: Vec<f64>,
}

impl SymmetricEigen {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.eigenvectors[i * self.dim + j])
            .collect()
    }
}

const MAX_SWEEPS_PER_VALUE: usize = 60;

/// Eigendecomposition of the symmetric `n x n` row-major matrix `s`.
///
/// Eigenvectors are normalised so that the entry of largest magnitude is
/// positive (first such entry on ties).
pub fn symmetric_eig(s: &[f64], n: usize) -> Result<SymmetricEigen> {
    if n == 0 || s.len() != n * n {
        return Err(Error::invalid(format!(
            "symmetric_eig needs a non-empty square matrix, got {} values for n = {n}",
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric_eig input".into()));
    }
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (s[i * n + j] - s[j * n + i]).abs() > 1e-10 * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric: entry ({i},{j}) = {} vs ({j},{i}) = {}",
                    s[i * n + j],
                    s[j * n + i]
                )));
            }
        }
    }

    let mut v = s.to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e, n);
    // QL rotations act on pairs of columns; work on the transpose so they touch rows.
    let mut w = transpose(&v, n);
    tql2(&mut w, &mut d, &mut e, n, s)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&j| d[j]).collect();
    let mut eigenvectors = vec![0.0; n * n];
    for (col, &j) in order.iter().enumerate() {
        let row = &w[j * n..(j + 1) * n];
        let sign = sign_fix(row);
        for i in 0..n {
            eigenvectors[i * n + col] = sign * row[i];
        }
    }
    Ok(SymmetricEigen {
        dim: n,
        eigenvalues,
        eigenvectors,
    })
}

/// `+1` or `-1` such that the largest-magnitude entry becomes positive.
pub(crate) fn sign_fix(v: &[f64]) -> f64 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub(crate) fn transpose(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

fn tred2(v: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize) {
    let idx = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
                v[idx(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[idx(j, i)] = f;
                g = e[j] + v[idx(j, j)] * f;
                for k in j + 1..i {
                    g += v[idx(k, j)] * d[k];
                    e[k] += v[idx(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[idx(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[idx(n - 1, i)] = v[idx(i, i)];
        v[idx(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[idx(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[idx(k, i + 1)] * v[idx(k, j)];
                }
                for k in 0..=i {
                    v[idx(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[idx(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
        v[idx(n - 1, j)] = 0.0;
    }
    v[idx(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal (d, e). `w` holds eigenvectors as rows.
fn tql2(w: &mut [f64], d: &mut [f64], e: &mut [f64], n: usize, original: &[f64]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_SWEEPS_PER_VALUE {
                    return Err(Error::NoConvergence {
                        iterations: iter - 1,
                        residual: residual_norm(original, w, d, n),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = w.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..];
                    let row_next = &mut hi[..n];
                    for (a, b) in row_i.iter_mut().zip(row_next.iter_mut()) {
                        let t = *b;
                        *b = s * *a + c * t;
                        *a = c * *a - s * t;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Frobenius norm of `S W^T - W^T diag(d)` for row-eigenvector storage `w`.
fn residual_norm(s: &[f64], w: &[f64], d: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..n {
        let v = &w[j * n..(j + 1) * n];
        for i in 0..n {
            let sv: f64 = (0..n).map(|k| s[i * n + k] * v[k]).sum();
            let r = sv - d[j] * v[i];
            acc += r * r;
        }
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(eig: &SymmetricEigen) -> Vec<f64> {
        let n = eig.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n)
                    .map(|k| {
                        eig.eigenvectors[i * n + k]
                            * eig.eigenvalues[k]
                            * eig.eigenvectors[j * n + k]
                    })
                    .sum();
            }
        }
        out
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let eig = symmetric_eig(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0]);
        let r = reconstruct(&eig);
        for (a, b) in r.iter().zip(&[1.0, 0.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        // characteristic polynomial (2 - l)^2 - 1 = 0 -> l = 3, 1
        let eig = symmetric_eig(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v0 = eig.vector(0);
        let v1 = eig.vector(1);
        assert!((v0[0] - h).abs() < 1e-12 && (v0[1] - h).abs() < 1e-12);
        // largest-magnitude entry positive, first on ties: [1, -1] / sqrt 2
        assert!((v1[0] - h).abs() < 1e-12 && (v1[1] + h).abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        assert!(symmetric_eig(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
    }

    #[test]
    fn one_by_one() {
        let eig = symmetric_eig(&[-4.0], 1).unwrap();
        assert_eq!(eig.eigenvalues, vec![-4.0]);
        assert_eq!(eig.eigenvectors, vec![1.0]);
    }

    #[test]
    fn diagonal_with_ties_is_sorted() {
        let s = [1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0];
        let eig = symmetric_eig(&s, 3).unwrap();
        assert_eq!(eig.eigenvalues, vec![5.0, 1.0, 1.0]);
    }
}
