//! Lossless PCA: fit on flattened images, project into and out of PC space.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{sign_fix, symmetric_eig};
use crate::masking::ComponentMask;
use crate::tensor::Tensor;

use crate::tensor::matmul_raw as gemm;

pub const BASIS_MAGIC: &[u8; 4] = b"PCAB";
pub const BASIS_VERSION: u32 = 1;

/// Above this dimension, and with fewer samples than dimensions, the basis is
/// obtained from the `N x N` Gram matrix instead of the `D x D` covariance.
pub const GRAM_THRESHOLD: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    dim: usize,
    mean: Vec<f64>,
    /// Row-major `D x D`; column `l` is component `l`.
    components: Vec<f64>,
    eigenvalues: Vec<f64>,
    variance_fractions: Vec<f64>,
}

fn fractions(eigenvalues: &[f64]) -> Vec<f64> {
    let total: f64 = eigenvalues.iter().sum();
    if total > 0.0 {
        eigenvalues.iter().map(|l| l / total).collect()
    } else {
        vec![0.0; eigenvalues.len()]
    }
}

impl PcaBasis {
    /// Assembles a basis from parts; eigenvalues must be non-increasing.
    pub fn from_parts(mean: Vec<f64>, components: Vec<f64>, eigenvalues: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || components.len() != dim * dim || eigenvalues.len() != dim {
            return Err(Error::invalid(format!(
                "basis parts inconsistent: mean {dim}, components {}, eigenvalues {}",
                components.len(),
                eigenvalues.len()
            )));
        }
        if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("eigenvalues must be non-increasing"));
        }
        if mean
            .iter()
            .chain(&components)
            .chain(&eigenvalues)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("PCA basis".into()));
        }
        let variance_fractions = fractions(&eigenvalues);
        Ok(Self {
            dim,
            mean,
            components,
            eigenvalues,
            variance_fractions,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn variance_fractions(&self) -> &[f64] {
        &self.variance_fractions
    }

    /// Component `l` as a length-D vector.
    pub fn component(&self, l: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|i| self.components[i * self.dim + l])
            .collect()
    }

    /// `V` as a `[D, D]` tensor.
    pub fn components_tensor(&self) -> Tensor {
        Tensor::new(vec![self.dim, self.dim], self.components.clone()).expect("finite basis")
    }

    /// `V^T` as a `[D, D]` tensor.
    pub fn components_t_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.dim, self.dim],
            crate::linalg::transpose(&self.components, self.dim),
        )
        .expect("finite basis")
    }

    pub fn mean_tensor(&self) -> Tensor {
        Tensor::new(vec![self.dim], self.mean.clone()).expect("finite mean")
    }

    /// Same basis with every eigenvalue multiplied by `c > 0`.
    pub fn with_scaled_eigenvalues(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid("eigenvalue scale must be positive"));
        }
        Self::from_parts(
            self.mean.clone(),
            self.components.clone(),
            self.eigenvalues.iter().map(|l| l * c).collect(),
        )
    }

    fn rows(&self, x: &Tensor, op: &'static str) -> Result<usize> {
        if x.shape().last() != Some(&self.dim) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(x.numel() / self.dim)
    }

    /// `(x - mean) V`, applied along the trailing axis.
    pub fn to_pc(&self, x: &Tensor) -> Result<Tensor> {
        let rows = self.rows(x, "to_pc")?;
        let d = self.dim;
        let mut centered = x.data().to_vec();
        for row in centered.chunks_exact_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        let mut out = vec![0.0; rows * d];
        gemm(
            &centered,
            rows,
            d,
            false,
            &self.components,
            d,
            d,
            false,
            &mut out,
        );
        Tensor::new(x.shape().to_vec(), out)
    }

    /// `c V^T + mean`, applied along the trailing axis.
    pub fn from_pc(&self, c: &Tensor) -> Result<Tensor> {
        let rows = self.rows(c, "from_pc")?;
        let d = self.dim;
        let mut out = vec![0.0; rows * d];
        gemm(
            c.data(),
            rows,
            d,
            false,
            &self.components,
            d,
            d,
            true,
            &mut out,
        );
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v += m);
        }
        Tensor::new(c.shape().to_vec(), out)
    }

    /// `from_pc(visible ⊙ to_pc(x))`: the image rebuilt from visible components.
    pub fn masked_reconstruction(&self, x: &Tensor, mask: &ComponentMask) -> Result<Tensor> {
        if mask.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "masked_reconstruction",
                lhs: vec![mask.dim()],
                rhs: vec![self.dim],
            });
        }
        let mut c = self.to_pc(x)?;
        let keep = mask.visible_indicator();
        for row in c.data_mut().chunks_exact_mut(self.dim) {
            row.iter_mut().zip(&keep).for_each(|(v, k)| *v *= k);
        }
        self.from_pc(&c)
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.dim;
        let mut out = Vec::with_capacity(16 + 8 * (2 * d + d * d));
        out.extend_from_slice(BASIS_MAGIC);
        out.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for v in self
            .mean
            .iter()
            .chain(&self.eigenvalues)
            .chain(&self.components)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::format("PCA basis", msg);
        if bytes.len() < 16 {
            return Err(bad(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[..4] != BASIS_MAGIC {
            return Err(bad("bad magic (expected \"PCAB\")".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BASIS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let d = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = d
            .checked_mul(d)
            .and_then(|dd| dd.checked_add(2 * d))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| bad(format!("dimension {d} too large")))?;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for D = {d}, found {}",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mean = vals[..d].to_vec();
        let eigenvalues = vals[d..2 * d].to_vec();
        let components = vals[2 * d..].to_vec();
        Self::from_parts(mean, components, eigenvalues)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path.display().to_string(), msg),
            other => other,
        })
    }
}

/// Fits the basis to `x` of shape `[N, D]` (images already flattened).
///
/// The covariance is `Xc^T Xc` of the mean-centred data, not divided by `N`.
pub fn fit_pca(x: &Tensor) -> Result<PcaBasis> {
    if x.rank() != 2 {
        return Err(Error::invalid(format!(
            "fit_pca expects [N, D], got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let data = x.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit_pca input".into()));
    }
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = data.to_vec();
    for row in centered.chunks_exact_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }

    let (mut eigenvalues, components) = if d > GRAM_THRESHOLD && n < d {
        gram_basis(&centered, n, d)?
    } else {
        let mut cov = vec![0.0; d * d];
        gemm(&centered, n, d, true, &centered, n, d, false, &mut cov);
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        let eig = symmetric_eig(&cov, d)?;
        (eig.eigenvalues, eig.eigenvectors)
    };
    eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    PcaBasis::from_parts(mean, components, eigenvalues)
}

/// Eigenvectors from the Gram matrix, completed to a full orthonormal basis.
fn gram_basis(centered: &[f64], n: usize, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut gram = vec![0.0; n * n];
    gemm(centered, n, d, false, centered, n, d, true, &mut gram);
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (gram[i * n + j] + gram[j * n + i]);
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    let eig = symmetric_eig(&gram, n)?;
    let tol = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0) * 1e-12 * n as f64;
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut values = Vec::with_capacity(d);
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= tol {
            break;
        }
        let u = eig.vector(j);
        let inv = 1.0 / lambda.sqrt();
        let mut v = vec![0.0; d];
        for (i, &ui) in u.iter().enumerate() {
            let row = &centered[i * d..(i + 1) * d];
            v.iter_mut().zip(row).for_each(|(a, b)| *a += ui * b);
        }
        v.iter_mut().for_each(|a| *a *= inv);
        orthonormalize_against(&mut v, &vectors);
        vectors.push(v);
        values.push(lambda);
    }
    for axis in 0..d {
        if vectors.len() == d {
            break;
        }
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        if orthonormalize_against(&mut v, &vectors) > 1e-6 {
            vectors.push(v);
            values.push(0.0);
        }
    }
    let mut components = vec![0.0; d * d];
    for (col, v) in vectors.iter().enumerate() {
        let s = sign_fix(v);
        for i in 0..d {
            components[i * d + col] = s * v[i];
        }
    }
    Ok((values, components))
}

/// Two-pass Gram-Schmidt; returns the norm before normalisation.
fn orthonormalize_against(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for b in basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tensor {
        Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.5, 0.0, -0.5]).unwrap()
    }

    #[test]
    fn hand_computed_axis_aligned_fit() {
        let b = fit_pca(&toy()).unwrap();
        assert_eq!(b.mean(), &[0.0, 0.0]);
        assert!((b.eigenvalues()[0] - 2.0).abs() < 1e-12);
        assert!((b.eigenvalues()[1] - 0.5).abs() < 1e-12);
        let v0 = b.component(0);
        let v1 = b.component(1);
        assert!((v0[0].abs() - 1.0).abs() < 1e-12 && v0[1].abs() < 1e-12);
        assert!((v1[1].abs() - 1.0).abs() < 1e-12 && v1[0].abs() < 1e-12);
        assert!((b.variance_fractions()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_and_single_sample_data() {
        let c = Tensor::full(vec![5, 3], 2.5);
        let b = fit_pca(&c).unwrap();
        assert!(b.eigenvalues().iter().all(|&l| l == 0.0));
        assert_eq!(b.mean(), &[2.5, 2.5, 2.5]);
        assert!(b.variance_fractions().iter().all(|&f| f == 0.0));

        let one = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let b = fit_pca(&one).unwrap();
        assert_eq!(b.mean(), &[1.0, -2.0, 3.0]);
        assert!(b.eigenvalues().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn projections_of_mean_and_first_component() {
        let b = fit_pca(&toy()).unwrap();
        let m = Tensor::new(vec![2], b.mean().to_vec()).unwrap();
        assert!(b.to_pc(&m).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        let x: Vec<f64> = b
            .mean()
            .iter()
            .zip(b.component(0))
            .map(|(m, v)| m + v)
            .collect();
        let c = b.to_pc(&Tensor::new(vec![2], x.clone()).unwrap()).unwrap();
        assert!((c.data()[0] - 1.0).abs() < 1e-12 && c.data()[1].abs() < 1e-12);

        let zero = Tensor::zeros(vec![2]);
        assert_eq!(b.from_pc(&zero).unwrap().data(), b.mean());
        let e0 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let back = b.from_pc(&e0).unwrap();
        for (a, w) in back.data().iter().zip(&x) {
            assert!((a - w).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let b = fit_pca(&toy()).unwrap();
        assert!(b.to_pc(&Tensor::zeros(vec![3])).is_err());
        assert!(b.from_pc(&Tensor::zeros(vec![2, 3])).is_err());
    }

    #[test]
    fn masked_reconstruction_extremes() {
        let b = fit_pca(&toy()).unwrap();
        let x = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let all = ComponentMask::all_visible(2);
        let r = b.masked_reconstruction(&x, &all).unwrap();
        for (a, w) in r.data().iter().zip(x.data()) {
            assert!((a - w).abs() < 1e-12);
        }
        let none = all.complement();
        let r = b.masked_reconstruction(&x, &none).unwrap();
        assert_eq!(r.data(), b.mean());
    }

    #[test]
    fn gram_path_matches_covariance_path() {
        // D > threshold with N < D exercises the Gram route.
        let n = 6;
        let d = GRAM_THRESHOLD + 8;
        let x = Tensor::from_fn(vec![n, d], |i| {
            let (r, c) = (i / d, i % d);
            ((r * 31 + c * 7) % 13) as f64 / 13.0 + (c as f64 * 0.01 * (r as f64 + 1.0)).sin()
        });
        let b = fit_pca(&x).unwrap();
        // orthonormal columns
        let v = b.components();
        for a in [0, 1, 5, d - 1] {
            for c in [0, 2, 5, d - 2] {
                let dot: f64 = (0..d).map(|i| v[i * d + a] * v[i * d + c]).sum();
                let want = if a == c { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "({a},{c}) {dot}");
            }
        }
        // round trip
        let back = b.from_pc(&b.to_pc(&x).unwrap()).unwrap();
        for (p, q) in back.data().iter().zip(x.data()) {
            assert!((p - q).abs() < 1e-8);
        }
        // at most N - 1 non-zero eigenvalues
        assert!(b.eigenvalues()[n - 1..].iter().all(|&l| l < 1e-8));
    }

    #[test]
    fn basis_file_round_trip_and_errors() {
        let b = fit_pca(&toy()).unwrap();
        let bytes = b.encode();
        assert_eq!(bytes.len(), 16 + 8 * (2 + 2 + 4));
        let back = PcaBasis::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert!(PcaBasis::decode(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(PcaBasis::decode(&bad).is_err());
    }
}
