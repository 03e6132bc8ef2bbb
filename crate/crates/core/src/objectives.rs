//! Reconstruction losses for pixel-space and component-space masking.

use crate::error::{Error, Result};
use crate::masking::{patch_mask_to_pixel_indicator, ComponentMask, PatchMask};
use crate::pca::PcaBasis;
use crate::tensor::{Tape, Tensor, Var};

const NORM_PIX_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mae,
    PmaePc,
    PmaePixel,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(Self::Mae),
            "pmae_pc" => Ok(Self::PmaePc),
            "pmae_pixel" => Ok(Self::PmaePixel),
            other => Err(Error::config("loss", format!("unknown loss `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mae => "mae",
            Self::PmaePc => "pmae_pc",
            Self::PmaePixel => "pmae_pixel",
        }
    }

    pub fn is_pmae(self) -> bool {
        !matches!(self, Self::Mae)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Standardize each target patch by its own mean and std. MAE only.
    pub norm_pix_targets: bool,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.norm_pix_targets && self.kind != LossKind::Mae {
            return Err(Error::config(
                "norm_pix_targets",
                "patch-normalized targets apply to the mae loss only",
            ));
        }
        Ok(())
    }
}

fn batch_dims(tape: &Tape, pred: Var, x: &Tensor) -> Result<usize> {
    if tape.shape(pred) != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: tape.shape(pred).to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok(x.shape()[0])
}

/// Mean squared error over the pixels of masked patches.
///
/// `pred` and `x` are `[B, H, W, C]`; `masks` holds one mask per image.
pub fn mae_loss(
    tape: &mut Tape,
    pred: Var,
    x: &Tensor,
    masks: &[PatchMask],
    patch_px: usize,
    norm_pix_targets: bool,
) -> Result<Var> {
    let b = batch_dims(tape, pred, x)?;
    let [_, h, w, c] = *x.shape() else {
        return Err(Error::invalid(format!(
            "expected [B, H, W, C], got {:?}",
            x.shape()
        )));
    };
    if masks.len() != b {
        return Err(Error::invalid(format!(
            "{} masks for a batch of {b}",
            masks.len()
        )));
    }
    let per = h * w * c;
    let mut weight = Vec::with_capacity(b * per);
    for m in masks {
        let vis = patch_mask_to_pixel_indicator(m, h, w, patch_px, c)?;
        weight.extend(vis.data().iter().map(|v| 1.0 - v));
    }
    let count: f64 = weight.iter().sum();
    if count == 0.0 {
        return Err(Error::NoReconstructionTarget);
    }
    let target = if norm_pix_targets {
        normalize_patches(x, patch_px)?
    } else {
        x.clone()
    };
    let target = tape.constant(target);
    let weight = tape.constant(Tensor::new(x.shape().to_vec(), weight)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let sq = tape.mul(sq, weight)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / count)
}

/// Standardizes every patch of `[B, H, W, C]` images by its own mean and variance.
pub fn normalize_patches(x: &Tensor, patch_px: usize) -> Result<Tensor> {
    let [b, h, w, c] = *x.shape() else {
        return Err(Error::invalid(format!(
            "expected [B, H, W, C], got {:?}",
            x.shape()
        )));
    };
    if patch_px == 0 || h % patch_px != 0 || w % patch_px != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible into {patch_px}px patches"
        )));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    let n = (patch_px * patch_px * c) as f64;
    let pixels = |bi: usize, gy: usize, gx: usize| {
        (0..patch_px).flat_map(move |py| {
            let start = ((bi * h + gy * patch_px + py) * w + gx * patch_px) * c;
            start..start + patch_px * c
        })
    };
    for bi in 0..b {
        for gy in 0..h / patch_px {
            for gx in 0..w / patch_px {
                let mean = pixels(bi, gy, gx).map(|i| data[i]).sum::<f64>() / n;
                let var = pixels(bi, gy, gx)
                    .map(|i| (data[i] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let inv = 1.0 / (var + NORM_PIX_EPS).sqrt();
                for i in pixels(bi, gy, gx) {
                    data[i] = (data[i] - mean) * inv;
                }
            }
        }
    }
    Ok(out)
}

fn flatten(
    tape: &mut Tape,
    pred: Var,
    x: &Tensor,
    basis: &PcaBasis,
) -> Result<(Var, Tensor, usize)> {
    let b = batch_dims(tape, pred, x)?;
    let d = x.numel() / b;
    if d != basis.dim() {
        return Err(Error::ShapeMismatch {
            op: "pca loss",
            lhs: vec![b, d],
            rhs: vec![basis.dim()],
        });
    }
    let pred = tape.reshape(pred, &[b, d])?;
    Ok((pred, x.reshape(vec![b, d])?, b))
}

/// Mean squared coefficient error over the masked principal components.
pub fn pmae_loss_pc(
    tape: &mut Tape,
    pred: Var,
    x: &Tensor,
    mask: &ComponentMask,
    basis: &PcaBasis,
) -> Result<Var> {
    let (pred, x, b) = flatten(tape, pred, x, basis)?;
    if mask.dim() != basis.dim() {
        return Err(Error::invalid("component mask does not match the basis"));
    }
    let k = mask.num_masked();
    if k == 0 {
        return Err(Error::NoReconstructionTarget);
    }
    let mean = tape.constant(basis.mean_tensor());
    let v = tape.constant(basis.components_tensor());
    let centered = tape.sub(pred, mean)?;
    let coeffs = tape.matmul(centered, v)?;
    let target = tape.constant(basis.to_pc(&x)?);
    let diff = tape.sub(coeffs, target)?;
    let sq = tape.square(diff)?;
    let ind = tape.constant(Tensor::new(vec![basis.dim()], mask.masked_indicator())?);
    let sq = tape.mul(sq, ind)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / (b * k) as f64)
}

/// The image-space target for the pixel-space PMAE loss: masked components only, plus the mean.
pub fn pmae_pixel_target(x: &Tensor, mask: &ComponentMask, basis: &PcaBasis) -> Result<Tensor> {
    let b = x.shape()[0];
    let flat = x.reshape(vec![b, x.numel() / b])?;
    let mut coeffs = basis.to_pc(&flat)?;
    let ind = mask.masked_indicator();
    let d = ind.len();
    coeffs
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, c)| *c *= ind[i % d]);
    basis.from_pc(&coeffs)
}

/// Mean squared error over all pixels against the masked-component reconstruction.
pub fn pmae_loss_pixel(
    tape: &mut Tape,
    pred: Var,
    x: &Tensor,
    mask: &ComponentMask,
    basis: &PcaBasis,
) -> Result<Var> {
    let (pred, x, _) = flatten(tape, pred, x, basis)?;
    if mask.dim() != basis.dim() {
        return Err(Error::invalid("component mask does not match the basis"));
    }
    let target = tape.constant(pmae_pixel_target(&x, mask, basis)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::component_mask_from_order;
    use crate::pca::fit_pca;
    use crate::rng;
    use rand::Rng;

    fn eval(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, pred: &Tensor) -> Result<f64> {
        let mut t = Tape::new();
        let p = t.leaf(pred);
        let l = f(&mut t, p)?;
        t.item(l)
    }

    #[test]
    fn one_dimensional_hand_example() {
        // a 1x2 "image" of two 1-pixel patches; the second patch is hidden
        let x = Tensor::new(vec![1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let pred = Tensor::new(vec![1, 1, 2, 1], vec![9.0, 5.0]).unwrap();
        let mask = PatchMask {
            grid_h: 1,
            grid_w: 2,
            masked: vec![false, true],
            ratio: 0.5,
        };
        let l = eval(
            |t, p| mae_loss(t, p, &x, std::slice::from_ref(&mask), 1, false),
            &pred,
        )
        .unwrap();
        assert_eq!(l, 9.0);
        let l = eval(
            |t, p| mae_loss(t, p, &x, std::slice::from_ref(&mask), 1, false),
            &x,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        let none = PatchMask::none(1, 2);
        assert!(matches!(
            eval(|t, p| mae_loss(t, p, &x, &[none], 1, false), &pred),
            Err(Error::NoReconstructionTarget)
        ));
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        let x = Tensor::full(vec![1, 4, 4, 1], 5.0);
        let n = normalize_patches(&x, 2).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    fn toy_basis(d: usize, n: usize, seed: u64) -> (PcaBasis, Tensor) {
        let mut g = rng::seeded(seed);
        let data = Tensor::from_fn(vec![n, d], |i| {
            g.random_range(-1.0..1.0) * (1.0 + (i % d) as f64)
        });
        (fit_pca(&data).unwrap(), data)
    }

    #[test]
    fn pc_loss_of_own_input_is_masked_energy() {
        let (basis, data) = toy_basis(4, 20, 1);
        let x = data.reshape(vec![20, 2, 2, 1]).unwrap();
        let mask =
            component_mask_from_order(&[2, 0, 1, 3], basis.variance_fractions(), 0.5).unwrap();
        let input = basis.masked_reconstruction(&data, &mask).unwrap();
        let input = input.reshape(vec![20, 2, 2, 1]).unwrap();
        let l = eval(|t, p| pmae_loss_pc(t, p, &x, &mask, &basis), &input).unwrap();
        let coeffs = basis.to_pc(&data).unwrap();
        let k = mask.num_masked();
        let mut want = 0.0;
        for row in coeffs.data().chunks(4) {
            for (l, c) in row.iter().enumerate() {
                if mask.masked[l] {
                    want += c * c;
                }
            }
        }
        want /= (20 * k) as f64;
        assert!((l - want).abs() < 1e-9 * want.max(1.0));
        assert!(
            eval(|t, p| pmae_loss_pc(t, p, &x, &mask, &basis), &x)
                .unwrap()
                .abs()
                < 1e-20
        );
    }

    #[test]
    fn pc_loss_ignores_visible_directions() {
        let (basis, data) = toy_basis(5, 12, 2);
        let x = data.reshape(vec![12, 5, 1, 1]).unwrap();
        let mask =
            component_mask_from_order(&[0, 1, 2, 3, 4], basis.variance_fractions(), 0.3).unwrap();
        let j = mask.masked.iter().position(|m| !m).unwrap();
        let mut g = rng::seeded(3);
        let pred = Tensor::from_fn(vec![12, 5, 1, 1], |_| g.random_range(-1.0..1.0));
        let mut moved = pred.clone();
        let v = basis.component(j);
        for (i, p) in moved.data_mut().iter_mut().enumerate() {
            *p += 2.5 * v[i % 5];
        }
        let a = eval(|t, p| pmae_loss_pc(t, p, &x, &mask, &basis), &pred).unwrap();
        let b = eval(|t, p| pmae_loss_pc(t, p, &x, &mask, &basis), &moved).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn pixel_loss_targets_and_parseval() {
        let (basis, data) = toy_basis(6, 15, 4);
        let x = data.reshape(vec![15, 6, 1, 1]).unwrap();
        let mask = component_mask_from_order(&[5, 1, 3, 0, 2, 4], basis.variance_fractions(), 0.4)
            .unwrap();
        let target = pmae_pixel_target(&data, &mask, &basis).unwrap();
        let t4 = target.reshape(vec![15, 6, 1, 1]).unwrap();
        assert!(eval(|t, p| pmae_loss_pixel(t, p, &x, &mask, &basis), &t4).unwrap() < 1e-24);

        let visible = ComponentMask::all_visible(6);
        let mean = Tensor::from_fn(vec![15, 6, 1, 1], |i| basis.mean()[i % 6]);
        assert!(eval(|t, p| pmae_loss_pixel(t, p, &x, &visible, &basis), &mean).unwrap() < 1e-24);

        // pred built from arbitrary coefficients; compare against coefficient-space error
        let mut g = rng::seeded(5);
        let c = Tensor::from_fn(vec![15, 6], |_| g.random_range(-2.0..2.0));
        let pred = basis.from_pc(&c).unwrap();
        let got = eval(
            |t, p| pmae_loss_pixel(t, p, &x, &mask, &basis),
            &pred.reshape(vec![15, 6, 1, 1]).unwrap(),
        )
        .unwrap();
        let tc = basis.to_pc(&data).unwrap();
        let mut want = 0.0;
        for (i, (a, b)) in c.data().iter().zip(tc.data()).enumerate() {
            let b = if mask.masked[i % 6] { *b } else { 0.0 };
            want += (a - b).powi(2);
        }
        want /= 90.0;
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn eigenvalue_scaling_changes_nothing() {
        let (basis, data) = toy_basis(4, 10, 6);
        let scaled = basis.with_scaled_eigenvalues(7.5).unwrap();
        let x = data.reshape(vec![10, 4, 1, 1]).unwrap();
        let mut g = rng::seeded(7);
        let pred = Tensor::from_fn(vec![10, 4, 1, 1], |_| g.random_range(-1.0..1.0));
        let order = [1, 3, 0, 2];
        let m1 = component_mask_from_order(&order, basis.variance_fractions(), 0.6).unwrap();
        let m2 = component_mask_from_order(&order, scaled.variance_fractions(), 0.6).unwrap();
        assert_eq!(m1.masked, m2.masked);
        let a = eval(|t, p| pmae_loss_pc(t, p, &x, &m1, &basis), &pred).unwrap();
        let b = eval(|t, p| pmae_loss_pc(t, p, &x, &m2, &scaled), &pred).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn norm_pix_is_mae_only() {
        let bad = LossConfig {
            kind: LossKind::PmaePc,
            norm_pix_targets: true,
        };
        assert!(bad.validate().is_err());
    }
}
