//! Finite-difference checks of full ViT + loss gradients with respect to every parameter tensor.

#![allow(clippy::needless_range_loop)]

use pmae_core::masking::{sample_component_mask, sample_patch_mask, ComponentMask, PatchMask};
use pmae_core::objectives::{mae_loss, pmae_loss_pc, pmae_loss_pixel};
use pmae_core::pca::{fit_pca, PcaBasis};
use pmae_core::rng;
use pmae_core::vit::{VitConfig, VitModel};
use pmae_core::{Result, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn config() -> VitConfig {
    VitConfig {
        image_h: 16,
        image_w: 16,
        channels: 1,
        patch_px: 4,
        enc_hidden: 8,
        enc_heads: 2,
        enc_mlp: 16,
        enc_depth: 2,
        dec_hidden: 8,
        dec_heads: 2,
        dec_mlp: 16,
        dec_depth: 1,
    }
}

fn images(seed: u64, b: usize) -> Tensor {
    let mut g = rng::seeded(seed);
    let data = (0..b * 256)
        .map(|_| StandardNormal.sample(&mut g))
        .collect();
    Tensor::new(vec![b, 16, 16, 1], data).unwrap()
}

/// Model whose parameters are all O(0.3) so no gradient is vanishingly small.
fn model(seed: u64) -> VitModel {
    let mut m = VitModel::new(config(), &mut rng::seeded(seed)).unwrap();
    let mut g = rng::stream(seed, &[1]);
    for (_, t) in m.params.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut g);
            *v += 0.3 * z;
        }
    }
    m
}

fn check(
    label: &str,
    mut m: VitModel,
    loss: impl Fn(&VitModel, bool) -> Result<(f64, Option<Vec<Option<Vec<f64>>>>)>,
) {
    let (_, grads) = loss(&m, true).unwrap();
    let grads = grads.unwrap();
    let mut g = rng::seeded(99);
    let mut worst = (0.0f64, String::new());
    for i in 0..m.params.len() {
        let name = m.params.name_at(i).to_string();
        let n = m.params.tensor_at(i).numel();
        for _ in 0..3.min(n) {
            let j = g.random_range(0..n);
            let orig = m.params.tensor_at(i).data()[j];
            m.params.tensor_at_mut(i).data_mut()[j] = orig + EPS;
            let up = loss(&m, false).unwrap().0;
            m.params.tensor_at_mut(i).data_mut()[j] = orig - EPS;
            let down = loss(&m, false).unwrap().0;
            m.params.tensor_at_mut(i).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[j]);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-7 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{j}]: analytic {analytic:e}, numeric {numeric:e}"),
                );
            }
        }
    }
    assert!(
        worst.0 < TOL,
        "{label}: worst relative error {:e} at {}",
        worst.0,
        worst.1
    );
}

fn basis() -> PcaBasis {
    let x = images(5, 300);
    fit_pca(&x.reshape(vec![300, 256]).unwrap()).unwrap()
}

#[test]
fn mae_loss_gradients() {
    let x = images(1, 2);
    let mut g = rng::seeded(2);
    let masks: Vec<PatchMask> = (0..2)
        .map(|_| sample_patch_mask(&mut g, 4, 4, 0.75).unwrap())
        .collect();
    for norm in [false, true] {
        check(&format!("mae norm_pix={norm}"), model(3), |m, want| {
            let mut graph = m.graph(want);
            let pred = m.forward_mae(&mut graph, &x, &masks)?;
            let l = mae_loss(&mut graph.tape, pred, &x, &masks, 4, norm)?;
            let v = graph.tape.item(l)?;
            Ok((v, want.then(|| graph.backward(l).unwrap().grads)))
        });
    }
}

fn pmae_case(pixel: bool) {
    let b = basis();
    let x = images(1, 2);
    let mask: ComponentMask =
        sample_component_mask(&mut rng::seeded(4), b.variance_fractions(), 0.2).unwrap();
    check(
        if pixel { "pmae_pixel" } else { "pmae_pc" },
        model(6),
        |m, want| {
            let mut graph = m.graph(want);
            let pred = m.forward_pmae(&mut graph, &x, &mask, &b)?;
            let l = if pixel {
                pmae_loss_pixel(&mut graph.tape, pred, &x, &mask, &b)?
            } else {
                pmae_loss_pc(&mut graph.tape, pred, &x, &mask, &b)?
            };
            let v = graph.tape.item(l)?;
            Ok((v, want.then(|| graph.backward(l).unwrap().grads)))
        },
    );
}

#[test]
fn pmae_pc_loss_gradients() {
    pmae_case(false);
}

#[test]
fn pmae_pixel_loss_gradients() {
    pmae_case(true);
}
