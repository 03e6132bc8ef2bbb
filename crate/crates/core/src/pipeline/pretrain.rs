use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::augment::{augment, AugmentConfig};
use super::metrics::{MetricRow, Metrics};
use super::optim::{lr_at, OptimConfig, Optimizer};
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::masking::{draw_ratio, sample_component_mask, sample_patch_mask, RatioPolicy};
use crate::objectives::{mae_loss, pmae_loss_pc, pmae_loss_pixel, LossConfig, LossKind};
use crate::pca::PcaBasis;
use crate::rng;
use crate::tensor::Tensor;
use crate::vit::{VitConfig, VitModel};

// Stream tags for `rng::stream`.
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const BATCH: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub vit: VitConfig,
    pub loss: LossConfig,
    pub ratio: RatioPolicy,
    pub optim: OptimConfig,
    /// `None` disables cropping and flipping; images are still normalized.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
    /// Record elapsed seconds per epoch. Off by default so outputs stay byte-stable.
    pub wall_clock: bool,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.loss.validate()?;
        self.ratio.validate()?;
        self.optim.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

pub struct PretrainOutput {
    pub model: VitModel,
    pub metrics: Metrics,
    pub stats: ChannelStats,
}

/// Normalized (and optionally augmented) batch `[B, H, W, C]`.
pub fn prepare_batch<R: Rng + ?Sized>(
    rng: &mut R,
    ds: &Dataset,
    indices: &[usize],
    stats: &ChannelStats,
    aug: Option<&AugmentConfig>,
) -> Result<Tensor> {
    let dims = (ds.height, ds.width, ds.channels);
    match aug {
        None => {
            let mut x = ds.batch(indices)?;
            stats.normalize(&mut x);
            Ok(x)
        }
        Some(cfg) => {
            let mut data = Vec::with_capacity(indices.len() * ds.image_len());
            for &i in indices {
                data.extend(augment(rng, &ds.image(i), dims, cfg, stats));
            }
            Tensor::new(vec![indices.len(), ds.height, ds.width, ds.channels], data)
        }
    }
}

/// Checks that `basis` lives in the image space of `vit`.
pub fn check_basis(vit: &VitConfig, basis: &PcaBasis) -> Result<()> {
    if basis.dim() != vit.image_dim() {
        return Err(Error::config(
            "basis",
            format!(
                "basis dimension {} does not match image dimension {}",
                basis.dim(),
                vit.image_dim()
            ),
        ));
    }
    Ok(())
}

/// Pretrains a fresh model on `train`.
///
/// `on_epoch` runs after every epoch with the 1-based epoch number, e.g. to
/// write checkpoints.
pub fn pretrain(
    cfg: &PretrainConfig,
    train: &Dataset,
    basis: Option<&PcaBasis>,
    mut on_epoch: impl FnMut(usize, &VitModel) -> Result<()>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let v = &cfg.vit;
    if (train.height, train.width, train.channels) != (v.image_h, v.image_w, v.channels) {
        return Err(Error::config(
            "data",
            format!(
                "images are {}x{}x{}, model expects {}x{}x{}",
                train.height, train.width, train.channels, v.image_h, v.image_w, v.channels
            ),
        ));
    }
    if train.is_empty() {
        return Err(Error::config("data", "training set is empty"));
    }
    let basis = match (cfg.loss.kind.is_pmae(), basis) {
        (true, None) => {
            return Err(Error::config(
                "basis",
                "component masking needs a PCA basis",
            ))
        }
        (true, Some(b)) => {
            check_basis(v, b)?;
            Some(b)
        }
        (false, _) => None,
    };

    let stats = train.channel_stats();
    let mut model = VitModel::new(v.clone(), &mut rng::stream(cfg.seed, &[INIT]))?;
    let mut opt = Optimizer::new(cfg.optim.clone(), &model.params);
    let n = train.len();
    let bs = cfg.optim.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut metrics = Metrics::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.optim.total_epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut ratio_sum, mut lr) = (0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let mut g = rng::stream(cfg.seed, &[BATCH, epoch as u64, bi as u64]);
            let r = draw_ratio(&mut g, cfg.ratio);
            let x = prepare_batch(&mut g, train, chunk, &stats, cfg.augment.as_ref())?;
            lr = lr_at(step, &cfg.optim, steps_per_epoch);
            let numeric = |e: Error| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    seed: cfg.seed,
                },
                e => e,
            };
            let (loss, achieved, grads) = {
                let mut graph = model.graph(true);
                let (loss, achieved) = match basis {
                    None => {
                        let masks = (0..chunk.len())
                            .map(|_| sample_patch_mask(&mut g, v.grid_h(), v.grid_w(), r))
                            .collect::<Result<Vec<_>>>()?;
                        let achieved = masks.iter().map(|m| m.masked_fraction()).sum::<f64>()
                            / masks.len() as f64;
                        let pred = model.forward_mae(&mut graph, &x, &masks).map_err(numeric)?;
                        let l = mae_loss(
                            &mut graph.tape,
                            pred,
                            &x,
                            &masks,
                            v.patch_px,
                            cfg.loss.norm_pix_targets,
                        )
                        .map_err(numeric)?;
                        (l, achieved)
                    }
                    Some(b) => {
                        let mask = sample_component_mask(&mut g, b.variance_fractions(), r)?;
                        let pred = model
                            .forward_pmae(&mut graph, &x, &mask, b)
                            .map_err(numeric)?;
                        let l = if cfg.loss.kind == LossKind::PmaePc {
                            pmae_loss_pc(&mut graph.tape, pred, &x, &mask, b)
                        } else {
                            pmae_loss_pixel(&mut graph.tape, pred, &x, &mask, b)
                        }
                        .map_err(numeric)?;
                        (l, mask.achieved_ratio)
                    }
                };
                let value = graph.tape.item(loss)?;
                if !value.is_finite() {
                    return Err(numeric(Error::NonFinite("loss".into())));
                }
                (value, achieved, graph.backward(loss).map_err(numeric)?)
            };
            opt.step(&mut model.params, &grads, lr).map_err(numeric)?;
            step += 1;
            loss_sum += loss;
            ratio_sum += achieved;
        }
        let mut row = MetricRow::new(epoch + 1, "pretrain", cfg.seed);
        row.loss = Some(loss_sum / steps_per_epoch as f64);
        row.lr = Some(lr);
        row.mask_ratio_mean = Some(ratio_sum / steps_per_epoch as f64);
        if cfg.wall_clock {
            row.seconds = started.elapsed().as_secs_f64();
        }
        metrics.push(row)?;
        on_epoch(epoch + 1, &model)?;
    }
    Ok(PretrainOutput {
        model,
        metrics,
        stats,
    })
}
