use std::time::{Duration, Instant};

use pmae_core::data::{synthetic_global_factors, Dataset, SyntheticConfig};
use pmae_core::masking::RatioPolicy;
use pmae_core::objectives::{LossConfig, LossKind};
use pmae_core::pipeline::{
    extract_features, finetune, fit_basis, knn_eval, pretrain, probe, Classifier, FinetuneConfig,
    OptimConfig, PretrainConfig, ProbeConfig, ProbeKind,
};
use pmae_core::vit::VitConfig;
use pmae_core::{rng, Error, Tensor};

fn small_data(n_train: usize, seed: u64) -> (Dataset, Dataset) {
    let cfg = SyntheticConfig {
        n_train,
        n_test: 16,
        ..Default::default()
    };
    let (train, test, _) = synthetic_global_factors(&mut rng::seeded(seed), &cfg).unwrap();
    (train, test)
}

fn config(kind: LossKind, ratio: RatioPolicy, epochs: usize, batch: usize) -> PretrainConfig {
    PretrainConfig {
        vit: VitConfig::desk(16, 16, 1),
        loss: LossConfig {
            kind,
            norm_pix_targets: kind == LossKind::Mae,
        },
        ratio,
        optim: OptimConfig {
            total_epochs: epochs,
            warmup_epochs: 1,
            batch_size: batch,
            base_lr: 1e-3 * 256.0 / batch as f64,
            ..OptimConfig::pretrain()
        },
        augment: None,
        seed: 5,
        wall_clock: false,
    }
}

fn param_bits(m: &pmae_core::vit::VitModel) -> Vec<u64> {
    m.params
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn same_seed_same_model() {
    let (train, _) = small_data(24, 1);
    let stats = train.channel_stats();
    let basis = fit_basis(&train, &stats).unwrap();
    let cfg = config(LossKind::PmaePc, RatioPolicy::Fixed(0.2), 3, 8);
    let a = pretrain(&cfg, &train, Some(&basis), |_, _| Ok(())).unwrap();
    let b = pretrain(&cfg, &train, Some(&basis), |_, _| Ok(())).unwrap();
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());

    let other = PretrainConfig { seed: 6, ..cfg };
    let c = pretrain(&other, &train, Some(&basis), |_, _| Ok(())).unwrap();
    assert_ne!(param_bits(&a.model), param_bits(&c.model));
}

#[test]
fn random_ratio_averages_one_half() {
    let (train, _) = small_data(200, 2);
    let stats = train.channel_stats();
    let basis = fit_basis(&train, &stats).unwrap();
    let mean_ratio = |kind| {
        let cfg = config(kind, RatioPolicy::RANDOM, 1, 2);
        let out = pretrain(&cfg, &train, Some(&basis), |_, _| Ok(())).unwrap();
        out.metrics.rows()[0].mask_ratio_mean.unwrap()
    };
    let mae = mean_ratio(LossKind::Mae);
    assert!(
        (mae - 0.5).abs() <= 0.05,
        "patch masking: mean achieved ratio {mae}"
    );
    // component budgets overshoot by at most one component's share
    let pmae = mean_ratio(LossKind::PmaePc);
    let top = basis.variance_fractions()[0];
    assert!(
        pmae >= 0.45 && pmae <= 0.55 + top,
        "component masking: mean achieved ratio {pmae}"
    );
}

#[test]
fn desk_smoke_descends_quickly() {
    let (train, _) = small_data(8, 3);
    let t = Instant::now();
    let cfg = config(LossKind::Mae, RatioPolicy::STANDARD, 50, 8);
    let mut epochs = 0;
    let out = pretrain(&cfg, &train, None, |_, _| {
        epochs += 1;
        Ok(())
    })
    .unwrap();
    assert!(t.elapsed() < Duration::from_secs(60));
    assert_eq!(epochs, 50);
    let rows = out.metrics.rows();
    assert_eq!(rows.len(), 50);
    let head: f64 = rows[..5].iter().map(|r| r.loss.unwrap()).sum();
    let tail: f64 = rows[45..].iter().map(|r| r.loss.unwrap()).sum();
    assert!(
        tail < head,
        "loss went from {head} to {tail} over five-epoch windows"
    );
    assert!(rows.iter().all(|r| r.seconds == 0.0));
}

#[test]
fn exploding_loss_names_batch_and_seed() {
    let (train, _) = small_data(8, 4);
    let mut cfg = config(LossKind::Mae, RatioPolicy::STANDARD, 20, 2);
    cfg.optim.warmup_epochs = 0;
    cfg.optim.base_lr = 1e300;
    match pretrain(&cfg, &train, None, |_, _| Ok(())) {
        Err(Error::NonFiniteLoss { seed, .. }) => assert_eq!(seed, 5),
        other => panic!("expected a non-finite loss, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn pretrain_rejects_wrong_shapes_and_missing_basis() {
    let (train, _) = small_data(8, 5);
    let mut cfg = config(LossKind::PmaePc, RatioPolicy::Fixed(0.2), 1, 8);
    assert!(pretrain(&cfg, &train, None, |_, _| Ok(())).is_err());
    cfg.vit = VitConfig::desk(32, 32, 1);
    let basis = fit_basis(&train, &train.channel_stats()).unwrap();
    assert!(pretrain(&cfg, &train, Some(&basis), |_, _| Ok(())).is_err());
}

#[test]
fn features_are_deterministic_and_shaped() {
    let (train, test) = small_data(8, 6);
    let cfg = config(LossKind::Mae, RatioPolicy::STANDARD, 1, 8);
    let out = pretrain(&cfg, &train, None, |_, _| Ok(())).unwrap();
    let (f, y) = extract_features(&out.model, &test, &out.stats, None, 0).unwrap();
    assert_eq!(f.shape(), &[test.len(), cfg.vit.enc_hidden]);
    assert_eq!(y, test.labels);
    let (g, _) = extract_features(&out.model, &test, &out.stats, None, 0).unwrap();
    assert_eq!(f.data(), g.data());
}

#[test]
fn zero_lr_finetune_matches_untrained_head() {
    let (train, test) = small_data(16, 7);
    let cfg = config(LossKind::Mae, RatioPolicy::STANDARD, 1, 8);
    let out = pretrain(&cfg, &train, None, |_, _| Ok(())).unwrap();
    let mut ft = FinetuneConfig::new(3);
    ft.optim.base_lr = 0.0;
    ft.optim.total_epochs = 2;
    ft.optim.warmup_epochs = 1;
    ft.augment = None;
    let acc = finetune(&out.model, &train, &test, &out.stats, &ft).unwrap();
    let baseline = Classifier::new(&out.model, 2, 3)
        .score(&test, &out.stats)
        .unwrap();
    assert_eq!(acc, baseline);
    assert_eq!(
        acc,
        finetune(&out.model, &train, &test, &out.stats, &ft).unwrap()
    );
}

#[test]
fn finetune_memorizes_eight_images() {
    let (train, _) = small_data(8, 8);
    let cfg = config(LossKind::Mae, RatioPolicy::STANDARD, 1, 8);
    let out = pretrain(&cfg, &train, None, |_, _| Ok(())).unwrap();
    let mut ft = FinetuneConfig::new(0);
    ft.optim.total_epochs = 200;
    ft.optim.base_lr = 1e-3 * 256.0 / 8.0;
    ft.optim.weight_decay = 0.0;
    ft.augment = None;
    let acc = finetune(&out.model, &train, &train, &out.stats, &ft).unwrap();
    assert_eq!(acc, 1.0);
    let (f, y) = extract_features(&out.model, &train, &out.stats, None, 0).unwrap();
    let lin = probe(&f, &y, &f, &y, &ProbeConfig::new(ProbeKind::Linear, 0)).unwrap();
    assert!(acc >= lin);
}

fn two_blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut g = rng::seeded(seed);
    let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * 4);
    for &c in &y {
        for j in 0..4 {
            let z: f64 = StandardNormal.sample(&mut g);
            data.push(0.2 * z + if j == 0 { 3.0 * c as f64 } else { 0.0 });
        }
    }
    (Tensor::new(vec![n, 4], data).unwrap(), y)
}

#[test]
fn probes_and_knn_separate_blobs() {
    let (a, ya) = two_blobs(100, 1);
    let (b, yb) = two_blobs(60, 2);
    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
        let mut cfg = ProbeConfig::new(kind, 0);
        cfg.optim.total_epochs = 30;
        assert_eq!(probe(&a, &ya, &b, &yb, &cfg).unwrap(), 1.0, "{kind:?}");
    }
    let knn = knn_eval(&a, &ya, &b, &yb, (2, 20)).unwrap();
    assert_eq!(knn.best_accuracy, 1.0);
    assert!((2..=20).contains(&knn.best_k));
    assert_eq!(knn.per_k.len(), 19);
}
