//! Pretraining loop, optimizers, augmentation and evaluation protocols.

mod augment;
mod eval;
mod metrics;
mod optim;
mod pretrain;

pub use augment::{augment, hflip, resize_bicubic, sample_crop, AugmentConfig, Crop};
pub use eval::{
    accuracy, cross_entropy, extract_features, finetune, fit_basis, knn_eval, probe, train_probe,
    Classifier, FinetuneConfig, KnnClassifier, KnnResult, Probe, ProbeConfig, ProbeKind,
};
pub use metrics::{append_csv, MetricRow, Metrics, METRICS_HEADER};
pub use optim::{decays, lr_at, OptimAlgo, OptimConfig, Optimizer, Schedule};
pub use pretrain::{check_basis, prepare_batch, pretrain, PretrainConfig, PretrainOutput};
