use rayon::prelude::*;

use super::augment::AugmentConfig;
use super::optim::{lr_at, OptimConfig, Optimizer};
use super::pretrain::prepare_batch;
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::pca::{fit_pca, PcaBasis};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{trunc_normal, Graph, Params, VitModel};

use rand::seq::SliceRandom;

const FEATURE_BATCH: usize = 128;
const HEAD_INIT_STD: f64 = 0.01;

// Stream tags for `rng::stream`.
const FEATURES: u64 = 10;
const HEAD_INIT: u64 = 11;
const SHUFFLE: u64 = 12;
const BATCH: u64 = 13;

/// PCA of the normalized training images, the space the model sees.
pub fn fit_basis(train: &Dataset, stats: &ChannelStats) -> Result<PcaBasis> {
    let mut x = train.flat_matrix()?;
    stats.normalize(&mut x);
    fit_pca(&x)
}

/// CLS features `[N, enc_hidden]` and labels for every image of `ds`.
///
/// Images are normalized with `stats`; with `augment` set, each image gets one
/// random crop/flip drawn from a stream keyed by `seed` and its index.
pub fn extract_features(
    model: &VitModel,
    ds: &Dataset,
    stats: &ChannelStats,
    augment: Option<&AugmentConfig>,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let cfg = model.config();
    if (ds.height, ds.width, ds.channels) != (cfg.image_h, cfg.image_w, cfg.channels) {
        return Err(Error::config(
            "checkpoint",
            format!(
                "model expects {}x{}x{} images, dataset has {}x{}x{}",
                cfg.image_h, cfg.image_w, cfg.channels, ds.height, ds.width, ds.channels
            ),
        ));
    }
    if ds.is_empty() {
        return Err(Error::invalid(
            "cannot extract features from an empty dataset",
        ));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts = idx
        .par_chunks(FEATURE_BATCH)
        .map(|chunk| {
            let x = match augment {
                None => prepare_batch(&mut rng::seeded(0), ds, chunk, stats, None)?,
                Some(a) => {
                    let mut data = Vec::with_capacity(chunk.len() * ds.image_len());
                    for &i in chunk {
                        let mut g = rng::stream(seed, &[FEATURES, i as u64]);
                        data.extend(prepare_batch(&mut g, ds, &[i], stats, Some(a))?.into_data());
                    }
                    Tensor::new(vec![chunk.len(), ds.height, ds.width, ds.channels], data)?
                }
            };
            model.cls_features(&x).map(Tensor::into_data)
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = parts.into_iter().flatten().collect();
    Ok((
        Tensor::new(vec![ds.len(), cfg.enc_hidden], data)?,
        ds.labels.clone(),
    ))
}

fn check_features(f: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    match *f.shape() {
        [n, d] if n == labels.len() => Ok((n, d)),
        ref s => Err(Error::invalid(format!(
            "features of shape {s:?} with {} labels",
            labels.len()
        ))),
    }
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut l = labels.to_vec();
    l.sort_unstable();
    l.dedup();
    l.len()
}

/// Negative mean log-likelihood of `labels` under `logits [B, L]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (b, l) = (s[0], s[1]);
    let mut onehot = vec![0.0; b * l];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * l + y] = 1.0;
    }
    let logp = tape.log_softmax(logits)?;
    let onehot = tape.constant(Tensor::new(vec![b, l], onehot)?);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Linear,
    /// One hidden layer as wide as the features, GELU.
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind, seed: u64) -> Self {
        Self {
            kind,
            optim: OptimConfig::probe(),
            seed,
        }
    }
}

/// A trained classifier over standardized frozen features.
#[derive(Clone, Debug)]
pub struct Probe {
    kind: ProbeKind,
    params: Params,
    mean: Vec<f64>,
    std: Vec<f64>,
    classes: usize,
}

impl Probe {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.p("head.weight")?;
        let b = g.p("head.bias")?;
        match self.kind {
            ProbeKind::Linear => g.tape.linear(x, w, b),
            ProbeKind::Mlp => {
                let (w1, b1) = (g.p("fc1.weight")?, g.p("fc1.bias")?);
                let h = g.tape.linear(x, w1, b1)?;
                let h = g.tape.gelu(h)?;
                g.tape.linear(h, w, b)
            }
        }
    }

    fn standardize(&self, f: &Tensor) -> Tensor {
        let d = self.mean.len();
        Tensor::from_fn(f.shape().to_vec(), |i| {
            (f.data()[i] - self.mean[i % d]) / self.std[i % d]
        })
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        if features.rank() != 2 || features.shape()[1] != self.mean.len() {
            return Err(Error::invalid(format!(
                "probe expects [N, {}] features, got {:?}",
                self.mean.len(),
                features.shape()
            )));
        }
        let mut g = Graph::new(&self.params, false);
        let x = g.tape.constant(self.standardize(features));
        let logits = self.forward(&mut g, x)?;
        Ok(argmax_rows(g.tape.value(logits), self.classes))
    }

    /// Top-1 accuracy on held-out features.
    pub fn score(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        check_features(features, labels)?;
        Ok(accuracy(&self.predict(features)?, labels))
    }
}

/// Trains a linear or MLP probe with softmax cross-entropy.
///
/// Features are standardized with training statistics. The learning rate
/// follows the linear scaling rule on the effective batch size.
pub fn train_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<Probe> {
    let (n, d) = check_features(features, labels)?;
    cfg.optim.validate()?;
    if distinct_classes(labels) < 2 {
        return Err(Error::invalid("probe training data has a single class"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for row in features.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
        }
    }
    for row in features.data().chunks(d) {
        for j in 0..d {
            sq[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std = sq
        .iter()
        .map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();

    let mut init = rng::stream(cfg.seed, &[HEAD_INIT]);
    let mut params = Params::new();
    if cfg.kind == ProbeKind::Mlp {
        params.insert(
            "fc1.weight",
            trunc_normal(&mut init, vec![d, d], HEAD_INIT_STD),
        );
        params.insert("fc1.bias", Tensor::zeros(vec![d]));
    }
    params.insert(
        "head.weight",
        trunc_normal(&mut init, vec![d, classes], HEAD_INIT_STD),
    );
    params.insert("head.bias", Tensor::zeros(vec![classes]));
    let mut probe = Probe {
        kind: cfg.kind,
        params,
        mean,
        std,
        classes,
    };
    let x = probe.standardize(features);

    let bs = cfg.optim.batch_size.min(n);
    let optim = OptimConfig {
        batch_size: bs,
        ..cfg.optim.clone()
    };
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = Optimizer::new(optim.clone(), &probe.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..optim.total_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        for chunk in order.chunks(bs) {
            let xb = gather_rows(&x, chunk, d)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new(&probe.params, true);
                let xv = g.tape.constant(xb);
                let logits = probe.forward(&mut g, xv)?;
                let loss = cross_entropy(&mut g.tape, logits, &yb)?;
                g.backward(loss)?
            };
            let lr = lr_at(step, &optim, steps_per_epoch);
            opt.step(&mut probe.params, &grads, lr)?;
            step += 1;
        }
    }
    Ok(probe)
}

fn gather_rows(x: &Tensor, rows: &[usize], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Trains on `(train_f, train_y)`, then scores on the test split.
pub fn probe(
    train_f: &Tensor,
    train_y: &[usize],
    test_f: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    train_probe(train_f, train_y, cfg)?.score(test_f, test_y)
}

/// Euclidean nearest-neighbour voter over stored training features.
#[derive(Clone, Debug)]
pub struct KnnClassifier {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl KnnClassifier {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = check_features(&features, &labels)?;
        if n == 0 {
            return Err(Error::invalid("k-NN needs training points"));
        }
        let classes = labels.iter().max().unwrap() + 1;
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Predictions for every `k` in `ks`; `out[j][i]` is the label of test point `i` at `ks[j]`.
    ///
    /// Neighbours are ranked by distance, then training index. Vote ties go
    /// to the smallest class index.
    pub fn predict(&self, test: &Tensor, ks: &[usize]) -> Result<Vec<Vec<usize>>> {
        let d = self.features.shape()[1];
        if test.rank() != 2 || test.shape()[1] != d {
            return Err(Error::invalid(format!(
                "k-NN expects [N, {d}] queries, got {:?}",
                test.shape()
            )));
        }
        let n = self.len();
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
            return Err(Error::invalid(format!("k = {k} outside [1, {n}]")));
        }
        let kmax = ks.iter().copied().max().unwrap_or(0);
        let per_point: Vec<Vec<usize>> = test
            .data()
            .par_chunks(d)
            .map(|q| {
                let mut dist: Vec<(f64, usize)> = self
                    .features
                    .data()
                    .chunks(d)
                    .enumerate()
                    .map(|(i, t)| (t.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                    .collect();
                dist.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut votes = vec![0usize; self.classes];
                let mut at_k = vec![0; kmax + 1];
                for (rank, &(_, i)) in dist.iter().take(kmax).enumerate() {
                    votes[self.labels[i]] += 1;
                    let mut best = 0;
                    for c in 1..self.classes {
                        if votes[c] > votes[best] {
                            best = c;
                        }
                    }
                    at_k[rank + 1] = best;
                }
                ks.iter().map(|&k| at_k[k]).collect()
            })
            .collect();
        Ok((0..ks.len())
            .map(|j| per_point.iter().map(|p| p[j]).collect())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub best_k: usize,
    pub best_accuracy: f64,
    /// Accuracy for every `k` searched.
    pub per_k: Vec<(usize, f64)>,
}

/// Accuracy for each `k` in `k_range` (upper end clamped to the training size); reports the best.
pub fn knn_eval(
    train_f: &Tensor,
    train_y: &[usize],
    test_f: &Tensor,
    test_y: &[usize],
    k_range: (usize, usize),
) -> Result<KnnResult> {
    check_features(test_f, test_y)?;
    if test_y.is_empty() {
        return Err(Error::invalid("k-NN needs test points"));
    }
    let knn = KnnClassifier::new(train_f.clone(), train_y.to_vec())?;
    let (lo, hi) = (k_range.0.max(1), k_range.1.min(knn.len()));
    if lo > hi {
        return Err(Error::invalid(format!(
            "k range [{}, {}] is empty for {} training points",
            k_range.0,
            k_range.1,
            knn.len()
        )));
    }
    let ks: Vec<usize> = (lo..=hi).collect();
    let preds = knn.predict(test_f, &ks)?;
    let per_k: Vec<(usize, f64)> = ks
        .iter()
        .zip(&preds)
        .map(|(&k, p)| (k, accuracy(p, test_y)))
        .collect();
    let &(best_k, best_accuracy) = per_k
        .iter()
        .fold(&per_k[0], |b, c| if c.1 > b.1 { c } else { b });
    Ok(KnnResult {
        best_k,
        best_accuracy,
        per_k,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub optim: OptimConfig,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            optim: OptimConfig::finetune(),
            augment: Some(AugmentConfig::default()),
            seed,
        }
    }
}

/// Encoder weights plus a linear head on the CLS token.
#[derive(Clone, Debug)]
pub struct Classifier<'m> {
    model: &'m VitModel,
    pub params: Params,
    classes: usize,
}

impl<'m> Classifier<'m> {
    /// Copies the encoder from `model` and attaches a fresh head.
    pub fn new(model: &'m VitModel, classes: usize, seed: u64) -> Self {
        let mut params = Params::new();
        for (name, t) in model.params.iter() {
            if !name.starts_with("dec.") && name != "mask_token" {
                params.insert(name, t.clone());
            }
        }
        let e = model.config().enc_hidden;
        let mut init = rng::stream(seed, &[HEAD_INIT]);
        params.insert(
            "head.weight",
            trunc_normal(&mut init, vec![e, classes], HEAD_INIT_STD),
        );
        params.insert("head.bias", Tensor::zeros(vec![classes]));
        Self {
            model,
            params,
            classes,
        }
    }

    fn logits(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<Var> {
        let z = self.model.encode_full(g, x)?;
        let cls = g.tape.slice(z, 1, 0, 1)?;
        let b = x.shape()[0];
        let cls = g.tape.reshape(cls, &[b, self.model.config().enc_hidden])?;
        let (w, bias) = (g.p("head.weight")?, g.p("head.bias")?);
        g.tape.linear(cls, w, bias)
    }

    pub fn predict(&self, ds: &Dataset, stats: &ChannelStats) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let parts = idx
            .par_chunks(FEATURE_BATCH)
            .map(|chunk| {
                let x = prepare_batch(&mut rng::seeded(0), ds, chunk, stats, None)?;
                let mut g = Graph::new(&self.params, false);
                let logits = self.logits(&mut g, &x)?;
                Ok(argmax_rows(g.tape.value(logits), self.classes))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn score(&self, ds: &Dataset, stats: &ChannelStats) -> Result<f64> {
        Ok(accuracy(&self.predict(ds, stats)?, &ds.labels))
    }
}

/// Trains encoder and head jointly, then returns test top-1 accuracy.
pub fn finetune(
    model: &VitModel,
    train: &Dataset,
    test: &Dataset,
    stats: &ChannelStats,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    cfg.optim.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("fine-tuning needs non-empty splits"));
    }
    if distinct_classes(&train.labels) < 2 {
        return Err(Error::invalid("fine-tuning data has a single class"));
    }
    let classes = train.num_classes.max(test.num_classes);
    let mut clf = Classifier::new(model, classes, cfg.seed);
    let n = train.len();
    let bs = cfg.optim.batch_size.min(n);
    let optim = OptimConfig {
        batch_size: bs,
        ..cfg.optim.clone()
    };
    let steps_per_epoch = n.div_ceil(bs);
    let mut opt = Optimizer::new(optim.clone(), &clf.params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..optim.total_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]));
        for (bi, chunk) in order.chunks(bs).enumerate() {
            let mut g = rng::stream(cfg.seed, &[BATCH, epoch as u64, bi as u64]);
            let x = prepare_batch(&mut g, train, chunk, stats, cfg.augment.as_ref())?;
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let grads = {
                let mut graph = Graph::new(&clf.params, true);
                let logits = clf.logits(&mut graph, &x)?;
                let loss = cross_entropy(&mut graph.tape, logits, &y)?;
                graph.backward(loss)?
            };
            let lr = lr_at(step, &optim, steps_per_epoch);
            opt.step(&mut clf.params, &grads, lr)?;
            step += 1;
        }
    }
    clf.score(test, stats)
}
