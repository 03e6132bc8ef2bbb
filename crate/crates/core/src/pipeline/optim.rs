use crate::error::{Error, Result};
use crate::vit::{ParamGrads, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimAlgo {
    AdamW,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Linear warmup, then half-cosine to zero.
    WarmupCosine,
    /// Linear warmup, then flat.
    WarmupConstant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub algo: OptimAlgo,
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Heavy-ball coefficient for SGD.
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub schedule: Schedule,
    pub eps: f64,
}

impl OptimConfig {
    /// AdamW, base lr 1.5e-4, batch 512, betas (0.9, 0.95), wd 0.05, 40 warmup of 800 epochs.
    pub fn pretrain() -> Self {
        Self {
            algo: OptimAlgo::AdamW,
            base_lr: 1.5e-4,
            batch_size: 512,
            beta1: 0.9,
            beta2: 0.95,
            momentum: 0.0,
            weight_decay: 0.05,
            warmup_epochs: 40,
            total_epochs: 800,
            schedule: Schedule::WarmupCosine,
            eps: 1e-8,
        }
    }

    /// SGD momentum 0.9, base lr 0.1, batch 512, wd 0, 10 warmup of 100 epochs.
    pub fn probe() -> Self {
        Self {
            algo: OptimAlgo::SgdMomentum,
            base_lr: 0.1,
            batch_size: 512,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_epochs: 10,
            total_epochs: 100,
            ..Self::pretrain()
        }
    }

    /// AdamW, base lr 1e-3, batch 512, betas (0.9, 0.99), wd 0.5, 5 warmup of 100 epochs.
    pub fn finetune() -> Self {
        Self {
            base_lr: 1e-3,
            beta2: 0.99,
            weight_decay: 0.5,
            warmup_epochs: 5,
            total_epochs: 100,
            ..Self::pretrain()
        }
    }

    /// Linear scaling rule: `base_lr * batch_size / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |f: &str, m: &str| Err(Error::config(f, m));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr", "must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if self.total_epochs == 0 {
            return fail("epochs", "must be positive");
        }
        if self.warmup_epochs > self.total_epochs {
            return fail("warmup_epochs", "exceeds the total number of epochs");
        }
        for (f, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(f, "must lie in [0, 1)");
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// Learning rate at optimizer step `step` given `steps_per_epoch`.
pub fn lr_at(step: usize, cfg: &OptimConfig, steps_per_epoch: usize) -> f64 {
    let peak = cfg.peak_lr();
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::WarmupConstant => peak,
        Schedule::WarmupCosine => {
            if step >= total {
                return 0.0;
            }
            let progress = (step - warmup) as f64 / (total - warmup) as f64;
            0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Parameters exempt from weight decay: biases, norm gains, CLS and mask tokens.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.contains("norm")
        || name == "cls_token"
        || name == "mask_token")
}

/// AdamW or SGD-momentum state over a fixed parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = match cfg.algo {
            OptimAlgo::AdamW => zeros.clone(),
            OptimAlgo::SgdMomentum => Vec::new(),
        };
        Self {
            cfg,
            m: zeros,
            v,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Missing gradients count as zero.
    ///
    /// Fails without touching anything if a gradient is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &ParamGrads, lr: f64) -> Result<()> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("gradient set does not match the parameters"));
        }
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params.tensor_at(i).numel() {
                    return Err(Error::invalid(format!(
                        "gradient for `{}` has the wrong length",
                        params.name_at(i)
                    )));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{}`",
                        params.name_at(i)
                    )));
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        for i in 0..params.len() {
            let wd = if decays(params.name_at(i)) {
                c.weight_decay
            } else {
                0.0
            };
            let g = grads.get(i);
            let p = params.tensor_at_mut(i).data_mut();
            let m = &mut self.m[i];
            match c.algo {
                OptimAlgo::AdamW => {
                    let v = &mut self.v[i];
                    let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                    let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                    for j in 0..p.len() {
                        let gj = g.map_or(0.0, |g| g[j]);
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                        let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                        p[j] -= lr * (update + wd * p[j]);
                    }
                }
                OptimAlgo::SgdMomentum => {
                    for j in 0..p.len() {
                        let gj = g.map_or(0.0, |g| g[j]) + wd * p[j];
                        m[j] = c.momentum * m[j] + gj;
                        p[j] -= lr * m[j];
                    }
                }
            }
        }
        Ok(())
    }
}
