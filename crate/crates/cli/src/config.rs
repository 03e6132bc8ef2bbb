//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pmae_core::masking::RatioPolicy;
use pmae_core::objectives::{LossConfig, LossKind};
use pmae_core::pipeline::{AugmentConfig, OptimConfig, PretrainConfig, Schedule};
use pmae_core::vit::VitConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mae,
    Pmae,
}

/// Every knob of a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: String,
    pub method: Method,
    pub loss: LossKind,
    pub norm_pix_targets: bool,
    pub ratio: RatioPolicy,
    pub basis: Option<PathBuf>,
    pub fit_basis: bool,
    pub model: String,
    pub patch_px: Option<usize>,
    pub enc_hidden: Option<usize>,
    pub enc_heads: Option<usize>,
    pub enc_mlp: Option<usize>,
    pub enc_depth: Option<usize>,
    pub dec_hidden: Option<usize>,
    pub dec_heads: Option<usize>,
    pub dec_mlp: Option<usize>,
    pub dec_depth: Option<usize>,
    pub optim: OptimConfig,
    pub augment: bool,
    pub crop_scale: (f64, f64),
    pub hflip_prob: f64,
    pub eval_augment: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            method: Method::Mae,
            loss: LossKind::Mae,
            norm_pix_targets: true,
            ratio: RatioPolicy::STANDARD,
            basis: None,
            fit_basis: false,
            model: "vit_t8".into(),
            patch_px: None,
            enc_hidden: None,
            enc_heads: None,
            enc_mlp: None,
            enc_depth: None,
            dec_hidden: None,
            dec_heads: None,
            dec_mlp: None,
            dec_depth: None,
            optim: OptimConfig::pretrain(),
            augment: true,
            crop_scale: (0.2, 1.0),
            hflip_prob: 0.5,
            eval_augment: true,
            seed: 0,
            out: PathBuf::from("run"),
            checkpoint_every: 0,
            wall_clock: false,
        }
    }
}

fn cfg_err(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config(format!("`{field}`: {}", msg.into()))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| cfg_err(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(cfg_err(key, format!("expected true or false, got `{v}`"))),
    }
}

/// `std`, `rd`, a number, `fixed:r` or `uniform:lo:hi`.
pub fn parse_ratio(v: &str) -> Result<RatioPolicy, CliError> {
    let policy = match v.split(':').collect::<Vec<_>>()[..] {
        ["std"] => RatioPolicy::STANDARD,
        ["rd"] => RatioPolicy::RANDOM,
        ["fixed", r] | [r] => RatioPolicy::Fixed(parse("ratio", r)?),
        ["uniform", lo, hi] => RatioPolicy::Uniform {
            lo: parse("ratio", lo)?,
            hi: parse("ratio", hi)?,
        },
        _ => return Err(cfg_err("ratio", format!("unrecognized policy `{v}`"))),
    };
    policy
        .validate()
        .map_err(|e| cfg_err("ratio", e.to_string()))?;
    Ok(policy)
}

fn ratio_str(r: RatioPolicy) -> String {
    match r {
        RatioPolicy::Fixed(r) => format!("fixed:{r}"),
        RatioPolicy::Uniform { lo, hi } => format!("uniform:{lo}:{hi}"),
    }
}

impl RunConfig {
    /// Reads a config file: one `key = value` per line, `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let k = k.trim();
            if seen.insert(k.to_string(), n + 1).is_some() {
                return Err(cfg_err(k, format!("set twice (line {})", n + 1)));
            }
            self.set(k, v.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let opt = |v: &str| -> Result<Option<usize>, CliError> { parse(key, v).map(Some) };
        match key {
            "data" => self.data = v.to_string(),
            "method" => {
                self.method = match v {
                    "mae" => Method::Mae,
                    "pmae" => Method::Pmae,
                    _ => return Err(cfg_err(key, format!("expected mae or pmae, got `{v}`"))),
                };
                self.loss = match self.method {
                    Method::Mae => LossKind::Mae,
                    Method::Pmae => LossKind::PmaePc,
                };
                self.norm_pix_targets = self.method == Method::Mae;
            }
            "loss" => self.loss = LossKind::parse(v).map_err(|e| cfg_err(key, e.to_string()))?,
            "norm_pix_targets" => self.norm_pix_targets = parse_bool(key, v)?,
            "ratio" => self.ratio = parse_ratio(v)?,
            "basis" => self.basis = (!v.is_empty()).then(|| PathBuf::from(v)),
            "fit_basis" => self.fit_basis = parse_bool(key, v)?,
            "model" => match v {
                "vit_t8" | "desk" => self.model = v.to_string(),
                _ => return Err(cfg_err(key, format!("expected vit_t8 or desk, got `{v}`"))),
            },
            "patch_px" => self.patch_px = opt(v)?,
            "enc_hidden" => self.enc_hidden = opt(v)?,
            "enc_heads" => self.enc_heads = opt(v)?,
            "enc_mlp" => self.enc_mlp = opt(v)?,
            "enc_depth" => self.enc_depth = opt(v)?,
            "dec_hidden" => self.dec_hidden = opt(v)?,
            "dec_heads" => self.dec_heads = opt(v)?,
            "dec_mlp" => self.dec_mlp = opt(v)?,
            "dec_depth" => self.dec_depth = opt(v)?,
            "base_lr" => self.optim.base_lr = parse(key, v)?,
            "batch_size" => self.optim.batch_size = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "warmup_epochs" => self.optim.warmup_epochs = parse(key, v)?,
            "epochs" => self.optim.total_epochs = parse(key, v)?,
            "schedule" => {
                self.optim.schedule = match v {
                    "cosine" => Schedule::WarmupCosine,
                    "constant" => Schedule::WarmupConstant,
                    _ => {
                        return Err(cfg_err(
                            key,
                            format!("expected cosine or constant, got `{v}`"),
                        ))
                    }
                }
            }
            "augment" => self.augment = parse_bool(key, v)?,
            "crop_scale_min" => self.crop_scale.0 = parse(key, v)?,
            "crop_scale_max" => self.crop_scale.1 = parse(key, v)?,
            "hflip_prob" => self.hflip_prob = parse(key, v)?,
            "eval_augment" => self.eval_augment = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            _ => return Err(cfg_err(key, "unknown key")),
        }
        Ok(())
    }

    pub fn vit(&self, image: (usize, usize, usize)) -> VitConfig {
        let (h, w, c) = image;
        let mut v = match self.model.as_str() {
            "desk" => VitConfig::desk(h, w, c),
            _ => VitConfig::vit_t8(h, w, c),
        };
        let pick = |o: Option<usize>, d: &mut usize| {
            if let Some(x) = o {
                *d = x;
            }
        };
        pick(self.patch_px, &mut v.patch_px);
        pick(self.enc_hidden, &mut v.enc_hidden);
        pick(self.enc_heads, &mut v.enc_heads);
        pick(self.enc_mlp, &mut v.enc_mlp);
        pick(self.enc_depth, &mut v.enc_depth);
        pick(self.dec_hidden, &mut v.dec_hidden);
        pick(self.dec_heads, &mut v.dec_heads);
        pick(self.dec_mlp, &mut v.dec_mlp);
        pick(self.dec_depth, &mut v.dec_depth);
        v
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_scale: self.crop_scale,
            hflip_prob: self.hflip_prob,
            ..AugmentConfig::default()
        }
    }

    /// Checks cross-field rules that single keys cannot.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.is_empty() {
            return Err(cfg_err("data", "is required"));
        }
        match self.method {
            Method::Mae => {
                if self.loss != LossKind::Mae {
                    return Err(cfg_err("loss", "method mae uses the mae loss"));
                }
                if self.basis.is_some() || self.fit_basis {
                    return Err(cfg_err(
                        "basis",
                        "method mae takes no component-mask settings",
                    ));
                }
            }
            Method::Pmae => {
                if self.loss == LossKind::Mae {
                    return Err(cfg_err("loss", "method pmae needs pmae_pc or pmae_pixel"));
                }
                if self.basis.is_none() && !self.fit_basis {
                    return Err(cfg_err(
                        "basis",
                        "method pmae needs `basis` or `fit_basis = true`",
                    ));
                }
                if self.basis.is_some() && self.fit_basis {
                    return Err(cfg_err("fit_basis", "conflicts with `basis`"));
                }
            }
        }
        let lc = LossConfig {
            kind: self.loss,
            norm_pix_targets: self.norm_pix_targets,
        };
        lc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.optim
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.augment_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn pretrain_config(
        &self,
        image: (usize, usize, usize),
    ) -> Result<PretrainConfig, CliError> {
        let pc = PretrainConfig {
            vit: self.vit(image),
            loss: LossConfig {
                kind: self.loss,
                norm_pix_targets: self.norm_pix_targets,
            },
            ratio: self.ratio,
            optim: self.optim.clone(),
            augment: self.augment.then(|| self.augment_config()),
            seed: self.seed,
            wall_clock: self.wall_clock,
        };
        pc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(pc)
    }

    /// Canonical text form; `from_file` on it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", self.data.clone());
        kv(
            "method",
            match self.method {
                Method::Mae => "mae",
                Method::Pmae => "pmae",
            }
            .into(),
        );
        kv("loss", self.loss.as_str().into());
        kv("norm_pix_targets", self.norm_pix_targets.to_string());
        kv("ratio", ratio_str(self.ratio));
        kv(
            "basis",
            self.basis
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("fit_basis", self.fit_basis.to_string());
        kv("model", self.model.clone());
        for (k, v) in [
            ("patch_px", self.patch_px),
            ("enc_hidden", self.enc_hidden),
            ("enc_heads", self.enc_heads),
            ("enc_mlp", self.enc_mlp),
            ("enc_depth", self.enc_depth),
            ("dec_hidden", self.dec_hidden),
            ("dec_heads", self.dec_heads),
            ("dec_mlp", self.dec_mlp),
            ("dec_depth", self.dec_depth),
        ] {
            if let Some(v) = v {
                kv(k, v.to_string());
            }
        }
        let o = &self.optim;
        kv("base_lr", o.base_lr.to_string());
        kv("batch_size", o.batch_size.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("warmup_epochs", o.warmup_epochs.to_string());
        kv("epochs", o.total_epochs.to_string());
        kv(
            "schedule",
            match o.schedule {
                Schedule::WarmupCosine => "cosine",
                Schedule::WarmupConstant => "constant",
            }
            .into(),
        );
        kv("augment", self.augment.to_string());
        kv("crop_scale_min", self.crop_scale.0.to_string());
        kv("crop_scale_max", self.crop_scale.1.to_string());
        kv("hflip_prob", self.hflip_prob.to_string());
        kv("eval_augment", self.eval_augment.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("wall_clock", self.wall_clock.to_string());
        s
    }
}
