//! Dataset specifiers: `synthetic:key=val,...`, `cifar10:<dir>`, `pmds:<train>[,<test>]`.

use std::path::Path;

use pmae_core::data::{
    load_cifar10_binary, load_raw_tensor_dataset, synthetic_global_factors, Dataset, Split,
    SyntheticConfig,
};
use pmae_core::rng;

use crate::error::CliError;

pub struct Splits {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    pub fn test(&self) -> Result<&Dataset, CliError> {
        self.test.as_ref().ok_or_else(|| {
            CliError::Usage("this command needs a test split; use `pmds:<train>,<test>`".into())
        })
    }
}

fn synthetic(args: &str) -> Result<Splits, CliError> {
    let mut cfg = SyntheticConfig::default();
    let mut seed = 0u64;
    for kv in args.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("synthetic option `{kv}` is not key=value")))?;
        let bad = || CliError::Config(format!("synthetic option `{k}`: cannot parse `{v}`"));
        let int = || v.parse::<usize>().map_err(|_| bad());
        let float = || v.parse::<f64>().map_err(|_| bad());
        match k {
            "n_train" => cfg.n_train = int()?,
            "n_test" => cfg.n_test = int()?,
            "height" => cfg.height = int()?,
            "width" => cfg.width = int()?,
            "classes" => cfg.num_classes = int()?,
            "noise" => cfg.noise_std = float()?,
            "factors" => cfg.num_factors = int()?,
            "factor_std_max" => cfg.factor_std_max = float()?,
            "factor_std_min" => cfg.factor_std_min = float()?,
            "class_amp" => cfg.class_amp = float()?,
            "seed" => seed = v.parse().map_err(|_| bad())?,
            _ => return Err(CliError::Config(format!("unknown synthetic option `{k}`"))),
        }
    }
    let (train, test, _) = synthetic_global_factors(&mut rng::seeded(seed), &cfg)?;
    Ok(Splits {
        train,
        test: Some(test),
    })
}

pub fn load(spec: &str) -> Result<Splits, CliError> {
    let (kind, rest) = spec.split_once(':').ok_or_else(|| {
        CliError::Config(format!(
            "data `{spec}`: expected synthetic:, cifar10: or pmds:"
        ))
    })?;
    match kind {
        "synthetic" => synthetic(rest),
        "cifar10" => {
            let (train, test) = load_cifar10_binary(Path::new(rest))?;
            Ok(Splits {
                train,
                test: Some(test),
            })
        }
        "pmds" => {
            let mut paths = rest.splitn(2, ',');
            let train =
                load_raw_tensor_dataset(Path::new(paths.next().unwrap_or("")), Split::Train)?;
            let test = paths
                .next()
                .map(|p| load_raw_tensor_dataset(Path::new(p), Split::Test))
                .transpose()?;
            Ok(Splits { train, test })
        }
        _ => Err(CliError::Config(format!(
            "data `{spec}`: unknown source `{kind}`"
        ))),
    }
}
