use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Pixels, Split};
use crate::error::{Error, Result};

/// Generator settings for [`synthetic_global_factors`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Isotropic per-pixel Gaussian noise.
    pub noise_std: f64,
    /// Number of class-independent high-variance patterns.
    pub num_factors: usize,
    /// Std of the strongest factor; later factors decay geometrically to `factor_std_min`.
    pub factor_std_max: f64,
    pub factor_std_min: f64,
    /// Class coefficient magnitude; classes sit at evenly spaced levels in `[-a, a]`.
    pub class_amp: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            height: 16,
            width: 16,
            num_classes: 2,
            noise_std: 0.1,
            num_factors: 16,
            factor_std_max: 3.0,
            factor_std_min: 1.0,
            class_amp: 0.5,
        }
    }
}

/// Which patterns the generator used.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    /// Unit-norm pixel patterns of the noise factors, strongest first.
    pub factor_patterns: Vec<Vec<f64>>,
    pub factor_stds: Vec<f64>,
    /// Unit-norm pixel pattern whose coefficient encodes the label.
    pub class_pattern: Vec<f64>,
    /// `(u, v)` frequency of the class pattern.
    pub class_frequency: (usize, usize),
    /// Coefficient level of each class.
    pub class_levels: Vec<f64>,
}

/// Orthonormal 2-D DCT-II basis image for frequency `(u, v)`, row-major.
pub fn dct_pattern(height: usize, width: usize, u: usize, v: usize) -> Vec<f64> {
    let alpha = |k: usize, n: usize| {
        if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    let (au, av) = (alpha(u, height), alpha(v, width));
    let pi = std::f64::consts::PI;
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            au * av
                * (pi * (2.0 * y + 1.0) * u as f64 / (2 * height) as f64).cos()
                * (pi * (2.0 * x + 1.0) * v as f64 / (2 * width) as f64).cos()
        })
        .collect()
}

/// Frequencies other than DC, lowest total frequency first.
fn frequency_order(height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut f: Vec<(usize, usize)> = (0..height)
        .flat_map(|u| (0..width).map(move |v| (u, v)))
        .filter(|&uv| uv != (0, 0))
        .collect();
    f.sort_by_key(|&(u, v)| (u + v, u));
    f
}

/// Grayscale images `sum_k a_k B_k + a_y B_c + noise` over DCT patterns `B`.
///
/// The `num_factors` lowest frequencies carry large class-independent
/// coefficients; the next frequency carries a small coefficient whose level
/// is set by the label. Labels cycle through the classes.
pub fn synthetic_global_factors<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SyntheticConfig,
) -> Result<(Dataset, Dataset, SyntheticTruth)> {
    if cfg.num_classes < 2 {
        return Err(Error::config("num_classes", "need at least two classes"));
    }
    let order = frequency_order(cfg.height, cfg.width);
    if cfg.num_factors + 1 > order.len() {
        return Err(Error::config(
            "num_factors",
            format!(
                "{} factors do not fit a {}x{} image",
                cfg.num_factors, cfg.height, cfg.width
            ),
        ));
    }
    if !(cfg.noise_std >= 0.0
        && cfg.factor_std_min > 0.0
        && cfg.factor_std_max >= cfg.factor_std_min)
    {
        return Err(Error::config(
            "noise_std",
            "standard deviations must be non-negative and ordered",
        ));
    }
    let k = cfg.num_factors;
    let decay = if k > 1 {
        (cfg.factor_std_min / cfg.factor_std_max).powf(1.0 / (k - 1) as f64)
    } else {
        1.0
    };
    let factor_stds: Vec<f64> = (0..k)
        .map(|i| cfg.factor_std_max * decay.powi(i as i32))
        .collect();
    let factor_patterns: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&(u, v)| dct_pattern(cfg.height, cfg.width, u, v))
        .collect();
    let class_frequency = order[k];
    let class_pattern = dct_pattern(cfg.height, cfg.width, class_frequency.0, class_frequency.1);
    let l = cfg.num_classes;
    let class_levels: Vec<f64> = (0..l)
        .map(|y| cfg.class_amp * (2.0 * y as f64 / (l - 1) as f64 - 1.0))
        .collect();
    let truth = SyntheticTruth {
        factor_patterns,
        factor_stds,
        class_pattern,
        class_frequency,
        class_levels,
    };

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = cfg.height * cfg.width;
    let mut make = |n: usize, split: Split| -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut img = vec![0.0; d];
        for i in 0..n {
            let y = i % l;
            img.iter_mut().for_each(|p| *p = 0.0);
            for (pat, s) in truth.factor_patterns.iter().zip(&truth.factor_stds) {
                let a = s * std_normal.sample(rng);
                img.iter_mut().zip(pat).for_each(|(p, b)| *p += a * b);
            }
            let a = truth.class_levels[y];
            img.iter_mut()
                .zip(&truth.class_pattern)
                .for_each(|(p, b)| *p += a * b);
            if cfg.noise_std > 0.0 {
                img.iter_mut()
                    .for_each(|p| *p += cfg.noise_std * std_normal.sample(rng));
            }
            pixels.extend(img.iter().map(|&p| p as f32));
            labels.push(y);
        }
        Dataset::new(
            "synthetic",
            split,
            (cfg.height, cfg.width, 1),
            l,
            Pixels::F32(pixels),
            labels,
        )
    };
    let train = make(cfg.n_train, Split::Train)?;
    let test = make(cfg.n_test, Split::Test)?;
    Ok((train, test, truth))
}
