use rand::Rng;

use crate::data::ChannelStats;
use crate::error::{Error, Result};

/// Random resized crop, horizontal flip, then normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Crop width/height ratio, sampled log-uniformly.
    pub crop_ratio: (f64, f64),
    pub hflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Leaves geometry untouched.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "crop_scale",
                format!("[{lo}, {hi}] is not within (0, 1]"),
            ));
        }
        let (lo, hi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(
                "crop_ratio",
                format!("[{lo}, {hi}] is not a positive interval"),
            ));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Crop rectangle `(top, left, height, width)`.
pub type Crop = (usize, usize, usize, usize);

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Samples a crop; after ten rejected draws falls back to a ratio-clamped center crop.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &AugmentConfig) -> Crop {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < cfg.crop_ratio.0 {
        ((w as f64 / cfg.crop_ratio.0).round() as usize, w)
    } else if ratio > cfg.crop_ratio.1 {
        (h, (h as f64 * cfg.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Catmull-Rom cubic kernel (`a = -0.5`).
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for resampling `src` samples onto `dst` with half-pixel centers.
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = (i as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let mut idx = [0; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let j = base as isize + k as isize - 1;
                idx[k] = j.clamp(0, src as isize - 1) as usize;
                wts[k] = cubic(t - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resize of an `H x W x C` region to `out_h x out_w`, clamping at the region border.
pub fn resize_bicubic(
    img: &[f64],
    (h, w, c): (usize, usize, usize),
    crop: Crop,
    (out_h, out_w): (usize, usize),
) -> Vec<f64> {
    let (top, left, ch, cw) = crop;
    let xt = taps(cw, out_w);
    let yt = taps(ch, out_h);
    let mut rows = vec![0.0; ch * out_w * c];
    for y in 0..ch {
        for (x, (idx, wts)) in xt.iter().enumerate() {
            for k in 0..c {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += wts[t] * img[((top + y) * w + left + idx[t]) * c + k];
                }
                rows[(y * out_w + x) * c + k] = acc;
            }
        }
    }
    debug_assert!(top + ch <= h);
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, (idx, wts)) in yt.iter().enumerate() {
        for i in 0..out_w * c {
            let mut acc = 0.0;
            for t in 0..4 {
                acc += wts[t] * rows[idx[t] * out_w * c + i];
            }
            out[y * out_w * c + i] = acc;
        }
    }
    out
}

/// Mirrors an `H x W x C` image left to right in place.
pub fn hflip(img: &mut [f64], (h, w, c): (usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w / 2 {
            for k in 0..c {
                img.swap((y * w + x) * c + k, (y * w + w - 1 - x) * c + k);
            }
        }
    }
}

/// Crop, resize back to native size, maybe flip, then normalize.
pub fn augment<R: Rng + ?Sized>(
    rng: &mut R,
    img: &[f64],
    dims: (usize, usize, usize),
    cfg: &AugmentConfig,
    stats: &ChannelStats,
) -> Vec<f64> {
    let (h, w, c) = dims;
    let crop = sample_crop(rng, h, w, cfg);
    let mut out = if crop == (0, 0, h, w) {
        img.to_vec()
    } else {
        resize_bicubic(img, dims, crop, (h, w))
    };
    if cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob {
        hflip(&mut out, dims);
    }
    for (i, v) in out.iter_mut().enumerate() {
        *v = (*v - stats.mean[i % c]) / stats.std[i % c];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn image(h: usize, w: usize, c: usize) -> Vec<f64> {
        (0..h * w * c)
            .map(|i| ((i * 37) % 101) as f64 / 100.0)
            .collect()
    }

    #[test]
    fn identity_geometry_only_normalizes() {
        let img = image(8, 8, 3);
        let stats = ChannelStats {
            mean: vec![0.5, 0.25, 0.0],
            std: vec![2.0, 1.0, 0.5],
        };
        let out = augment(
            &mut rng::seeded(1),
            &img,
            (8, 8, 3),
            &AugmentConfig::identity(),
            &stats,
        );
        for (i, (a, b)) in out.iter().zip(&img).enumerate() {
            assert!((a - (b - stats.mean[i % 3]) / stats.std[i % 3]).abs() < 1e-15);
        }
    }

    #[test]
    fn same_size_resize_is_exact() {
        let img = image(6, 5, 2);
        assert_eq!(resize_bicubic(&img, (6, 5, 2), (0, 0, 6, 5), (6, 5)), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = vec![0.7; 16 * 16];
        let mut g = rng::seeded(2);
        for _ in 0..20 {
            let crop = sample_crop(&mut g, 16, 16, &AugmentConfig::default());
            let out = resize_bicubic(&img, (16, 16, 1), crop, (16, 16));
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = image(4, 5, 3);
        let mut x = img.clone();
        hflip(&mut x, (4, 5, 3));
        assert_ne!(x, img);
        assert_eq!(&x[..3], &img[12..15]);
        hflip(&mut x, (4, 5, 3));
        assert_eq!(x, img);
    }

    #[test]
    fn crops_respect_bounds() {
        let cfg = AugmentConfig::default();
        let mut g = rng::seeded(3);
        for _ in 0..500 {
            let (t, l, h, w) = sample_crop(&mut g, 32, 32, &cfg);
            assert!(t + h <= 32 && l + w <= 32 && h > 0 && w > 0);
            let frac = (h * w) as f64 / 1024.0;
            assert!(frac > 0.15 && frac <= 1.0);
        }
        // impossible ratio forces the fallback
        let odd = AugmentConfig {
            crop_ratio: (8.0, 9.0),
            ..cfg
        };
        assert_eq!(sample_crop(&mut g, 32, 32, &odd), (14, 0, 4, 32));
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for i in 0..10 {
            let t = i as f64 / 10.0;
            let s: f64 = (0..4).map(|k| cubic(t - (k as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
