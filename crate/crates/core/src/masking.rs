//! Binary masks for both regimes: pixel patches and principal components.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch-grid mask; `masked[i]` refers to patch `i` in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub masked: Vec<bool>,
    pub ratio: f64,
}

impl PatchMask {
    /// Mask with nothing hidden.
    pub fn none(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            masked: vec![false; grid_h * grid_w],
            ratio: 0.0,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.masked.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len())
            .filter(|&i| !self.masked[i])
            .collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Fraction of patches hidden.
    pub fn masked_fraction(&self) -> f64 {
        self.num_masked() as f64 / self.num_patches() as f64
    }
}

/// Component mask; `masked[l]` refers to principal component `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentMask {
    pub masked: Vec<bool>,
    pub target_ratio: f64,
    /// Sum of the variance fractions of the masked components.
    pub achieved_ratio: f64,
}

impl ComponentMask {
    /// Every component visible.
    pub fn all_visible(dim: usize) -> Self {
        Self {
            masked: vec![false; dim],
            target_ratio: 0.0,
            achieved_ratio: 0.0,
        }
    }

    pub fn from_masked(masked: Vec<bool>, variance_fractions: &[f64], target_ratio: f64) -> Self {
        let achieved_ratio = masked
            .iter()
            .zip(variance_fractions)
            .filter(|(m, _)| **m)
            .map(|(_, f)| f)
            .sum();
        Self {
            masked,
            target_ratio,
            achieved_ratio,
        }
    }

    pub fn dim(&self) -> usize {
        self.masked.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// 1 for visible components, 0 for masked ones.
    pub fn visible_indicator(&self) -> Vec<f64> {
        self.masked
            .iter()
            .map(|&m| if m { 0.0 } else { 1.0 })
            .collect()
    }

    /// 1 for masked components, 0 for visible ones.
    pub fn masked_indicator(&self) -> Vec<f64> {
        self.masked
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }

    /// The mask with visible and masked sets swapped.
    pub fn complement(&self) -> Self {
        Self {
            masked: self.masked.iter().map(|m| !m).collect(),
            target_ratio: 1.0 - self.target_ratio,
            achieved_ratio: 1.0 - self.achieved_ratio,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioPolicy {
    Fixed(f64),
    Uniform { lo: f64, hi: f64 },
}

impl RatioPolicy {
    /// 75% of patches, the conventional MAE setting.
    pub const STANDARD: RatioPolicy = RatioPolicy::Fixed(0.75);

    /// Per-batch ratio drawn from [0.1, 0.9].
    pub const RANDOM: RatioPolicy = RatioPolicy::Uniform { lo: 0.1, hi: 0.9 };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RatioPolicy::Fixed(r) => (0.0..=1.0).contains(&r),
            RatioPolicy::Uniform { lo, hi } => 0.0 <= lo && lo <= hi && hi <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid ratio policy {self:?}")))
        }
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::invalid(format!("masking ratio {r} outside [0, 1]")))
    }
}

/// Draws one ratio; call once per batch.
pub fn draw_ratio<R: Rng + ?Sized>(rng: &mut R, policy: RatioPolicy) -> f64 {
    match policy {
        RatioPolicy::Fixed(r) => r,
        RatioPolicy::Uniform { lo, hi } if lo == hi => lo,
        RatioPolicy::Uniform { lo, hi } => rng.random_range(lo..=hi),
    }
}

/// Masks exactly `round(r * P)` patches chosen uniformly without replacement.
pub fn sample_patch_mask<R: Rng + ?Sized>(
    rng: &mut R,
    grid_h: usize,
    grid_w: usize,
    r: f64,
) -> Result<PatchMask> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::invalid("patch grid must be non-empty"));
    }
    check_ratio(r)?;
    let p = grid_h * grid_w;
    // f64::round rounds half away from zero
    let count = ((r * p as f64).round() as usize).min(p);
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(rng);
    let mut masked = vec![false; p];
    for &i in &order[..count] {
        masked[i] = true;
    }
    Ok(PatchMask {
        grid_h,
        grid_w,
        masked,
        ratio: r,
    })
}

/// Greedy variance-budget mask over a given visiting order.
///
/// Components are masked in `order` while the masked variance is below `r`;
/// the component that reaches or crosses `r` is included, then visiting stops.
pub fn component_mask_from_order(
    order: &[usize],
    variance_fractions: &[f64],
    r: f64,
) -> Result<ComponentMask> {
    check_ratio(r)?;
    let d = variance_fractions.len();
    if order.len() != d {
        return Err(Error::invalid(format!(
            "visiting order has {} entries for {d} components",
            order.len()
        )));
    }
    let total: f64 = variance_fractions.iter().sum();
    if r > 0.0 && !(total > 0.0) {
        return Err(Error::DegenerateSpectrum);
    }
    let mut masked = vec![false; d];
    if r >= 1.0 {
        for (m, &f) in masked.iter_mut().zip(variance_fractions) {
            *m = f > 0.0;
        }
    } else if r > 0.0 {
        let mut cumulative = 0.0;
        for &l in order {
            if cumulative >= r {
                break;
            }
            masked[l] = true;
            cumulative += variance_fractions[l];
        }
    }
    Ok(ComponentMask::from_masked(masked, variance_fractions, r))
}

/// Shuffles the components and applies [`component_mask_from_order`].
pub fn sample_component_mask<R: Rng + ?Sized>(
    rng: &mut R,
    variance_fractions: &[f64],
    r: f64,
) -> Result<ComponentMask> {
    let mut order: Vec<usize> = (0..variance_fractions.len()).collect();
    order.shuffle(rng);
    component_mask_from_order(&order, variance_fractions, r)
}

/// Visibility indicator of shape `[H, W, C]`: 0 on every pixel of a masked patch.
pub fn patch_mask_to_pixel_indicator(
    mask: &PatchMask,
    image_h: usize,
    image_w: usize,
    patch_px: usize,
    channels: usize,
) -> Result<Tensor> {
    if patch_px == 0 || !image_h.is_multiple_of(patch_px) || !image_w.is_multiple_of(patch_px) {
        return Err(Error::invalid(format!(
            "image {image_h}x{image_w} is not divisible into {patch_px}px patches"
        )));
    }
    if image_h / patch_px != mask.grid_h || image_w / patch_px != mask.grid_w {
        return Err(Error::invalid(format!(
            "mask grid {}x{} does not match image {image_h}x{image_w} with {patch_px}px patches",
            mask.grid_h, mask.grid_w
        )));
    }
    Ok(Tensor::from_fn(vec![image_h, image_w, channels], |i| {
        let pix = i / channels;
        let (y, x) = (pix / image_w, pix % image_w);
        let patch = (y / patch_px) * mask.grid_w + x / patch_px;
        if mask.masked[patch] {
            0.0
        } else {
            1.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    const FRACS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

    #[test]
    fn patch_mask_extremes() {
        let mut g = rng::seeded(0);
        assert_eq!(
            sample_patch_mask(&mut g, 4, 4, 0.0).unwrap().num_masked(),
            0
        );
        assert_eq!(
            sample_patch_mask(&mut g, 4, 4, 1.0).unwrap().num_masked(),
            16
        );
        assert_eq!(
            sample_patch_mask(&mut g, 4, 4, 0.75).unwrap().num_masked(),
            12
        );
        assert!(sample_patch_mask(&mut g, 4, 4, 1.5).is_err());
    }

    #[test]
    fn patch_count_rounds_half_away_from_zero() {
        let mut g = rng::seeded(3);
        // 0.5 * 5 = 2.5 -> 3
        assert_eq!(
            sample_patch_mask(&mut g, 1, 5, 0.5).unwrap().num_masked(),
            3
        );
    }

    #[test]
    fn patch_frequencies_are_uniform() {
        let mut g = rng::seeded(11);
        let mut counts = [0usize; 16];
        let draws = 10_000;
        for _ in 0..draws {
            let m = sample_patch_mask(&mut g, 4, 4, 0.75).unwrap();
            for (c, &b) in counts.iter_mut().zip(&m.masked) {
                *c += b as usize;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.75).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn greedy_budget_hand_trace() {
        let m = component_mask_from_order(&[3, 1, 0, 2], &FRACS, 0.3).unwrap();
        assert_eq!(m.masked, vec![false, true, false, true]);
        assert!((m.achieved_ratio - 0.4).abs() < 1e-12);
    }

    #[test]
    fn greedy_budget_extremes() {
        let none = component_mask_from_order(&[0, 1, 2, 3], &FRACS, 0.0).unwrap();
        assert_eq!(none.num_masked(), 0);
        assert_eq!(none.achieved_ratio, 0.0);
        let all = component_mask_from_order(&[2, 0, 3, 1], &FRACS, 1.0).unwrap();
        assert_eq!(all.num_masked(), 4);
        assert!((all.achieved_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_spectrum_is_an_error() {
        let mut g = rng::seeded(0);
        assert!(matches!(
            sample_component_mask(&mut g, &[0.0, 0.0], 0.5),
            Err(Error::DegenerateSpectrum)
        ));
        assert!(sample_component_mask(&mut g, &[0.0, 0.0], 0.0).is_ok());
    }

    #[test]
    fn draw_ratio_policies() {
        let mut g = rng::seeded(5);
        assert_eq!(draw_ratio(&mut g, RatioPolicy::STANDARD), 0.75);
        assert_eq!(
            draw_ratio(&mut g, RatioPolicy::Uniform { lo: 0.2, hi: 0.2 }),
            0.2
        );
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let r = draw_ratio(&mut g, RatioPolicy::RANDOM);
            assert!((0.1..=0.9).contains(&r));
            sum += r;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.02);
        assert!(RatioPolicy::Uniform { lo: 0.6, hi: 0.4 }
            .validate()
            .is_err());
    }

    #[test]
    fn pixel_indicator_counts() {
        let none = PatchMask::none(2, 2);
        let ind = patch_mask_to_pixel_indicator(&none, 16, 16, 8, 3).unwrap();
        assert!(ind.data().iter().all(|&v| v == 1.0));

        let mut one = PatchMask::none(2, 2);
        one.masked[0] = true;
        let ind = patch_mask_to_pixel_indicator(&one, 16, 16, 8, 3).unwrap();
        let zeros: Vec<usize> = (0..ind.numel()).filter(|&i| ind.data()[i] == 0.0).collect();
        assert_eq!(zeros.len(), 8 * 8 * 3);
        assert!(zeros.iter().all(|&i| (i / 3) / 16 < 8 && (i / 3) % 16 < 8));

        let mut all = PatchMask::none(2, 2);
        all.masked = vec![true; 4];
        let ind = patch_mask_to_pixel_indicator(&all, 16, 16, 8, 1).unwrap();
        assert!(ind.data().iter().all(|&v| v == 0.0));

        assert!(patch_mask_to_pixel_indicator(&none, 15, 16, 8, 1).is_err());
    }
}
